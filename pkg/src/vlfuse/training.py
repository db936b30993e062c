"""Training, evaluation and checkpoints for the toy vision-language model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .container import ShapeInconsistencyError, read_container, write_container
from .model import ModelParams, TrainConfig, apply_trainable_split, model_forward

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * step / total))``: lr0 at 0, zero at ``total``."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """Plain SGD; ``momentum > 0`` switches on heavy-ball velocity."""

    def __init__(self, params, momentum: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self, lr: float):
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.momentum:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.assign_(p.data - p.data.dtype.type(lr) * g)


def sample_loss(sample, params, cfg, epoch, active=None):
    logits, diag = model_forward(sample, params, cfg, epoch=epoch, active=active)
    loss = ad.cross_entropy(logits, sample.answer, sample.answer_positions)
    return loss, diag


def _diverged(what, epoch, diags):
    if diags:
        lo = min(min(d.alpha_min) for d in diags)
        hi = max(max(d.alpha_max) for d in diags)
        rng = f"alpha range [{lo}, {hi}]"
    else:
        rng = "alpha range unavailable"
    return TrainingDiverged(f"{what} at epoch {epoch}; {rng}")


def train_step(batch, params: ModelParams, opt: SGD, lr: float, epoch: int,
               cfg: TrainConfig):
    """One SGD update on the mean answer loss of ``batch``.

    Returns ``(loss, mean M-sparsity over the batch)``.  A non-finite loss
    raises ``TrainingDiverged`` carrying the extreme cross-attention scores.
    """
    with ad.record():
        losses, diags = [], []
        for s in batch:
            try:
                logits, diag = model_forward(s, params, cfg, epoch=epoch)
                diags.append(diag)
                losses.append(ad.cross_entropy(logits, s.answer, s.answer_positions))
            except FloatingPointError as exc:
                raise _diverged(f"NaN in forward ({exc})", epoch, diags) from exc
        total = ad.scale(ad.add_scalars(losses), 1.0 / len(losses))
    value = float(total.data)
    if not math.isfinite(value):
        raise _diverged(f"loss is {value}", epoch, diags)
    ad.backward(total, opt.params)
    opt.step(lr)
    return value, float(np.mean([d.m_sparsity for d in diags]))


@dataclass
class Metrics:
    accuracy: float
    mean_loss: float
    m_sparsity: float

    def to_dict(self):
        return {"accuracy": self.accuracy, "mean_loss": self.mean_loss,
                "m_sparsity": self.m_sparsity}


def greedy_answer(sample, params, cfg, active):
    """Decode ``len(sample.answer)`` tokens greedily after the question.

    With ``cfg.answer_vocab`` set the argmax runs over those tokens only, as
    for a multiple-choice answer slot.
    """
    toks = list(sample.question)
    allowed = None if cfg.answer_vocab is None else np.asarray(cfg.answer_vocab)
    out, diag = [], None
    for _ in range(len(sample.answer)):
        logits, diag = model_forward(sample, params, cfg, active=active, tokens=toks)
        last = logits.data[-1]
        nxt = int(np.argmax(last) if allowed is None else allowed[np.argmax(last[allowed])])
        out.append(nxt)
        toks.append(nxt)
    return out, diag


def evaluate(samples, params: ModelParams, cfg: TrainConfig, active: bool) -> Metrics:
    if not samples:
        raise ValueError("evaluate: empty dataset")
    correct, losses, sparsity = 0, [], []
    with ad.record(False):
        for s in samples:
            pred, diag = greedy_answer(s, params, cfg, active)
            correct += pred == list(s.answer)
            if len(s.answer) == 1:
                logits, _ = model_forward(s, params, cfg, active=active, tokens=s.question)
            else:
                logits, _ = model_forward(s, params, cfg, active=active)
            losses.append(float(ad.cross_entropy(logits, s.answer, s.answer_positions).data))
            sparsity.append(diag.m_sparsity)
    return Metrics(correct / len(samples), float(np.mean(losses)), float(np.mean(sparsity)))


def batches(samples, size, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), size):
        yield [samples[j] for j in order[i:i + size]]


def fit(train, ev, cfg: TrainConfig, params: ModelParams | None = None,
        on_epoch=None):
    """Train for ``cfg.epochs``; returns ``(params, list of per-epoch records)``.

    ``on_epoch(epoch, params, record)`` runs after each epoch (checkpointing).
    Epoch 0 is the untrained model and is reported to ``on_epoch`` too.
    """
    params = params or ModelParams.init(cfg)
    apply_trainable_split(params, cfg.peft)
    opt = SGD(params.parameters(), cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    records = []
    if on_epoch is not None:
        on_epoch(0, params, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr_start = cosine_lr(step, total, cfg.lr)
        losses, sparsity = [], []
        for batch in batches(train, cfg.batch_size, rng):
            lr = cosine_lr(step, total, cfg.lr)
            loss, sp = train_step(batch, params, opt, lr, epoch, cfg)
            losses.append(loss)
            sparsity.append(sp)
            step += 1
        active = cfg.active_at(epoch)
        m = evaluate(ev, params, cfg, active) if ev else None
        rec = {"epoch": epoch, "lr": lr_start, "train_loss": float(np.mean(losses)),
               "eval_accuracy": m.accuracy if m else None,
               "m_sparsity": float(np.mean(sparsity))}
        records.append(rec)
        log.info("epoch %d loss %.4f acc %s sparsity %.3f (%.1fs)", epoch, rec["train_loss"],
                 rec["eval_accuracy"], rec["m_sparsity"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, params, rec)
    return params, records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, cfg: TrainConfig, path, epoch: int) -> None:
    meta = {"config": cfg.to_dict(), "epoch": epoch, "seed": cfg.seed,
            "shift_passed": bool(cfg.active_at(epoch))}
    write_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, meta,
                    [(name, t.data) for name, t in params.named_parameters()])


def load_checkpoint(path):
    """Return ``(params, cfg, manifest)``; refuses any mismatch before building."""
    manifest, arrays = read_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
    cfg = TrainConfig.from_dict(manifest["config"])
    params = ModelParams.init(cfg)
    named = params.named_parameters()
    if [n for n, _ in named] != [b["name"] for b in manifest["blobs"]]:
        raise ShapeInconsistencyError("checkpoint parameter names do not match its config")
    for name, t in named:
        if arrays[name].shape != t.shape:
            raise ShapeInconsistencyError(f"{name}: stored {arrays[name].shape} vs {t.shape}")
    for name, t in named:
        t.assign_(arrays[name])
    return params, cfg, manifest


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
