"""Experiment commands: dataset generation, training, evaluation, ablation
grids and visualisation exports.  ``cli.py`` is a thin argparse layer over
these functions.

Run configs are JSON::

    {"dataset": "data/",            # existing dataset directory
     "out_dir": "runs/a",
     "generator": {...},            # SceneConfig fields (gen only)
     "n_train": 256, "n_eval": 1024, "data_seed": 0,
     "train": {...},                # TrainConfig fields
     "grid": {"delta": [...], "decay": [...], "shift_epoch": [...],
              "fusion": ["average", "weighted-average:0.9,0.1", ...],
              "source": [12, 18, ...]},
     "export": {"top_k": 2}}

Every run directory receives the fully resolved config as ``config.json``.
"""

from __future__ import annotations

import concurrent.futures
import copy
import csv
import itertools
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import SceneConfig, extract_patch_saliency, load_dataset, read_sample, saliency_entropy, write_dataset
from .inheritable import mask_to_gray, write_mask_csv, write_pgm
from .model import TrainConfig, model_forward
from .projector import hidden_activation_map, srproj
from .training import evaluate, fit, load_checkpoint, save_checkpoint, write_jsonl

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ["delta", "decay", "shift_epoch", "fusion", "source",
                    "eval_accuracy", "train_accuracy", "final_train_loss", "wall_time_s", "status"]
METRIC_FIELDS = ["epoch", "lr", "train_loss", "eval_accuracy", "m_sparsity"]


def _seed_override(seed):
    env = os.environ.get("RUN_SEED")
    return int(env) if env not in (None, "") else seed


@dataclass
class RunConfig:
    dataset: str | None = None
    out_dir: str | None = None
    generator: dict = field(default_factory=dict)
    n_train: int = 256
    n_eval: int = 1024
    data_seed: int = 0
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    export: dict = field(default_factory=lambda: {"top_k": 2})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self):
        return {"dataset": self.dataset, "out_dir": self.out_dir, "generator": self.generator,
                "n_train": self.n_train, "n_eval": self.n_eval, "data_seed": self.data_seed,
                "train": self.train, "grid": self.grid, "export": self.export}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(rc: RunConfig, out_dir, force=False) -> dict:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    seed = _seed_override(rc.data_seed)
    scene = SceneConfig(**rc.generator)
    index = write_dataset(out, scene, rc.n_train, rc.n_eval, seed)
    resolved = copy.deepcopy(rc)
    resolved.data_seed, resolved.generator = seed, scene.to_dict()
    resolved.save(out / "gen_config.json")
    return index


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def resolve_train_config(train: dict, index: dict) -> TrainConfig:
    """Fill data-dependent fields (widths, vocab, layer indices) from the dataset."""
    gen = index["generator"]
    d = dict(train)
    d.update(vocab=gen["vocab"], d1=gen["d1"], n_patches=gen["n_patches"],
             final_layer=gen["encoder_depth"])
    d.setdefault("intermediate_layer", gen["intermediate_layer_index"])
    d.setdefault("answer_vocab", SceneConfig(**gen).answer_vocab)
    d["seed"] = _seed_override(d.get("seed", 0))
    return TrainConfig.from_dict(d)


def train_on(train, ev, cfg: TrainConfig, run_dir=None):
    run = Path(run_dir) if run_dir else None
    if run:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, params, rec):
        if run:
            save_checkpoint(params, cfg, run / "checkpoints" / f"epoch_{epoch:03d}.ckpt", epoch)

    params, records = fit(train, ev, cfg, on_epoch=on_epoch)
    if run:
        write_jsonl([{k: r[k] for k in METRIC_FIELDS} for r in records], run / "metrics.jsonl")
    return params, records


def cmd_train(rc: RunConfig, out_dir=None):
    out = Path(out_dir or rc.out_dir)
    index, train, ev = load_dataset(rc.dataset)
    cfg = resolve_train_config(rc.train, index)
    out.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(rc)
    resolved.train, resolved.out_dir = cfg.to_dict(), str(out)
    resolved.save(out / "config.json")
    return train_on(train, ev, cfg, out)


def cmd_eval(checkpoint, dataset, split="eval", out_path=None, force_inactive=False) -> dict:
    params, cfg, manifest = load_checkpoint(checkpoint)
    _, train, ev = load_dataset(dataset)
    samples = ev if split == "eval" else train
    active = bool(manifest["shift_passed"]) and not force_inactive
    m = evaluate(samples, params, cfg, active)
    result = {"checkpoint": str(checkpoint), "split": split, "epoch": manifest["epoch"],
              "active": active, **m.to_dict()}
    if out_path:
        Path(out_path).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def parse_fusion(token: str):
    """``"weighted-average:0.9,0.1"`` -> ("weighted-average", [0.9, 0.1])."""
    mode, _, w = str(token).partition(":")
    return mode, ([float(x) for x in w.split(",")] if w else None)


def grid_points(grid: dict, base: TrainConfig):
    axes = {
        "delta": grid.get("delta") or [base.delta],
        "decay": grid.get("decay") or [base.decay],
        "shift_epoch": grid.get("shift_epoch") or [base.shift_epoch],
        "fusion": grid.get("fusion") or [base.fusion_mode],
        "source": grid.get("source") or [base.intermediate_layer],
    }
    pts = [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]
    pts.sort(key=lambda p: (float(p["delta"]), float(p["decay"]), int(p["shift_epoch"]),
                            str(p["fusion"]), int(p["source"])))
    return pts


def point_config(base: TrainConfig, point: dict) -> TrainConfig:
    mode, weights = parse_fusion(point["fusion"])
    return base.replace(delta=float(point["delta"]), decay=float(point["decay"]),
                        shift_epoch=int(point["shift_epoch"]), fusion_mode=mode,
                        fusion_weights=weights, intermediate_layer=int(point["source"]),
                        sources=None)


def _run_point(args):
    dataset, base_dict, point = args
    t0 = time.perf_counter()
    row = {k: point[k] for k in ("delta", "decay", "shift_epoch", "fusion", "source")}
    try:
        _, train, ev = load_dataset(dataset)
        cfg = point_config(TrainConfig.from_dict(base_dict), point)
        params, records = fit(train, None, cfg)
        active = cfg.active_at(cfg.epochs)
        row.update(eval_accuracy=evaluate(ev, params, cfg, active).accuracy,
                   train_accuracy=evaluate(train, params, cfg, active).accuracy,
                   final_train_loss=records[-1]["train_loss"], status="ok")
    except Exception as exc:  # one bad point must not sink the grid
        row.update(eval_accuracy="", train_accuracy="", final_train_loss="",
                   status=f"error: {type(exc).__name__}: {exc}")
    row["wall_time_s"] = round(time.perf_counter() - t0, 3)
    return row


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["label"] + ABLATION_COLUMNS if "label" in rows[0]
                           else ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_ablate(rc: RunConfig, out_dir=None, jobs=1, controls=False):
    """One training run per grid point; writes ``summary.csv`` (grid rows only).

    With ``controls`` a second file ``controls.csv`` holds a delta=0 run and
    an unmasked baseline run from the same base config and seed.
    """
    out = Path(out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = json.loads((Path(rc.dataset) / "index.json").read_text())
    base = resolve_train_config(rc.train, index)
    pts = grid_points(rc.grid, base)
    if not pts:
        raise ValueError("ablation grid is empty")
    resolved = copy.deepcopy(rc)
    resolved.train, resolved.out_dir = base.to_dict(), str(out)
    resolved.save(out / "config.json")

    rows = _map(_run_point, [(rc.dataset, base.to_dict(), p) for p in pts], jobs)
    _write_rows(rows, out / "summary.csv")
    result = {"summary": rows}
    if controls:
        ref = {"delta": 0.0, "decay": base.decay, "shift_epoch": base.shift_epoch,
               "fusion": base.fusion_mode if not base.fusion_weights else
               f"{base.fusion_mode}:{','.join(str(w) for w in base.fusion_weights)}",
               "source": base.intermediate_layer}
        ctrl = _map(_run_point, [(rc.dataset, base.to_dict(), ref),
                                 (rc.dataset, base.replace(inheritable=False).to_dict(), ref)],
                    jobs)
        ctrl[0]["label"], ctrl[1]["label"] = "delta0", "baseline"
        _write_rows(ctrl, out / "controls.csv")
        result["controls"] = ctrl
    return result


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _checkpoint_and_sample(checkpoint, dataset, sample_id):
    params, cfg, manifest = load_checkpoint(checkpoint)
    sample = read_sample(Path(dataset) / "samples", sample_id)
    return params, cfg, manifest, sample


def export_attention(params, cfg, sample, out_dir, active):
    """Per-layer mask CSV + PGM and a token legend; returns per-layer minima."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ad.record(False):
        _, diag = model_forward(sample, params, cfg, active=active)
    n_layers = len(diag.masks)
    minima = []
    for li, M in enumerate(diag.masks, start=1):
        write_mask_csv(M, out / f"mask_layer{li}.csv")
        write_pgm(mask_to_gray(M, cfg.decay, n_layers), out / f"mask_layer{li}.pgm")
        minima.append(float(M.min()))
    with open(out / "tokens.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["text_token", "token_id"])
        for i, t in enumerate(sample.tokens):
            w.writerow([i, t])
    summary = {"active": active, "delta": cfg.delta, "decay": cfg.decay,
               "n_layers": n_layers, "layer_min": minima,
               "n_vision_tokens": int(diag.masks[0].shape[1])}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_export_attn(checkpoint, dataset, sample_id, out_dir):
    params, cfg, manifest, sample = _checkpoint_and_sample(checkpoint, dataset, sample_id)
    return export_attention(params, cfg, sample, out_dir, bool(manifest["shift_passed"]))


def export_saliency(params, sample, out_dir, top_k=2):
    """Saliency per source layer and hidden-unit maps for extreme weights."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"layers": {}, "hidden_maps": []}
    with ad.record(False):
        for k, pr in sorted(params.projectors.items()):
            x = ad.Tensor(sample.features[k].astype(pr.W1.dtype))
            sal = extract_patch_saliency(srproj(x, pr))
            with open(out / f"saliency_layer{k}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["patch", "saliency"])
                for i, v in enumerate(sal):
                    w.writerow([i, repr(float(v))])
            summary["layers"][str(k)] = {"entropy": saliency_entropy(sal),
                                         "saliency": [float(v) for v in sal]}
            lam = pr.lam.data
            order = np.argsort(lam, kind="stable")
            top = [int(d) for d in order[::-1][:top_k]]
            picks = top + [int(d) for d in order[:top_k] if d not in top]
            for dim in picks:
                vals, weight = hidden_activation_map(x, pr, int(dim))
                name = f"hidden_layer{k}_dim{int(dim)}_lam{weight:.4f}.csv"
                with open(out / name, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["patch", "activation"])
                    for i, v in enumerate(vals):
                        w.writerow([i, repr(float(v))])
                summary["hidden_maps"].append({"layer": k, "dim": int(dim), "lam": weight,
                                               "file": name})
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_export_saliency(checkpoint, dataset, sample_id, out_dir, top_k=2):
    params, _, _, sample = _checkpoint_and_sample(checkpoint, dataset, sample_id)
    return export_saliency(params, sample, out_dir, top_k)
