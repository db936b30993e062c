"""Finite-difference gate over every operation and the tiny full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import SceneConfig, generate_synthetic_scene
from .inheritable import CrossAttnParams, attention_scores, form_qkv, fused_attention, reset_state, update_mask
from .model import ModelParams, TrainConfig, model_forward
from .projector import FusionSpec, SRProjParams, fuse_multilevel, proj_baseline, srproj

TOLERANCE = 1e-5
# central-difference step; at 1e-5 roundoff (~1e-16 * |loss| / step) already
# reaches 1e-5 relative on the smallest model gradients, 1e-4 keeps both
# roundoff and truncation near 1e-7
FD_STEP = 1e-4


@dataclass
class CheckLine:
    section: str
    name: str
    max_rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        return (f"{'PASS' if self.ok else 'FAIL'}  {self.section:<12} {self.name:<24} "
                f"max_rel_err={self.max_rel_error:.3e}")


def tiny_config(**kw) -> TrainConfig:
    base = dict(vocab=16, d_model=8, n_layers=2, d1=8, n_patches=4, hidden=4, max_len=8,
                final_layer=4, intermediate_layer=2, delta=0.3, decay=0.85,
                epochs=2, shift_epoch=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_scene() -> SceneConfig:
    return SceneConfig(n_patches=4, d1=8, n_concepts=4, n_relations=2, vocab=16,
                       encoder_depth=4, intermediate_layer_index=2)


def randomized_params(cfg: TrainConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Model params with every tensor perturbed off its structured init.

    Fresh init has W2 = 0 and unit diagonals, which would hide whole gradient
    paths; the checks want all of them live.
    """
    params = ModelParams.init(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, t in params.named_parameters():
        if name.endswith((".lam", "_g")):
            t.assign_(1.0 + 0.3 * rng.standard_normal(t.shape))
        elif name.endswith((".W2", ".P1", ".P2", "_b", "b_up", "b_down")):
            t.assign_(0.5 * rng.standard_normal(t.shape))
    return params


def _linear_probe(out: ad.Tensor, seed: int) -> ad.Tensor:
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_all(ad.hadamard(out, r))


def _p(rng, shape, name):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def op_checks(eps=FD_STEP, tol=TOLERANCE):
    """(name, closure, params) for each differentiable op in isolation."""
    rng = np.random.default_rng(7)
    cases = []

    a, b = _p(rng, (3, 4), "a"), _p(rng, (4, 2), "b")
    cases.append(("matmul", lambda: _linear_probe(ad.matmul(a, b), 1), [a, b]))
    t = _p(rng, (3, 4), "x")
    cases.append(("transpose", lambda: _linear_probe(ad.transpose(t), 2), [t]))
    x, rv = _p(rng, (3, 4), "x"), _p(rng, (4,), "row")
    cases.append(("add_rowvec", lambda: _linear_probe(ad.add(x, rv), 3), [x, rv]))
    h1, h2 = _p(rng, (3, 4), "a"), _p(rng, (3, 4), "b")
    cases.append(("hadamard", lambda: _linear_probe(ad.hadamard(h1, h2), 4), [h1, h2]))
    hm, mask = _p(rng, (3, 4), "a"), rng.uniform(0.5, 1.0, (3, 4))
    cases.append(("hadamard_mask", lambda: _linear_probe(ad.hadamard(hm, mask), 5), [hm]))
    s = _p(rng, (3, 4), "x")
    cases.append(("silu", lambda: _linear_probe(ad.silu(s), 6), [s]))
    sm = _p(rng, (4, 4), "x")
    causal = np.triu(np.full((4, 4), -np.inf), 1)
    cases.append(("softmax_rows", lambda: _linear_probe(ad.softmax_rows(sm, causal), 7), [sm]))
    ln, g, bb = _p(rng, (3, 5), "x"), _p(rng, (5,), "gain"), _p(rng, (5,), "bias")
    cases.append(("layer_norm", lambda: _linear_probe(ad.layer_norm(ln, g, bb), 8), [ln, g, bb]))
    tab = _p(rng, (6, 3), "table")
    cases.append(("embedding", lambda: _linear_probe(ad.embedding(tab, [1, 4, 1, 0]), 9), [tab]))
    c1, c2 = _p(rng, (2, 3), "a"), _p(rng, (3, 3), "b")
    cases.append(("concat_rows", lambda: _linear_probe(ad.concat_rows([c1, c2]), 10), [c1, c2]))
    dx, dv = _p(rng, (3, 4), "x"), _p(rng, (4,), "diag")
    cases.append(("diag_scale_cols", lambda: _linear_probe(ad.diag_scale_cols(dx, dv), 11), [dx, dv]))
    ce = _p(rng, (4, 6), "logits")
    cases.append(("cross_entropy", lambda: ad.cross_entropy(ce, [2, 5], [1, 3]), [ce]))

    def proj(k):
        pr = SRProjParams(_p(rng, (6, 3), f"proj{k}.W1"),
                          ad.Tensor(1 + 0.3 * rng.standard_normal(3), requires_grad=True,
                                    name=f"proj{k}.lam"),
                          _p(rng, (3, 5), f"proj{k}.W2"), k)
        return pr

    xv = rng.standard_normal((4, 6))
    p0 = proj(0)
    cases.append(("proj_baseline", lambda: _linear_probe(proj_baseline(xv, p0, 0.1), 12),
                  [p0.W1, p0.W2]))
    cases.append(("srproj", lambda: _linear_probe(srproj(xv, p0), 13), p0.parameters()))

    from .features import MultilevelFeatures
    feats = MultilevelFeatures({2: rng.standard_normal((4, 6)), 4: rng.standard_normal((4, 6))})
    projs = {4: proj(4), 2: proj(2)}
    fparams = projs[4].parameters() + projs[2].parameters()
    for mode, w in (("average", None), ("weighted-average", [0.9, 0.1]), ("add", None),
                    ("concat", None)):
        spec = FusionSpec([4, 2], mode, w, 0.1)
        cases.append((f"fuse[{mode}]",
                      lambda spec=spec: _linear_probe(fuse_multilevel(feats, projs, spec), 14),
                      fparams))

    xt, xvv = _p(rng, (3, 5), "Xt"), _p(rng, (4, 5), "Xv")
    cp = CrossAttnParams(_p(rng, (4, 5), "P1"), _p(rng, (4, 5), "P2"))
    state = reset_state(3, 4, 0.3, 0.85, True)
    with ad.record(False):
        q, k, _ = form_qkv(xt, xvv, cp)
        update_mask(state, attention_scores(q, k))

    def cross():
        q, k, v = form_qkv(xt, xvv, cp)
        return _linear_probe(fused_attention(attention_scores(q, k), state, v), 15)

    cases.append(("cross_attention", cross, [xt, xvv, cp.P1, cp.P2]))

    lines = []
    for name, fn, params in cases:
        rep = ad.finite_diff_check(fn, params, eps)
        lines.append(CheckLine("op", name, rep.max_rel_error, tol))
    return lines


def model_checks(eps=FD_STEP, tol=TOLERANCE, seed=0):
    """Per-parameter check of the tiny model, mask off and mask on (held fixed)."""
    cfg = tiny_config()
    params = randomized_params(cfg, seed)
    sample = generate_synthetic_scene(seed + 11, tiny_scene())
    named = params.named_parameters()
    lines = []

    def loss_inactive():
        logits, _ = model_forward(sample, params, cfg, active=False)
        return ad.cross_entropy(logits, sample.answer, sample.answer_positions)

    with ad.record(False):
        _, diag = model_forward(sample, params, cfg, active=True)
    frozen = [m.copy() for m in diag.masks]

    def loss_active():
        logits, _ = model_forward(sample, params, cfg, active=True, mask_override=frozen)
        return ad.cross_entropy(logits, sample.answer, sample.answer_positions)

    for section, fn in (("model", loss_inactive), ("model+mask", loss_active)):
        rep = ad.finite_diff_check(fn, [t for _, t in named], eps)
        for name, _ in named:
            lines.append(CheckLine(section, name, rep.per_param[name], tol))
    return lines


def run_gradcheck(eps=FD_STEP, tol=TOLERANCE):
    return op_checks(eps, tol) + model_checks(eps, tol)
