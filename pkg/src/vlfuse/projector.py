"""Vision-to-language projectors and multilevel fusion.

``proj_baseline`` is the usual reduce -> SiLU -> lift adapter with a fixed
scalar.  ``srproj`` inserts a learnable per-hidden-unit weight vector between
the activation and the lifting matrix, so hidden column ``j`` is multiplied by
``lam[j]`` before ``W2``.  One projector is trained per selected encoder layer
and their outputs are combined by ``fuse_multilevel``.

The global scale ``s`` is applied once, after fusion.  With ``lam`` at its
all-ones initialisation this reproduces the scaled baseline exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

FUSION_MODES = ("average", "weighted-average", "add", "concat")


@dataclass
class SRProjParams:
    W1: Tensor
    lam: Tensor
    W2: Tensor
    source_layer: int

    def __post_init__(self):
        d1, dh = self.W1.shape
        if self.lam.shape != (dh,):
            raise DimensionError(f"lam must have length {dh}, got {self.lam.shape}")
        if self.W2.shape[0] != dh:
            raise DimensionError(f"W2 rows {self.W2.shape[0]} != hidden width {dh}")
        if dh >= min(d1, self.W2.shape[1]):
            raise ValueError(f"hidden width {dh} must be below min(d1, d2)={min(d1, self.W2.shape[1])}")

    @classmethod
    def init(cls, d1, dh, d2, source_layer, rng: np.random.Generator, dtype=np.float32):
        """Uniform(+-sqrt(6/d1)) reduction, unit diagonal, zero lifting."""
        bound = math.sqrt(6.0 / d1)
        tag = f"proj{source_layer}"
        return cls(ad.parameter(rng.uniform(-bound, bound, (d1, dh)), f"{tag}.W1", dtype),
                   ad.parameter(np.ones(dh), f"{tag}.lam", dtype),
                   ad.parameter(np.zeros((dh, d2)), f"{tag}.W2", dtype),
                   source_layer)

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def parameters(self):
        return [self.W1, self.lam, self.W2]


def _check_input(xv: Tensor, p: SRProjParams):
    if xv.data.ndim != 2 or xv.shape[1] != p.W1.shape[0]:
        raise DimensionError(f"features {xv.shape} do not match W1 {p.W1.shape}")


def proj_baseline(xv, p: SRProjParams, scale: float) -> Tensor:
    """``scale * SiLU(xv @ W1) @ W2``; ``p.lam`` is ignored."""
    xv = ad.as_tensor(xv)
    _check_input(xv, p)
    return ad.scale(ad.matmul(ad.silu(ad.matmul(xv, p.W1)), p.W2), scale)


def srproj(xv, p: SRProjParams) -> Tensor:
    xv = ad.as_tensor(xv)
    _check_input(xv, p)
    hidden = ad.silu(ad.matmul(xv, p.W1))
    return ad.matmul(ad.diag_scale_cols(hidden, p.lam), p.W2)


@dataclass
class FusionSpec:
    """How projected layers are combined.

    ``sources`` lists encoder layer indices, final layer first; weights follow
    the same order.  ``scale`` is the global fusion scale.
    """

    sources: list
    mode: str = "average"
    weights: list | None = None
    scale: float = 0.1

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if not self.sources:
            raise ValueError("fusion needs at least one source layer")
        if self.mode == "weighted-average":
            if self.weights is None or len(self.weights) != len(self.sources):
                raise ValueError("weighted-average needs one weight per source")
            w = np.asarray(self.weights, dtype=np.float64)
            if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        elif self.weights is not None:
            raise ValueError(f"weights only apply to weighted-average, not {self.mode!r}")

    def layer_weights(self) -> list:
        n = len(self.sources)
        if self.mode == "average":
            return [1.0 / n] * n
        if self.mode == "weighted-average":
            return [float(w) for w in self.weights]
        return [1.0] * n

    def token_count(self, n_patches: int) -> int:
        return n_patches * len(self.sources) if self.mode == "concat" else n_patches


def fuse_multilevel(features, projectors: dict, spec: FusionSpec) -> Tensor:
    """Project each source layer with its own projector and combine.

    ``projectors`` maps source-layer index to ``SRProjParams``.  Concat stacks
    the projections along the token axis in ``spec.sources`` order.
    """
    outs = []
    for k in spec.sources:
        if k not in projectors:
            raise KeyError(f"no projector for source layer {k}")
        if k not in features.layers:
            raise KeyError(f"features have no layer {k} (have {sorted(features.layers)})")
        x = features.layers[k]
        x = ad.Tensor(x.astype(projectors[k].W1.dtype, copy=False))
        outs.append(srproj(x, projectors[k]))
    if spec.mode == "concat":
        fused = ad.concat_rows(outs) if len(outs) > 1 else outs[0]
    else:
        terms = [ad.scale(o, w) if w != 1.0 else o
                 for o, w in zip(outs, spec.layer_weights())]
        fused = terms[0]
        for t in terms[1:]:
            fused = ad.add(fused, t)
    return ad.scale(fused, spec.scale)


def hidden_activation_map(xv, p: SRProjParams, dim: int):
    """Column ``dim`` of ``SiLU(xv @ W1)`` per token, and that column's weight."""
    if not 0 <= dim < p.hidden:
        raise IndexError(f"hidden dim {dim} outside [0, {p.hidden})")
    xv = ad.as_tensor(xv)
    _check_input(xv, p)
    h = ad.silu(ad.matmul(xv, ad.Tensor(p.W1.data)))
    return h.data[:, dim].copy(), float(p.lam.data[dim])
