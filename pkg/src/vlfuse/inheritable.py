"""SiLU cross-attention with a layer-inherited suppression mask.

Text tokens query projected vision tokens: ``Q = Xt``, ``K = Xv + P1``,
``V = Xv + P2`` and ``alpha = SiLU(Q K^T)`` (no softmax, no 1/sqrt(d)).
A per-sample mask ``M`` starts as all ones before the first LM layer.  In
every layer, once active, the ``floor(delta * N_v)`` smallest scores of each
text row get their mask entry multiplied by ``decay``, and the layer output
is ``(M * alpha) @ V``.  The current layer's scores feed the update before
the multiply, so suppression takes effect in the same layer.

``M`` is a constant to autodiff.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class CrossAttnParams:
    P1: Tensor
    P2: Tensor

    @classmethod
    def init(cls, n_v, d2, rng: np.random.Generator, layer=0, dtype=np.float32, std=0.1):
        return cls(ad.parameter(rng.normal(0, std, (n_v, d2)), f"layer{layer}.P1", dtype),
                   ad.parameter(rng.normal(0, std, (n_v, d2)), f"layer{layer}.P2", dtype))

    def parameters(self):
        return [self.P1, self.P2]


@dataclass
class InheritableState:
    M: np.ndarray
    delta: float
    decay: float
    active: bool

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")

    @property
    def n_decayed_per_row(self) -> int:
        return math.floor(self.delta * self.M.shape[1])

    def sparsity(self) -> float:
        """Fraction of mask entries strictly below one."""
        return float(np.mean(self.M < 1.0))


def reset_state(n_t, n_v, delta, decay, active, dtype=np.float64) -> InheritableState:
    if n_t <= 0 or n_v <= 0:
        raise ValueError("mask extents must be positive")
    return InheritableState(np.ones((n_t, n_v), dtype=dtype), delta, decay, bool(active))


def form_qkv(xt, xv, p: CrossAttnParams):
    xt, xv = ad.as_tensor(xt), ad.as_tensor(xv)
    if xt.shape[1] != xv.shape[1]:
        raise DimensionError(f"text width {xt.shape[1]} != vision width {xv.shape[1]}")
    if p.P1.shape != xv.shape or p.P2.shape != xv.shape:
        raise DimensionError(f"positional tables {p.P1.shape} must match vision tokens {xv.shape}")
    return xt, ad.add(xv, p.P1), ad.add(xv, p.P2)


def attention_scores(q, k) -> Tensor:
    q, k = ad.as_tensor(q), ad.as_tensor(k)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    return ad.silu(ad.matmul(q, ad.transpose(k)))


def lowest_per_row(alpha: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row; ties go to the lower index."""
    return np.argsort(alpha, axis=1, kind="stable")[:, :k]


def update_mask(state: InheritableState, alpha) -> InheritableState:
    a = np.asarray(getattr(alpha, "data", alpha))
    if a.shape != state.M.shape:
        raise DimensionError(f"scores {a.shape} do not match mask {state.M.shape}")
    if not state.active:
        return state
    k = state.n_decayed_per_row
    if k == 0:
        return state
    cols = lowest_per_row(a, k)
    rows = np.arange(a.shape[0])[:, None]
    state.M[rows, cols] = state.M[rows, cols] * state.M.dtype.type(state.decay)
    return state


def fused_attention(alpha, state: InheritableState | None, v) -> Tensor:
    """``(M * alpha) @ V``; ``state=None`` gives the unmasked ``alpha @ V``."""
    alpha, v = ad.as_tensor(alpha), ad.as_tensor(v)
    if alpha.shape[1] != v.shape[0]:
        raise DimensionError(f"scores {alpha.shape} cannot weight values {v.shape}")
    if state is None:
        return ad.matmul(alpha, v)
    return ad.matmul(ad.hadamard(alpha, state.M.astype(alpha.dtype)), v)


def mask_lattice(decay: float, depth: int, dtype=np.float64) -> np.ndarray:
    """The values ``decay**j`` for ``j = 0..depth`` as produced by repeated multiplies."""
    vals = [dtype(1.0)]
    for _ in range(depth):
        vals.append(vals[-1] * dtype(decay))
    return np.array(vals, dtype=dtype)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_mask_csv(M: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["text_token"] + [f"v{j}" for j in range(M.shape[1])])
        for i, row in enumerate(M):
            w.writerow([i] + [repr(float(x)) for x in row])


def mask_to_gray(M: np.ndarray, decay: float, n_layers: int) -> np.ndarray:
    """Map mask values to 0..255 with ``decay**n_layers`` at 0 and 1 at 255."""
    floor_val = decay ** n_layers
    if floor_val >= 1.0:
        return np.full(M.shape, 255, dtype=np.uint8)
    g = np.round(255.0 * (np.asarray(M, dtype=np.float64) - floor_val) / (1.0 - floor_val))
    return np.clip(g, 0, 255).astype(np.uint8)


def write_pgm(gray: np.ndarray, path) -> None:
    """Binary (P5) 8-bit PGM, rows = text tokens, columns = vision tokens."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
