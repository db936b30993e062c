"""A small pre-norm causal decoder with vision injected in every layer.

Per layer::

    Xt <- Xt + SelfAttn(LN(Xt))                       causal softmax, one head
    Q, K, V <- Xt, Xv + P1, Xv + P2
    alpha <- SiLU(Q K^T);  M <- decay lowest-delta of each row of alpha
    Xt <- (M * alpha) V + [Xt + FFN(LN(Xt))]

``Xv`` is the fused multilevel projection, computed once per sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .inheritable import (CrossAttnParams, attention_scores, form_qkv, fused_attention,
                          reset_state, update_mask)
from .projector import FusionSpec, SRProjParams, fuse_multilevel

# initial learning rate of the reference fine-tuning recipe (pretrained LM);
# the toy model trains from scratch with plain SGD and needs a larger step
FINETUNE_LR = 9e-3


@dataclass
class TrainConfig:
    # architecture
    vocab: int = 64
    d_model: int = 64
    n_layers: int = 4
    d1: int = 32
    n_patches: int = 16
    hidden: int = 16
    max_len: int = 8
    answer_vocab: list | None = None  # tokens greedy decoding may emit; None = all
    # fusion; sources default to (final, intermediate)
    final_layer: int = 24
    intermediate_layer: int = 12
    sources: list | None = None
    fusion_mode: str = "average"
    fusion_weights: list | None = None
    scale: float = 0.1
    # inheritable cross-attention
    delta: float = 0.3
    decay: float = 0.85
    shift_epoch: int = 14
    inheritable: bool = True  # False: plain SiLU cross-attention, no mask at all
    # optimisation
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.5  # plain SGD on a from-scratch toy; see FINETUNE_LR
    momentum: float = 0.0
    peft: bool = False
    seed: int = 0
    init_std: float = 0.5
    pos_std: float = 0.1  # P1/P2 init; near zero the cross-attention path starts dead

    def __post_init__(self):
        if not 0 <= self.shift_epoch <= self.epochs:
            raise ValueError(f"shift_epoch {self.shift_epoch} outside [0, {self.epochs}]")
        self.fusion_spec()  # validates mode/weights

    @property
    def source_layers(self) -> list:
        if self.sources is not None:
            return [int(k) for k in self.sources]
        if self.final_layer == self.intermediate_layer:
            return [self.final_layer]
        return [self.final_layer, self.intermediate_layer]

    def fusion_spec(self) -> FusionSpec:
        return FusionSpec(self.source_layers, self.fusion_mode, self.fusion_weights, self.scale)

    @property
    def n_vision_tokens(self) -> int:
        return self.fusion_spec().token_count(self.n_patches)

    def active_at(self, epoch: int) -> bool:
        """Epochs are 1-indexed; the mask rule runs from ``shift_epoch`` on."""
        return epoch >= self.shift_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class LayerParams:
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    Wq: ad.Tensor
    Wk: ad.Tensor
    Wv: ad.Tensor
    Wo: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    W_up: ad.Tensor
    b_up: ad.Tensor
    W_down: ad.Tensor
    b_down: ad.Tensor
    cross: CrossAttnParams

    def named(self, prefix):
        out = [(f"{prefix}.{f.name}", getattr(self, f.name))
               for f in fields(self) if f.name != "cross"]
        out += [(f"{prefix}.P1", self.cross.P1), (f"{prefix}.P2", self.cross.P2)]
        return out


@dataclass
class ModelParams:
    tok_emb: ad.Tensor
    pos_emb: ad.Tensor
    layers: list
    lnf_g: ad.Tensor
    lnf_b: ad.Tensor
    head: ad.Tensor
    projectors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: TrainConfig, seed: int | None = None, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d, ff = cfg.d_model, 4 * cfg.d_model

        def p(name, arr):
            return ad.parameter(arr, name, dtype)

        def lin(name, fan_in, fan_out):
            return p(name, rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out)))

        layers = []
        for i in range(cfg.n_layers):
            t = f"layer{i}"
            layers.append(LayerParams(
                p(f"{t}.ln1_g", np.ones(d)), p(f"{t}.ln1_b", np.zeros(d)),
                lin(f"{t}.Wq", d, d), lin(f"{t}.Wk", d, d),
                lin(f"{t}.Wv", d, d), lin(f"{t}.Wo", d, d),
                p(f"{t}.ln2_g", np.ones(d)), p(f"{t}.ln2_b", np.zeros(d)),
                lin(f"{t}.W_up", d, ff), p(f"{t}.b_up", np.zeros(ff)),
                lin(f"{t}.W_down", ff, d), p(f"{t}.b_down", np.zeros(d)),
                CrossAttnParams.init(cfg.n_vision_tokens, d, rng, i, dtype, cfg.pos_std)))
        projectors = {k: SRProjParams.init(cfg.d1, cfg.hidden, d, k, rng, dtype)
                      for k in cfg.source_layers}
        return cls(p("tok_emb", rng.normal(0, cfg.init_std, (cfg.vocab, d))),
                   p("pos_emb", rng.normal(0, cfg.init_std, (cfg.max_len, d))),
                   layers,
                   p("lnf_g", np.ones(d)), p("lnf_b", np.zeros(d)),
                   lin("head", d, cfg.vocab),
                   projectors)

    def named_parameters(self):
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += layer.named(f"layer{i}")
        out += [("lnf_g", self.lnf_g), ("lnf_b", self.lnf_b), ("head", self.head)]
        for k in sorted(self.projectors):
            pr = self.projectors[k]
            out += [(f"proj{k}.W1", pr.W1), (f"proj{k}.lam", pr.lam), (f"proj{k}.W2", pr.W2)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every tensor cast; names and trainable flags kept."""
        def c(t):
            out = ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
            return out

        layers = []
        for L in self.layers:
            kw = {f.name: c(getattr(L, f.name)) for f in fields(L) if f.name != "cross"}
            layers.append(LayerParams(**kw, cross=CrossAttnParams(c(L.cross.P1), c(L.cross.P2))))
        projectors = {k: SRProjParams(c(v.W1), c(v.lam), c(v.W2), v.source_layer)
                      for k, v in self.projectors.items()}
        return ModelParams(c(self.tok_emb), c(self.pos_emb), layers, c(self.lnf_g),
                           c(self.lnf_b), c(self.head), projectors)


def is_adapter_param(name: str) -> bool:
    """Parameters that train in PEFT mode: projectors and positional tables."""
    return name.startswith("proj") or name.endswith(".P1") or name.endswith(".P2")


def apply_trainable_split(params: ModelParams, peft: bool):
    for name, t in params.named_parameters():
        t.requires_grad = (not peft) or is_adapter_param(name)


@dataclass
class ForwardDiagnostics:
    masks: list = field(default_factory=list)      # M after each layer's update
    alpha_min: list = field(default_factory=list)
    alpha_max: list = field(default_factory=list)
    alpha_mean: list = field(default_factory=list)
    m_sparsity: float = 0.0


def _causal_mask(n, dtype):
    return np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)


def model_forward(sample, params: ModelParams, cfg: TrainConfig, epoch: int | None = None,
                  active: bool | None = None, tokens=None, mask_override=None,
                  baseline: bool | None = None):
    """Run one sample; returns ``(logits, ForwardDiagnostics)``.

    ``active`` defaults to ``cfg.active_at(epoch)`` (inactive when no epoch is
    given).  ``baseline`` skips the mask machinery entirely; it defaults to
    ``not cfg.inheritable``.  ``mask_override`` pins the mask used in each
    layer, for gradient checks with the rule switched on.
    """
    if active is None:
        active = epoch is not None and cfg.active_at(epoch)
    if baseline is None:
        baseline = not cfg.inheritable
    toks = np.asarray(sample.tokens if tokens is None else tokens, dtype=np.int64)
    n_t = len(toks)
    if n_t > params.pos_emb.shape[0]:
        raise ValueError(f"sequence of {n_t} tokens exceeds max_len {params.pos_emb.shape[0]}")
    dtype = params.dtype
    d = params.tok_emb.shape[1]

    x = ad.add(ad.embedding(params.tok_emb, toks), ad.embedding(params.pos_emb, np.arange(n_t)))
    xv = fuse_multilevel(sample.features, params.projectors, cfg.fusion_spec())
    state = reset_state(n_t, xv.shape[0], cfg.delta, cfg.decay, active, dtype=dtype)
    causal = _causal_mask(n_t, dtype)
    inv_sqrt_d = 1.0 / math.sqrt(d)
    diag = ForwardDiagnostics()

    for li, L in enumerate(params.layers):
        h = ad.layer_norm(x, L.ln1_g, L.ln1_b)
        q, k, v = ad.matmul(h, L.Wq), ad.matmul(h, L.Wk), ad.matmul(h, L.Wv)
        att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_d), causal)
        x = ad.add(x, ad.matmul(ad.matmul(att, v), L.Wo))

        Q, K, V = form_qkv(x, xv, L.cross)
        alpha = attention_scores(Q, K)
        if baseline:
            fused = fused_attention(alpha, None, V)
        else:
            if mask_override is not None:
                state.M[...] = mask_override[li]
            else:
                update_mask(state, alpha)
            fused = fused_attention(alpha, state, V)
        diag.masks.append(state.M.copy())
        diag.alpha_min.append(float(alpha.data.min()))
        diag.alpha_max.append(float(alpha.data.max()))
        diag.alpha_mean.append(float(alpha.data.mean()))

        h2 = ad.layer_norm(x, L.ln2_g, L.ln2_b)
        ffn = ad.add(ad.matmul(ad.silu(ad.add(ad.matmul(h2, L.W_up), L.b_up)), L.W_down), L.b_down)
        x = ad.add(fused, ad.add(x, ffn))

    logits = ad.matmul(ad.layer_norm(x, params.lnf_g, params.lnf_b), params.head)
    diag.m_sparsity = state.sparsity()
    return logits, diag
