"""Conditional denoiser: gene tokenization, embedders, transformer blocks
with adaptive-norm (shift/scale/gate) modulation, and the per-token head.

The network maps a noisy log-count vector, a timestep, and a condition
embedding to a predicted noise vector of the same gene dimension. Gates
of every modulated sub-block and the final head linear start at exactly
zero, so a fresh model is the zero function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import PanelError, ParameterError, ShapeError
from .numerics import RngStream, Tensor


@dataclass(frozen=True)
class ModelConfig:
    C: int
    D: int
    depth: int
    heads: int
    cond_dim: int
    time_dim: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("C", "D", "heads", "cond_dim", "time_dim", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"ModelConfig.{name} must be positive")
        if self.depth < 0:
            raise ParameterError("ModelConfig.depth must be >= 0")
        if self.D % self.heads != 0:
            raise ParameterError(f"D={self.D} not divisible by heads={self.heads}")
        if self.time_dim % 2 != 0:
            raise ParameterError("time_dim must be even")


@dataclass(frozen=True)
class GenePanel:
    """Fixed, ordered gene-name list; token i <-> gene i permanently."""

    names: tuple
    kind: str = "custom"  # hmhvg | hvg | custom

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise PanelError("gene names in a panel must be unique")

    def __len__(self):
        return len(self.names)


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def paths(self):
        return list(self.tensors.keys())

    def astype(self, dtype) -> "ModelParameters":
        out = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
               for k, v in self.tensors.items()}
        return ModelParameters(self.config, out)

    def copy_values(self) -> dict:
        return {k: v.data.copy() for k, v in self.tensors.items()}


def truncated_normal(shape, std: float, rng: RngStream, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std, by deterministic resampling."""
    out = rng.standard_normal(shape, dtype=np.float64) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()), dtype=np.float64) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_parameters(config: ModelConfig, rng: RngStream, dtype=np.float32) -> ModelParameters:
    """Zero modulation outputs and head; truncated-normal(0.02) elsewhere."""
    C, D = config.C, config.D
    std = 0.02
    t = {}

    def tn(shape):
        return Tensor(truncated_normal(shape, std, rng, dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    t["count_mlp.w1"] = tn((1, D))
    t["count_mlp.b1"] = zeros((D,))
    t["count_mlp.w2"] = tn((D, D))
    t["count_mlp.b2"] = zeros((D,))
    t["type_embedding"] = Tensor(
        rng.standard_normal((C, D), dtype=np.float64).astype(dtype) * std,
        requires_grad=True,
    )
    t["time_mlp.w1"] = tn((config.time_dim, D))
    t["time_mlp.b1"] = zeros((D,))
    t["time_mlp.w2"] = tn((D, D))
    t["time_mlp.b2"] = zeros((D,))
    t["cond_mlp.w1"] = tn((config.cond_dim, D))
    t["cond_mlp.b1"] = zeros((D,))
    t["cond_mlp.w2"] = tn((D, D))
    t["cond_mlp.b2"] = zeros((D,))
    hidden = config.mlp_ratio * D
    for i in range(config.depth):
        p = f"block{i}."
        t[p + "mod.w"] = zeros((D, 6 * D))
        t[p + "mod.b"] = zeros((6 * D,))
        t[p + "attn.wqkv"] = tn((D, 3 * D))
        t[p + "attn.bqkv"] = zeros((3 * D,))
        t[p + "attn.wo"] = tn((D, D))
        t[p + "attn.bo"] = zeros((D,))
        t[p + "mlp.w1"] = tn((D, hidden))
        t[p + "mlp.b1"] = zeros((hidden,))
        t[p + "mlp.w2"] = tn((hidden, D))
        t[p + "mlp.b2"] = zeros((D,))
    t["head.mod.w"] = zeros((D, 2 * D))
    t["head.mod.b"] = zeros((2 * D,))
    t["head.linear.w"] = zeros((D, 1))
    t["head.linear.b"] = zeros((1,))
    return ModelParameters(config, t)


def _mlp2(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    h = nm.silu(nm.matmul(x, params[prefix + ".w1"]) + params[prefix + ".b1"])
    return nm.matmul(h, params[prefix + ".w2"]) + params[prefix + ".b2"]


def sinusoid_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos features: s_{2k} = sin(t w_k), s_{2k+1} = cos(t w_k)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = t[:, None] * omega[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out.astype(dtype)


def embed_time(t, params: ModelParameters, T: int | None = None) -> Tensor:
    """Sinusoid features of the timestep passed through a 2-layer SiLU MLP.

    t may be a single 1-based step or an array of them; output is (D,) or (B, D).
    """
    scalar = np.ndim(t) == 0
    tv = np.atleast_1d(np.asarray(t))
    if np.any(tv < 1) or (T is not None and np.any(tv > T)):
        raise ParameterError(f"timestep {t} outside 1..{T}")
    s = Tensor(sinusoid_embedding(tv, params.config.time_dim, params["time_mlp.w1"].dtype))
    out = _mlp2(s, params, "time_mlp")
    return nm.reshape(out, (params.config.D,)) if scalar else out


def embed_condition(e, params: ModelParameters) -> Tensor:
    """Condition embedding -> model hidden dimension via 2-layer SiLU MLP."""
    e = e if isinstance(e, Tensor) else Tensor(np.asarray(e), dtype=params["cond_mlp.w1"].dtype)
    if e.shape[-1] != params.config.cond_dim:
        raise PanelError(
            f"condition length {e.shape[-1]} != cond_dim {params.config.cond_dim}"
        )
    return _mlp2(e, params, "cond_mlp")


def embed_genes(x, params: ModelParameters) -> Tensor:
    """Per-token sum of the shared count MLP and the gene type embedding.

    x is (C,) or (B, C) of log counts; output (C, D) or (B, C, D).
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=params["count_mlp.w1"].dtype)
    if x.shape[-1] != params.config.C:
        raise PanelError(f"gene vector length {x.shape[-1]} != panel size {params.config.C}")
    xs = nm.expand_dims(x, -1)  # (..., C, 1)
    counts = _mlp2(xs, params, "count_mlp")  # (..., C, D)
    return counts + params["type_embedding"]


def _conditioning(t, e, params: ModelParameters, T=None) -> Tensor:
    """Summed time and condition embeddings, shaped (B, D)."""
    te = embed_time(np.atleast_1d(np.asarray(t)), params, T)
    ee = embed_condition(np.atleast_2d(np.asarray(e)) if not isinstance(e, Tensor) else e, params)
    return te + ee


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    # shift/scale are (B, D); x is (B, C, D)
    one = Tensor(np.ones((), dtype=x.dtype))
    return nm.mul(x, nm.expand_dims(one + scale_, -2)) + nm.expand_dims(shift, -2)


def _attention(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    B, C, D = x.shape
    H = params.config.heads
    dh = D // H
    qkv = nm.matmul(x, params[prefix + ".wqkv"]) + params[prefix + ".bqkv"]  # (B,C,3D)
    q = nm.narrow(qkv, 0, D, axis=-1)
    k = nm.narrow(qkv, D, D, axis=-1)
    v = nm.narrow(qkv, 2 * D, D, axis=-1)

    def heads(z):
        return nm.swapaxes(nm.reshape(z, (B, C, H, dh)), 1, 2)  # (B,H,C,dh)

    q, k, v = heads(q), heads(k), heads(v)
    scores = nm.scale(nm.matmul(q, nm.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    att = nm.softmax_rows(scores)
    out = nm.matmul(att, v)  # (B,H,C,dh)
    out = nm.reshape(nm.swapaxes(out, 1, 2), (B, C, D))
    return nm.matmul(out, params[prefix + ".wo"]) + params[prefix + ".bo"]


def denoise(tokens, t, e, params: ModelParameters, T: int | None = None) -> Tensor:
    """Predicted noise for embedded gene tokens.

    tokens: (C, D) or (B, C, D); t: step or (B,); e: (cond_dim,) or (B, cond_dim).
    Returns (C,) or (B, C) matching the input batching.
    """
    single = isinstance(tokens, Tensor) and len(tokens.shape) == 2 or (
        not isinstance(tokens, Tensor) and np.ndim(tokens) == 2
    )
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    if single:
        x = nm.expand_dims(x, 0)
    B, C, D = x.shape
    if C != params.config.C or D != params.config.D:
        raise ShapeError(f"tokens shape {(C, D)} != config {(params.config.C, params.config.D)}")

    c = _conditioning(t, e, params, T)  # (B, D)
    cmod = nm.silu(c)
    for i in range(params.config.depth):
        p = f"block{i}."
        mod = nm.matmul(cmod, params[p + "mod.w"]) + params[p + "mod.b"]  # (B, 6D)
        sh1 = nm.narrow(mod, 0, D)
        sc1 = nm.narrow(mod, D, D)
        g1 = nm.narrow(mod, 2 * D, D)
        sh2 = nm.narrow(mod, 3 * D, D)
        sc2 = nm.narrow(mod, 4 * D, D)
        g2 = nm.narrow(mod, 5 * D, D)
        h = _modulate(nm.layer_norm_rows(x), sh1, sc1)
        x = x + nm.mul(nm.expand_dims(g1, -2), _attention(h, params, p + "attn"))
        h = _modulate(nm.layer_norm_rows(x), sh2, sc2)
        x = x + nm.mul(nm.expand_dims(g2, -2), _mlp2(h, params, p + "mlp"))

    hmod = nm.matmul(cmod, params["head.mod.w"]) + params["head.mod.b"]  # (B, 2D)
    hsh = nm.narrow(hmod, 0, D)
    hsc = nm.narrow(hmod, D, D)
    x = _modulate(nm.layer_norm_rows(x), hsh, hsc)
    out = nm.matmul(x, params["head.linear.w"]) + params["head.linear.b"]  # (B, C, 1)
    out = nm.reshape(out, (B, C))
    return nm.reshape(out, (C,)) if single else out


def predict_noise(params: ModelParameters, x, t, e, T: int | None = None) -> Tensor:
    """Full forward pass from log-count vectors: embed genes then denoise."""
    tokens = embed_genes(x, params)
    return denoise(tokens, t, e, params, T)
