"""Single attention block: projections, rotary, feature maps, kernel,
modulation, and the output projection, with a full manual backward pass.

The block keeps the usual multi-head layout.  Queries and keys are rotated
by position, queries are scaled, then mapped through the kernel feature
maps; the kernel output is modulated by the raw values before the output
projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .feature_maps import (
    FeatureMapGrads,
    FeatureMapParams,
    RopeConfig,
    apply_rope,
    default_query_scale,
    init_feature_map,
    phi_backward,
    phi_forward,
    rope_backward,
)
from .kernel import HLAConfig, hla_backward, hla_forward
from .modulation import modulate, modulate_backward
from .streaming import causal_forward
from .tensor import check_dtype


@dataclass(frozen=True)
class BlockConfig:
    """Block-level shape parameters around an HLAConfig."""

    hla: HLAConfig
    heads: int
    rope_base: float = 10000.0
    scale: float | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise DimensionError(f"heads must be >= 1, got {self.heads}")
        if self.hla.head_dim % 2 != 0:
            raise DimensionError("head_dim must be even for rotary pairs")

    @property
    def model_dim(self) -> int:
        return self.heads * self.hla.head_dim

    @property
    def query_scale(self) -> float:
        if self.scale is not None:
            return self.scale
        return default_query_scale(self.hla.head_dim)

    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.hla.head_dim, base=self.rope_base)


@dataclass
class BlockParams:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    phi_q: FeatureMapParams
    phi_ks: list[FeatureMapParams]
    phi_v1: FeatureMapParams
    phi_v2: FeatureMapParams


@dataclass
class CoreGrads:
    """Gradients for everything upstream of the output projection."""

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    phi_q: FeatureMapGrads
    phi_ks: list[FeatureMapGrads]
    phi_v1: FeatureMapGrads
    phi_v2: FeatureMapGrads
    x: np.ndarray


@dataclass
class BlockGrads(CoreGrads):
    w_o: np.ndarray = field(default=None)
    b_o: np.ndarray = field(default=None)


def init_block_params(
    cfg: BlockConfig,
    *,
    rng: np.random.Generator,
    dtype=np.float64,
    phi_hidden: int | None = None,
) -> BlockParams:
    """Initialize projections and feature maps.

    Projection weights follow the same uniform +-1/sqrt(fan_in) rule as
    the feature maps.  Kernel-side maps keep the ReLU output; the two
    modulation maps use LayerNorm instead and no ReLU.  phi_hidden
    defaults to the head dim.
    """
    dt = np.dtype(dtype)
    m = cfg.model_dim
    d = cfg.hla.head_dim
    hidden = phi_hidden if phi_hidden is not None else d
    bound = 1.0 / np.sqrt(m)

    def proj():
        return rng.uniform(-bound, bound, size=(m, m)).astype(dt)

    def kernel_map():
        return init_feature_map(
            d, hidden, cfg.hla.d_phi, rng=rng, use_relu_output=True, dtype=dt
        )

    def value_map():
        return init_feature_map(
            d, hidden, d, rng=rng, use_relu_output=False, use_layernorm=True, dtype=dt
        )

    return BlockParams(
        w_q=proj(), b_q=np.zeros(m, dtype=dt),
        w_k=proj(), b_k=np.zeros(m, dtype=dt),
        w_v=proj(), b_v=np.zeros(m, dtype=dt),
        w_o=proj(), b_o=np.zeros(m, dtype=dt),
        phi_q=kernel_map(),
        phi_ks=[kernel_map() for _ in range(cfg.hla.factors)],
        phi_v1=value_map(),
        phi_v2=value_map(),
    )


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[batch, n, heads*d] -> [batch, heads, n, d]."""
    b, n, m = x.shape
    if m % heads != 0:
        raise DimensionError(f"model dim {m} not divisible by {heads} heads")
    return np.ascontiguousarray(x.reshape(b, n, heads, m // heads).transpose(0, 2, 1, 3))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """[batch, heads, n, d] -> [batch, n, heads*d]."""
    b, h, n, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, h * d)


def _check_block_input(x: np.ndarray, cfg: BlockConfig) -> None:
    if x.ndim != 3:
        raise DimensionError(f"x must be [batch, n, model_dim], got {x.shape}")
    if x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"model dim {x.shape[-1]} != {cfg.model_dim}")


def project_qkv(x: np.ndarray, params: BlockParams, cfg: BlockConfig):
    """Projected, head-split, position-rotated q/k and head-split v."""
    _check_block_input(x, cfg)
    check_dtype(x, params.w_q)
    rope = cfg.rope()
    q = split_heads(x @ params.w_q + params.b_q, cfg.heads)
    k = split_heads(x @ params.w_k + params.b_k, cfg.heads)
    vh = split_heads(x @ params.w_v + params.b_v, cfg.heads)
    return apply_rope(q, rope), apply_rope(k, rope), vh


def core_from_projected(qh, kh, vh, params: BlockParams, cfg: BlockConfig):
    """Kernel plus modulation on already-projected operands.

    Returns (m, cache); cache holds the intermediates the backward pass
    reuses.
    """
    scale = qh.dtype.type(cfg.query_scale)
    q_scaled = qh * scale
    fq = phi_forward(params.phi_q, q_scaled)
    fks = [phi_forward(p, kh) for p in params.phi_ks]
    if cfg.hla.causal:
        t = causal_forward(cfg.hla, fq, fks, vh)
    else:
        t, _ = hla_forward(cfg.hla, fq, fks, vh)
    mod = modulate(t, vh, params.phi_v1, params.phi_v2)
    cache = {
        "q_scaled": q_scaled, "kh": kh, "vh": vh,
        "fq": fq, "fks": fks, "t": t,
    }
    return mod, cache


def core_backward_from_projected(cache, params: BlockParams, cfg: BlockConfig, grad_mod):
    """Backward of core_from_projected.

    Returns (phi grads dict, grad_qh, grad_kh, grad_vh) where the dict has
    keys phi_q, phi_ks, phi_v1, phi_v2.
    """
    if cfg.hla.causal:
        raise ValueError("backward covers the non-causal path only")
    mg = modulate_backward(
        cache["t"], cache["vh"], params.phi_v1, params.phi_v2, grad_mod
    )
    kg = hla_backward(cfg.hla, cache["fq"], cache["fks"], cache["vh"], mg.t)
    grad_vh = mg.v + kg.v
    phi_q_grads, g_q_scaled = phi_backward(params.phi_q, cache["q_scaled"], kg.phi_q_out)
    grad_kh = None
    phi_k_grads = []
    for p, g_fk in zip(params.phi_ks, kg.phi_k_outs):
        pg, g_kh = phi_backward(p, cache["kh"], g_fk)
        phi_k_grads.append(pg)
        grad_kh = g_kh if grad_kh is None else grad_kh + g_kh
    scale = g_q_scaled.dtype.type(cfg.query_scale)
    grad_qh = g_q_scaled * scale
    phi_grads = {
        "phi_q": phi_q_grads,
        "phi_ks": phi_k_grads,
        "phi_v1": mg.p1,
        "phi_v2": mg.p2,
    }
    return phi_grads, grad_qh, grad_kh, grad_vh


def hla_attention_block(x: np.ndarray, params: BlockParams, cfg: BlockConfig) -> np.ndarray:
    """Full block forward: x [batch, n, model_dim] -> same shape."""
    qh, kh, vh = project_qkv(x, params, cfg)
    mod, _ = core_from_projected(qh, kh, vh, params, cfg)
    return merge_heads(mod) @ params.w_o + params.b_o


def block_backward(
    x: np.ndarray, params: BlockParams, cfg: BlockConfig, grad_y: np.ndarray
) -> BlockGrads:
    """Gradients of the full block for every parameter and the input.

    Recomputes the forward intermediates; x and grad_y must match the
    shapes of the corresponding forward call.
    """
    x = np.asarray(x)
    grad_y = np.asarray(grad_y)
    _check_block_input(x, cfg)
    if grad_y.shape != x.shape:
        raise DimensionError(f"grad_y shape {grad_y.shape} != x shape {x.shape}")

    qh, kh, vh = project_qkv(x, params, cfg)
    mod, cache = core_from_projected(qh, kh, vh, params, cfg)
    merged = merge_heads(mod)

    flat_merged = merged.reshape(-1, cfg.model_dim)
    flat_gy = grad_y.reshape(-1, cfg.model_dim)
    g_w_o = flat_merged.T @ flat_gy
    g_b_o = np.sum(flat_gy, axis=0, dtype=grad_y.dtype)
    grad_merged = grad_y @ params.w_o.T
    grad_mod = split_heads(grad_merged, cfg.heads)

    phi_grads, g_qh, g_kh, g_vh = core_backward_from_projected(
        cache, params, cfg, grad_mod
    )

    rope = cfg.rope()
    g_q_proj = merge_heads(rope_backward(g_qh, rope))
    g_k_proj = merge_heads(rope_backward(g_kh, rope))
    g_v_proj = merge_heads(g_vh)

    flat_x = x.reshape(-1, cfg.model_dim)
    grads = {}
    grad_x = np.zeros_like(x)
    for name, g_proj, w in (
        ("q", g_q_proj, params.w_q),
        ("k", g_k_proj, params.w_k),
        ("v", g_v_proj, params.w_v),
    ):
        flat_g = g_proj.reshape(-1, cfg.model_dim)
        grads[f"w_{name}"] = flat_x.T @ flat_g
        grads[f"b_{name}"] = np.sum(flat_g, axis=0, dtype=x.dtype)
        grad_x += g_proj @ w.T

    return BlockGrads(
        w_q=grads["w_q"], b_q=grads["b_q"],
        w_k=grads["w_k"], b_k=grads["b_k"],
        w_v=grads["w_v"], b_v=grads["b_v"],
        w_o=g_w_o, b_o=g_b_o,
        phi_q=phi_grads["phi_q"],
        phi_ks=phi_grads["phi_ks"],
        phi_v1=phi_grads["phi_v1"],
        phi_v2=phi_grads["phi_v2"],
        x=grad_x,
    )
