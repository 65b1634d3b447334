"""Learnable feature maps, rotary embedding, and query scaling.

A feature map is a two-layer MLP with exact (erf-based) GELU in the middle,
optional LayerNorm on the output, and an optional final ReLU.  Kernel-side
maps keep the ReLU so their outputs are non-negative; value-side maps must
drop it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import DimensionError, PrecisionError
from .tensor import check_dtype, load_tensor, save_tensor

LN_EPS_DEFAULT = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class FeatureMapParams:
    """Weights of one feature map.

    w1: [d_in, d_hidden], b1: [d_hidden], w2: [d_hidden, d_out], b2: [d_out].
    ln_gamma/ln_beta are present exactly when use_layernorm is set.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    use_relu_output: bool = True
    use_layernorm: bool = False
    ln_gamma: np.ndarray | None = None
    ln_beta: np.ndarray | None = None
    ln_eps: float = LN_EPS_DEFAULT

    def __post_init__(self):
        arrays = [self.w1, self.b1, self.w2, self.b2]
        if self.use_layernorm:
            if self.ln_gamma is None or self.ln_beta is None:
                raise DimensionError("layernorm enabled but ln_gamma/ln_beta missing")
            arrays += [self.ln_gamma, self.ln_beta]
        elif self.ln_gamma is not None or self.ln_beta is not None:
            raise DimensionError("ln_gamma/ln_beta given but layernorm disabled")
        check_dtype(*arrays)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise DimensionError("w1 and w2 must be matrices")
        if self.b1.shape != (self.w1.shape[1],):
            raise DimensionError(f"b1 shape {self.b1.shape} != ({self.w1.shape[1]},)")
        if self.w2.shape[0] != self.w1.shape[1]:
            raise DimensionError("w2 rows must equal w1 cols")
        if self.b2.shape != (self.w2.shape[1],):
            raise DimensionError(f"b2 shape {self.b2.shape} != ({self.w2.shape[1]},)")
        if self.use_layernorm:
            if self.ln_gamma.shape != (self.d_out,) or self.ln_beta.shape != (self.d_out,):
                raise DimensionError("layernorm params must match output width")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]


@dataclass
class FeatureMapGrads:
    """Parameter gradients mirroring FeatureMapParams array fields."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln_gamma: np.ndarray | None = None
    ln_beta: np.ndarray | None = None


def init_feature_map(
    d_in: int,
    d_hidden: int,
    d_out: int,
    *,
    rng: np.random.Generator,
    use_relu_output: bool = True,
    use_layernorm: bool = False,
    dtype=np.float64,
) -> FeatureMapParams:
    """Draw weights uniformly in +-1/sqrt(fan_in); biases start at zero."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise PrecisionError(f"unsupported dtype {dt}")
    bound1 = 1.0 / np.sqrt(d_in)
    bound2 = 1.0 / np.sqrt(d_hidden)
    w1 = rng.uniform(-bound1, bound1, size=(d_in, d_hidden)).astype(dt)
    w2 = rng.uniform(-bound2, bound2, size=(d_hidden, d_out)).astype(dt)
    return FeatureMapParams(
        w1=w1,
        b1=np.zeros(d_hidden, dtype=dt),
        w2=w2,
        b2=np.zeros(d_out, dtype=dt),
        use_relu_output=use_relu_output,
        use_layernorm=use_layernorm,
        ln_gamma=np.ones(d_out, dtype=dt) if use_layernorm else None,
        ln_beta=np.zeros(d_out, dtype=dt) if use_layernorm else None,
    )


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact GELU: Phi(x) + x * pdf(x)."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def _layernorm_forward(u: np.ndarray, p: FeatureMapParams):
    mean = u.mean(axis=-1, keepdims=True)
    centered = u - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.ln_eps)
    xhat = centered * inv_std
    return p.ln_gamma * xhat + p.ln_beta, xhat, inv_std


def phi_forward(p: FeatureMapParams, x: np.ndarray) -> np.ndarray:
    """Apply the feature map along the trailing axis of x [..., d_in]."""
    x = np.asarray(x)
    check_dtype(x, p.w1)
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"input width {x.shape[-1]} != d_in {p.d_in}")
    h = gelu(x @ p.w1 + p.b1)
    u = h @ p.w2 + p.b2
    if p.use_layernorm:
        u, _, _ = _layernorm_forward(u, p)
    if p.use_relu_output:
        u = np.maximum(u, 0.0)
    return u.astype(x.dtype, copy=False)


def phi_backward(
    p: FeatureMapParams, x: np.ndarray, grad_out: np.ndarray
) -> tuple[FeatureMapGrads, np.ndarray]:
    """Gradients of phi_forward for parameters and input.

    Recomputes the forward pass internally; x and grad_out must have the
    shapes used in the corresponding forward call.
    """
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    check_dtype(x, grad_out, p.w1)
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != p.d_out:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} incompatible with x {x.shape}"
        )
    a = x @ p.w1 + p.b1
    h = gelu(a)
    u = h @ p.w2 + p.b2

    g = grad_out
    grad_ln_gamma = None
    grad_ln_beta = None
    if p.use_layernorm:
        y_ln, xhat, inv_std = _layernorm_forward(u, p)
        z = np.maximum(y_ln, 0.0) if p.use_relu_output else y_ln
        if p.use_relu_output:
            g = g * (z > 0)
        lead_axes = tuple(range(g.ndim - 1))
        grad_ln_gamma = np.sum(g * xhat, axis=lead_axes, dtype=g.dtype)
        grad_ln_beta = np.sum(g, axis=lead_axes, dtype=g.dtype)
        dxhat = g * p.ln_gamma
        # standard layernorm backward over the trailing axis
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        g = inv_std * (dxhat - m1 - xhat * m2)
    elif p.use_relu_output:
        g = g * (u > 0)

    flat_h = h.reshape(-1, p.d_hidden)
    flat_g = g.reshape(-1, p.d_out)
    grad_w2 = flat_h.T @ flat_g
    grad_b2 = np.sum(flat_g, axis=0, dtype=g.dtype)
    gh = g @ p.w2.T
    ga = gh * gelu_grad(a)
    flat_x = x.reshape(-1, p.d_in)
    flat_ga = ga.reshape(-1, p.d_hidden)
    grad_w1 = flat_x.T @ flat_ga
    grad_b1 = np.sum(flat_ga, axis=0, dtype=g.dtype)
    grad_x = ga @ p.w1.T

    grads = FeatureMapGrads(
        w1=grad_w1.astype(x.dtype, copy=False),
        b1=grad_b1,
        w2=grad_w2.astype(x.dtype, copy=False),
        b2=grad_b2,
        ln_gamma=grad_ln_gamma,
        ln_beta=grad_ln_beta,
    )
    return grads, grad_x.astype(x.dtype, copy=False)


@dataclass
class RopeConfig:
    """Rotary embedding over interleaved channel pairs.

    Pair i is channels (2i, 2i+1); its angle at position p is
    p * base**(-2i / head_dim).  positions defaults to 0..N-1.
    """

    head_dim: int
    base: float = 10000.0
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise DimensionError(f"head_dim must be positive even, got {self.head_dim}")
        if self.base <= 1:
            raise ValueError("base must be > 1")


def _rope_angles(cfg: RopeConfig, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    if cfg.positions is None:
        pos = np.arange(n, dtype=np.float64)
    else:
        pos = np.asarray(cfg.positions, dtype=np.float64)
        if pos.shape != (n,):
            raise DimensionError(f"positions shape {pos.shape} != ({n},)")
    i = np.arange(cfg.head_dim // 2, dtype=np.float64)
    freqs = cfg.base ** (-2.0 * i / cfg.head_dim)
    theta = pos[:, None] * freqs
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def _rope_rotate(x: np.ndarray, cfg: RopeConfig, sign: float) -> np.ndarray:
    x = np.asarray(x)
    check_dtype(x)
    if x.ndim < 2:
        raise DimensionError("expected [..., n, head_dim]")
    if x.shape[-1] != cfg.head_dim:
        raise DimensionError(f"trailing axis {x.shape[-1]} != head_dim {cfg.head_dim}")
    cos, sin = _rope_angles(cfg, x.shape[-2], x.dtype)
    sin = sign * sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotate each interleaved channel pair by its position angle."""
    return _rope_rotate(x, cfg, 1.0)


def rope_backward(grad_out: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Adjoint of apply_rope: the inverse rotation (angle negated)."""
    return _rope_rotate(grad_out, cfg, -1.0)


def default_query_scale(head_dim: int) -> float:
    return 1.0 / float(np.sqrt(head_dim))


def scale_queries(q: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Multiply queries by a scalar, 1/sqrt(head_dim) when unspecified."""
    q = np.asarray(q)
    check_dtype(q)
    if scale is None:
        scale = default_query_scale(q.shape[-1])
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be finite and positive, got {scale}")
    return (q * q.dtype.type(scale)).astype(q.dtype, copy=False)


_BUNDLE_MANIFEST = "manifest.json"
_ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "ln_gamma", "ln_beta")


def save_weight_bundle(path: str | os.PathLike, maps: dict[str, FeatureMapParams]) -> None:
    """Write named feature maps as a manifest plus one file per array."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": 1, "maps": {}}
    for name, p in maps.items():
        entry = {
            "use_relu_output": p.use_relu_output,
            "use_layernorm": p.use_layernorm,
            "ln_eps": p.ln_eps,
            "arrays": {},
        }
        for field in _ARRAY_FIELDS:
            arr = getattr(p, field)
            if arr is None:
                continue
            fname = f"{name}.{field}.bin"
            save_tensor(root / fname, arr)
            entry["arrays"][field] = fname
        manifest["maps"][name] = entry
    with open(root / _BUNDLE_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_weight_bundle(path: str | os.PathLike) -> dict[str, FeatureMapParams]:
    """Read a bundle written by save_weight_bundle."""
    root = Path(path)
    with open(root / _BUNDLE_MANIFEST) as f:
        manifest = json.load(f)
    if manifest.get("format") != 1:
        raise ValueError(f"unknown bundle format {manifest.get('format')!r}")
    maps: dict[str, FeatureMapParams] = {}
    for name, entry in manifest["maps"].items():
        arrays = {
            field: load_tensor(root / fname)
            for field, fname in entry["arrays"].items()
        }
        maps[name] = FeatureMapParams(
            w1=arrays["w1"],
            b1=arrays["b1"],
            w2=arrays["w2"],
            b2=arrays["b2"],
            use_relu_output=entry["use_relu_output"],
            use_layernorm=entry["use_layernorm"],
            ln_gamma=arrays.get("ln_gamma"),
            ln_beta=arrays.get("ln_beta"),
            ln_eps=entry["ln_eps"],
        )
    return maps
