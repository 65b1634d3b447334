"""F-factor linear attention kernel.

The score matrix

    A = (phi_q Q' phi_k1 K') * ... * (phi_q Q' phi_kF K')   (elementwise)

is never materialized.  Each query row is expanded into the F-fold outer
product of its feature vector with itself, each key row into the outer
product of its F distinct feature vectors; both are flattened to width
D = d_phi**F.  A context matrix C = T_k^T V of shape [D, head_dim] and a
key-sum vector z of width D then give

    out_i = T_q[i] C / (T_q[i] . z + eps)

in time linear in the token count.  Contractions use einsum with
optimize=False so the accumulation order is a fixed function of the
operand shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, MemoryCapError
from .tensor import check_dtype, check_memory_cap, memory_cap_bytes

EPS_DEFAULT = 1e-6
MAX_FACTORS = 8

# index letters for per-factor axes in dynamically built einsum subscripts;
# b, h, n, z are reserved
_FACTOR_AXES = "acdefgik"


@dataclass(frozen=True)
class HLAConfig:
    """Kernel shape and behaviour parameters.

    factors is F, the number of key feature maps; d_phi is the width of
    each feature vector; head_dim is the value/output width.  eps keeps
    row normalization finite and may be zero only when every phi output
    is strictly positive.  decay weights past positions in the causal
    path; the non-causal path requires decay == 1.
    """

    factors: int
    d_phi: int
    head_dim: int
    eps: float = EPS_DEFAULT
    causal: bool = False
    decay: float = 1.0

    def __post_init__(self):
        if not 2 <= self.factors <= MAX_FACTORS:
            raise DimensionError(f"factors must be in [2, {MAX_FACTORS}], got {self.factors}")
        if self.d_phi < 1:
            raise DimensionError(f"d_phi must be >= 1, got {self.d_phi}")
        if self.head_dim < 1:
            raise DimensionError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        # d_phi**F is the state width; refuse configs whose context matrix
        # could not be allocated even at double precision
        check_memory_cap(self.d_phi**self.factors * self.head_dim * 8, "context matrix")

    @property
    def expanded_dim(self) -> int:
        """D = d_phi**factors, the flattened outer-product width."""
        return self.d_phi**self.factors


@dataclass
class HLAGrads:
    """Gradients of hla_forward with respect to its inputs."""

    phi_q_out: np.ndarray
    phi_k_outs: list[np.ndarray]
    v: np.ndarray


def batched_kron(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise Kronecker product over the trailing axis.

    Each input has shape [..., d_phi]; the result has shape
    [..., d_phi**F] with row-major index order, i.e. element
    (i_1, ..., i_F) lands at i_1*d_phi**(F-1) + ... + i_F.
    """
    if len(arrays) == 0:
        raise DimensionError("batched_kron needs at least one array")
    check_dtype(*arrays)
    out = np.asarray(arrays[0])
    lead = out.shape[:-1]
    for a in arrays[1:]:
        if a.shape[:-1] != lead:
            raise DimensionError(f"leading shapes differ: {lead} vs {a.shape[:-1]}")
        out = (out[..., :, None] * a[..., None, :]).reshape(*lead, -1)
    return out


def row_kron(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Flattened outer product of 1-d vectors (row-major order)."""
    for v in vectors:
        if np.asarray(v).ndim != 1:
            raise DimensionError("row_kron expects 1-d vectors")
    return batched_kron(vectors)


def build_query_tensor(phi_q_out: np.ndarray, factors: int) -> np.ndarray:
    """F-fold self outer product of each query feature row, flattened."""
    if factors < 1:
        raise DimensionError(f"factors must be >= 1, got {factors}")
    check_memory_cap(
        int(np.prod(phi_q_out.shape[:-1], dtype=np.int64))
        * phi_q_out.shape[-1] ** factors
        * phi_q_out.dtype.itemsize,
        "query tensor",
    )
    return batched_kron([phi_q_out] * factors)


def build_key_tensor(phi_k_outs: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product across the F distinct key feature rows, flattened."""
    if len(phi_k_outs) < 1:
        raise DimensionError("need at least one key factor")
    first = phi_k_outs[0]
    check_memory_cap(
        int(np.prod(first.shape[:-1], dtype=np.int64))
        * first.shape[-1] ** len(phi_k_outs)
        * first.dtype.itemsize,
        "key tensor",
    )
    return batched_kron(list(phi_k_outs))


def _validate_kernel_inputs(cfg, phi_q_out, phi_k_outs, v, *, check_sign=True):
    if len(phi_k_outs) != cfg.factors:
        raise DimensionError(
            f"got {len(phi_k_outs)} key factors, config says {cfg.factors}"
        )
    check_dtype(phi_q_out, v, *phi_k_outs)
    if phi_q_out.ndim != 4 or v.ndim != 4:
        raise DimensionError("operands must be [batch, heads, n, width]")
    b, h, n, dp = phi_q_out.shape
    if dp != cfg.d_phi:
        raise DimensionError(f"phi width {dp} != d_phi {cfg.d_phi}")
    if v.shape[:3] != (b, h, n) or v.shape[3] != cfg.head_dim:
        raise DimensionError(f"v shape {v.shape} incompatible with config")
    for f, fk in enumerate(phi_k_outs):
        if fk.shape != phi_q_out.shape:
            raise DimensionError(f"key factor {f} shape {fk.shape} != {phi_q_out.shape}")
    if check_sign:
        if np.min(phi_q_out) < 0 or any(np.min(fk) < 0 for fk in phi_k_outs):
            raise ValueError("negative phi outputs; kernel requires phi >= 0")


def _forward_fused_2f(cfg, fq, fks, v):
    eps = fq.dtype.type(cfg.eps)
    k_outer = np.einsum("bhsd,bhse->bhsde", fks[0], fks[1], optimize=False)
    context = np.einsum("bhsde,bhsg->bhdeg", k_outer, v, optimize=False)
    k_sum = np.sum(k_outer, axis=2, dtype=k_outer.dtype)
    del k_outer
    q_outer = np.einsum("bhsd,bhse->bhsde", fq, fq, optimize=False)
    eta = np.einsum("bhsde,bhde->bhs", q_outer, k_sum, optimize=False)
    num = np.einsum("bhsde,bhdeg->bhsg", q_outer, context, optimize=False)
    out = num / (eta + eps)[..., None]
    return out, eta


def _forward_fused_3f(cfg, fq, fks, v):
    eps = fq.dtype.type(cfg.eps)
    k_outer = np.einsum("bhsd,bhse,bhsf->bhsdef", fks[0], fks[1], fks[2], optimize=False)
    context = np.einsum("bhsdef,bhsg->bhdefg", k_outer, v, optimize=False)
    k_sum = np.sum(k_outer, axis=2, dtype=k_outer.dtype)
    del k_outer
    q_outer = np.einsum("bhsd,bhse,bhsf->bhsdef", fq, fq, fq, optimize=False)
    eta = np.einsum("bhsdef,bhdef->bhs", q_outer, k_sum, optimize=False)
    num = np.einsum("bhsdef,bhdefg->bhsg", q_outer, context, optimize=False)
    out = num / (eta + eps)[..., None]
    return out, eta


def _chunk_rows(cfg, b, h, n, itemsize) -> int:
    # keep each expanded chunk within an eighth of the cap
    budget = memory_cap_bytes() // 8
    per_row = b * h * cfg.expanded_dim * itemsize
    return max(1, min(n, budget // max(per_row, 1)))


def _forward_general(cfg, fq, fks, v):
    b, h, n, _ = fq.shape
    d = cfg.head_dim
    dt = fq.dtype
    eps = dt.type(cfg.eps)
    big = cfg.expanded_dim
    check_memory_cap(b * h * big * d * dt.itemsize, "context matrix")
    chunk = _chunk_rows(cfg, b, h, n, dt.itemsize)

    context = np.zeros((b, h, big, d), dtype=dt)
    z = np.zeros((b, h, big), dtype=dt)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        tk = batched_kron([fk[:, :, start:stop, :] for fk in fks])
        context += np.einsum("bhsD,bhsg->bhDg", tk, v[:, :, start:stop, :], optimize=False)
        z += np.sum(tk, axis=2, dtype=dt)

    out = np.empty((b, h, n, d), dtype=dt)
    eta = np.empty((b, h, n), dtype=dt)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        tq = batched_kron([fq[:, :, start:stop, :]] * cfg.factors)
        eta[:, :, start:stop] = np.einsum("bhsD,bhD->bhs", tq, z, optimize=False)
        num = np.einsum("bhsD,bhDg->bhsg", tq, context, optimize=False)
        out[:, :, start:stop, :] = num / (eta[:, :, start:stop] + eps)[..., None]
    return out, eta


def hla_forward(
    cfg: HLAConfig,
    phi_q_out: np.ndarray,
    phi_k_outs: Sequence[np.ndarray],
    v: np.ndarray,
    *,
    path: str = "auto",
) -> tuple[np.ndarray, np.ndarray]:
    """Non-causal F-factor attention without the [N, N] score matrix.

    phi_q_out and each phi_k_outs[f] are [batch, heads, n, d_phi]; v is
    [batch, heads, n, head_dim].  Returns (out, eta) where eta[b,h,i] is
    the row-sum normalizer, equal to the i-th row sum of the materialized
    score matrix.

    path selects the implementation: "fused" (F of 2 or 3 only) expands
    the whole sequence at once, "general" streams fixed-size chunks, and
    "auto" picks whichever fits the memory cap.  All paths agree to
    rounding error.
    """
    phi_q_out = np.asarray(phi_q_out)
    phi_k_outs = [np.asarray(fk) for fk in phi_k_outs]
    v = np.asarray(v)
    if cfg.causal:
        raise ValueError("cfg.causal set; use streaming.causal_forward")
    if cfg.decay != 1.0:
        raise ValueError("decay != 1 only applies to the causal path")
    _validate_kernel_inputs(cfg, phi_q_out, phi_k_outs, v)

    if path not in ("auto", "fused", "general"):
        raise ValueError(f"unknown path {path!r}")
    b, h, n, _ = phi_q_out.shape
    expanded_bytes = b * h * n * cfg.expanded_dim * phi_q_out.dtype.itemsize
    if path == "fused" or (
        path == "auto"
        and cfg.factors in (2, 3)
        and expanded_bytes <= memory_cap_bytes() // 4
    ):
        if cfg.factors in (2, 3):
            check_memory_cap(expanded_bytes, "expanded factor tensor")
            if cfg.factors == 2:
                return _forward_fused_2f(cfg, phi_q_out, phi_k_outs, v)
            return _forward_fused_3f(cfg, phi_q_out, phi_k_outs, v)
        if path == "fused":
            raise ValueError(f"no fused path for factors={cfg.factors}")
    return _forward_general(cfg, phi_q_out, phi_k_outs, v)


def _factor_grad_subscripts(factors: int, position: int) -> str:
    """einsum spec contracting all factor axes except ``position``."""
    axes = _FACTOR_AXES[:factors]
    operands = ["bhn" + axes]
    for g in range(factors):
        if g != position:
            operands.append("bhn" + axes[g])
    return ",".join(operands) + "->bhn" + axes[position]


def hla_backward(
    cfg: HLAConfig,
    phi_q_out: np.ndarray,
    phi_k_outs: Sequence[np.ndarray],
    v: np.ndarray,
    grad_out: np.ndarray,
) -> HLAGrads:
    """Input gradients for the non-causal forward pass.

    Takes the forward inputs (cheap to re-expand) plus the gradient of the
    loss with respect to the output, and returns gradients for phi_q_out,
    every phi_k_outs[f], and v.
    """
    phi_q_out = np.asarray(phi_q_out)
    phi_k_outs = [np.asarray(fk) for fk in phi_k_outs]
    v = np.asarray(v)
    grad_out = np.asarray(grad_out)
    if cfg.causal or cfg.decay != 1.0:
        raise ValueError("backward covers the non-causal, undecayed path only")
    _validate_kernel_inputs(cfg, phi_q_out, phi_k_outs, v, check_sign=False)
    if grad_out.shape != v.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != v shape {v.shape}")
    check_dtype(phi_q_out, grad_out)

    b, h, n, dp = phi_q_out.shape
    dt = phi_q_out.dtype
    eps = dt.type(cfg.eps)
    fcount = cfg.factors

    tq = build_query_tensor(phi_q_out, fcount)
    tk = build_key_tensor(phi_k_outs)
    context = np.einsum("bhnD,bhnd->bhDd", tk, v, optimize=False)
    z = np.sum(tk, axis=2, dtype=dt)
    eta = np.einsum("bhnD,bhD->bhn", tq, z, optimize=False)
    denom = eta + eps
    num = np.einsum("bhnD,bhDd->bhnd", tq, context, optimize=False)
    out = num / denom[..., None]

    g_num = grad_out / denom[..., None]
    g_eta = -np.sum(out * grad_out, axis=-1, dtype=dt) / denom
    g_tq = (
        np.einsum("bhnd,bhDd->bhnD", g_num, context, optimize=False)
        + g_eta[..., None] * z[:, :, None, :]
    )
    g_context = np.einsum("bhnD,bhnd->bhDd", tq, g_num, optimize=False)
    g_z = np.einsum("bhn,bhnD->bhD", g_eta, tq, optimize=False)
    g_tk = (
        np.einsum("bhnd,bhDd->bhnD", v, g_context, optimize=False)
        + g_z[:, :, None, :]
    )
    g_v = np.einsum("bhnD,bhDd->bhnd", tk, g_context, optimize=False)

    factor_shape = (b, h, n) + (dp,) * fcount
    g_tq_full = g_tq.reshape(factor_shape)
    g_tk_full = g_tk.reshape(factor_shape)

    # query rows repeat the same vector in every factor slot, so its
    # gradient sums the per-slot contractions
    g_fq = np.zeros_like(phi_q_out)
    for pos in range(fcount):
        spec = _factor_grad_subscripts(fcount, pos)
        others = [phi_q_out] * (fcount - 1)
        g_fq += np.einsum(spec, g_tq_full, *others, optimize=False)

    g_fks = []
    for pos in range(fcount):
        spec = _factor_grad_subscripts(fcount, pos)
        others = [phi_k_outs[g] for g in range(fcount) if g != pos]
        g_fks.append(np.einsum(spec, g_tk_full, *others, optimize=False))

    return HLAGrads(phi_q_out=g_fq, phi_k_outs=g_fks, v=g_v)
