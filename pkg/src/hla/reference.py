"""Quadratic reference attention paths and rank diagnostics.

Everything here materializes the full [N, N] score matrix, so these
functions are oracles for tests and small-scale inspection only.  They
refuse sequences longer than MAX_NAIVE_TOKENS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, MemoryCapError
from .feature_maps import default_query_scale
from .tensor import check_dtype

MAX_NAIVE_TOKENS = 512
EPS_DEFAULT = 1e-6


def _check_bhnd(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise DimensionError(f"{name} must be [batch, heads, n, d], got {a.shape}")


def _check_token_cap(n: int) -> None:
    if n > MAX_NAIVE_TOKENS:
        raise MemoryCapError(
            f"refusing to materialize {n}x{n} scores (cap {MAX_NAIVE_TOKENS} tokens)"
        )


@dataclass
class AttentionInputs:
    """Batched attention operands, all [batch, heads, n, d].

    mask, when given, scales the pre-normalization scores elementwise and
    must broadcast against [batch, heads, n, n].
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        for name, a in (("q", self.q), ("k", self.k), ("v", self.v)):
            _check_bhnd(name, a)
        check_dtype(self.q, self.k, self.v)
        if self.q.shape != self.k.shape:
            raise DimensionError(f"q {self.q.shape} vs k {self.k.shape}")
        if self.v.shape[:3] != self.q.shape[:3]:
            raise DimensionError(f"v {self.v.shape} vs q {self.q.shape}")
        if self.mask is not None:
            np.broadcast_shapes(
                self.mask.shape, self.q.shape[:3] + (self.q.shape[2],)
            )


def softmax_attention(inp: AttentionInputs, scale: float | None = None) -> np.ndarray:
    """Scaled dot-product attention with row-wise softmax.

    scale defaults to 1/sqrt(head_dim).  The mask, if any, multiplies the
    exponentiated scores before normalization, so a 0/1 causal mask zeroes
    future positions exactly.
    """
    q, k, v = inp.q, inp.k, inp.v
    if q.shape[2] == 0:
        raise DimensionError("zero-length sequence")
    _check_token_cap(q.shape[2])
    for name, a in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite entries in {name}")
    if scale is None:
        scale = default_query_scale(q.shape[-1])
    # matmul (BLAS) here: the oracle materializes [n, n] anyway, and the
    # BLAS schedule is fixed at a given thread count
    scores = (q @ k.transpose(0, 1, 3, 2)) * q.dtype.type(scale)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    if inp.mask is not None:
        weights = weights * inp.mask
    denom = weights.sum(axis=-1, keepdims=True, dtype=weights.dtype)
    out = weights @ v
    return (out / denom).astype(q.dtype, copy=False)


def linear_attention(
    phi_q_out: np.ndarray,
    phi_k_out: np.ndarray,
    v: np.ndarray,
    eps: float = EPS_DEFAULT,
) -> np.ndarray:
    """Single-factor linear attention: rows of phi_q score against phi_k.

    out_i = phi_q_i (sum_j phi_k_j v_j^T) / (phi_q_i . sum_j phi_k_j + eps).
    """
    _check_bhnd("phi_q_out", phi_q_out)
    _check_bhnd("phi_k_out", phi_k_out)
    _check_bhnd("v", v)
    check_dtype(phi_q_out, phi_k_out, v)
    if phi_q_out.shape != phi_k_out.shape:
        raise DimensionError("phi_q_out and phi_k_out must match")
    context = np.einsum("bhje,bhjd->bhed", phi_k_out, v, optimize=False)
    key_sum = np.sum(phi_k_out, axis=2, dtype=phi_k_out.dtype)
    num = np.einsum("bhie,bhed->bhid", phi_q_out, context, optimize=False)
    eta = np.einsum("bhie,bhe->bhi", phi_q_out, key_sum, optimize=False)
    return (num / (eta + phi_q_out.dtype.type(eps))[..., None]).astype(
        phi_q_out.dtype, copy=False
    )


def naive_hla(
    phi_q_out: np.ndarray,
    phi_k_outs: Sequence[np.ndarray],
    v: np.ndarray,
    mask: np.ndarray | None = None,
    eps: float = EPS_DEFAULT,
) -> tuple[np.ndarray, np.ndarray]:
    """Materialized F-factor attention.

    The score matrix is the elementwise product over factors f of
    phi_q @ phi_k_f^T.  Rows are normalized by their (masked) sums plus
    eps.  Returns (out, scores) where scores is the masked matrix before
    normalization, kept for rank inspection.
    """
    _check_bhnd("phi_q_out", phi_q_out)
    _check_bhnd("v", v)
    if len(phi_k_outs) < 2:
        raise DimensionError(f"need at least 2 factors, got {len(phi_k_outs)}")
    for f, fk in enumerate(phi_k_outs):
        _check_bhnd(f"phi_k_outs[{f}]", fk)
        if fk.shape != phi_q_out.shape:
            raise DimensionError(
                f"factor {f} shape {fk.shape} != phi_q {phi_q_out.shape}"
            )
    check_dtype(phi_q_out, v, *phi_k_outs)
    n = phi_q_out.shape[2]
    _check_token_cap(n)

    scores = np.einsum("bhie,bhje->bhij", phi_q_out, phi_k_outs[0], optimize=False)
    for fk in phi_k_outs[1:]:
        scores = scores * np.einsum(
            "bhie,bhje->bhij", phi_q_out, fk, optimize=False
        )
    if mask is not None:
        scores = scores * mask
    denom = scores.sum(axis=-1, keepdims=True, dtype=scores.dtype) + phi_q_out.dtype.type(eps)
    out = np.einsum("bhij,bhjd->bhid", scores, v, optimize=False) / denom
    return out.astype(phi_q_out.dtype, copy=False), scores


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Count singular values above rel_tol times the largest one."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    sigma = np.linalg.svd(m, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_tol * sigma[0]))


@dataclass
class RankBoundReport:
    hadamard_rank: int
    factor_ranks: list[int]
    bound: int
    holds: bool


def rank_bound_check(
    score_matrix: np.ndarray,
    factor_matrices: Sequence[np.ndarray],
    rel_tol: float = 1e-8,
) -> RankBoundReport:
    """Check rank(elementwise product) <= product of factor ranks."""
    had = numerical_rank(score_matrix, rel_tol)
    ranks = [numerical_rank(f, rel_tol) for f in factor_matrices]
    bound = int(np.prod(ranks)) if ranks else 0
    return RankBoundReport(had, ranks, bound, had <= bound)


@dataclass
class ProductRankReport:
    product_rank: int
    rank_left: int
    rank_right: int
    holds: bool


def product_rank_check(
    left: np.ndarray, right: np.ndarray, rel_tol: float = 1e-8
) -> ProductRankReport:
    """Check rank(left @ right) <= min(rank(left), rank(right))."""
    pr = numerical_rank(left @ right, rel_tol)
    rl = numerical_rank(left, rel_tol)
    rr = numerical_rank(right, rel_tol)
    return ProductRankReport(pr, rl, rr, pr <= min(rl, rr))
