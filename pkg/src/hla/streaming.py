"""Causal attention as a running state over the expanded key features.

A stream keeps a context matrix C of shape [D, head_dim] and a normalizer
accumulator of width D, where D = d_phi**F.  Pushing token j applies the
decay and adds that token's flattened key outer product:

    C      <- decay * C + kron(phi_k rows) (x) v_j
    eta_acc <- decay * eta_acc + kron(phi_k rows)

Querying after the push weights past tokens by decay**(i - j) and the
current token by 1, which is exactly a masked quadratic pass with mask
M[i, j] = decay**(i - j) for j <= i.  causal_forward processes whole
sequences chunk by chunk and matches the token-at-a-time loop to rounding
error.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .kernel import HLAConfig, batched_kron, row_kron
from .tensor import check_dtype, check_memory_cap, load_tensor, save_tensor

CHUNK_DEFAULT = 64


@dataclass
class ContextState:
    """Mutable single-stream state: one (batch, head) slice of a sequence."""

    cfg: HLAConfig
    context: np.ndarray
    eta_acc: np.ndarray
    step: int
    decay: float


def state_init(cfg: HLAConfig, *, dtype=np.float64) -> ContextState:
    """Fresh zeroed state for one stream."""
    dt = np.dtype(dtype)
    big = cfg.expanded_dim
    check_memory_cap(big * (cfg.head_dim + 1) * dt.itemsize, "stream state")
    return ContextState(
        cfg=cfg,
        context=np.zeros((big, cfg.head_dim), dtype=dt),
        eta_acc=np.zeros(big, dtype=dt),
        step=0,
        decay=cfg.decay,
    )


def state_push(
    state: ContextState, phi_k_rows: Sequence[np.ndarray], v_row: np.ndarray
) -> ContextState:
    """Fold one token into the state (mutates and returns it)."""
    cfg = state.cfg
    if len(phi_k_rows) != cfg.factors:
        raise DimensionError(f"got {len(phi_k_rows)} key rows, need {cfg.factors}")
    rows = [np.asarray(r) for r in phi_k_rows]
    v_row = np.asarray(v_row)
    for r in rows:
        if r.shape != (cfg.d_phi,):
            raise DimensionError(f"key row shape {r.shape} != ({cfg.d_phi},)")
    if v_row.shape != (cfg.head_dim,):
        raise DimensionError(f"value row shape {v_row.shape} != ({cfg.head_dim},)")
    check_dtype(state.context, v_row, *rows)

    tk = row_kron(rows)
    dt = state.context.dtype
    decay = dt.type(state.decay)
    if state.decay != 1.0:
        state.context *= decay
        state.eta_acc *= decay
    state.context += tk[:, None] * v_row[None, :]
    state.eta_acc += tk
    state.step += 1
    return state


def state_query(state: ContextState, phi_q_row: np.ndarray) -> np.ndarray:
    """Attention output for one query row against the current state."""
    cfg = state.cfg
    if state.step < 1:
        raise ValueError("cannot query an empty state; push a token first")
    phi_q_row = np.asarray(phi_q_row)
    if phi_q_row.shape != (cfg.d_phi,):
        raise DimensionError(f"query row shape {phi_q_row.shape} != ({cfg.d_phi},)")
    check_dtype(state.context, phi_q_row)
    tq = row_kron([phi_q_row] * cfg.factors)
    dt = state.context.dtype
    num = np.einsum("D,Dd->d", tq, state.context, optimize=False)
    eta = np.einsum("D,D->", tq, state.eta_acc, optimize=False)
    return (num / (eta + dt.type(cfg.eps))).astype(dt, copy=False)


def _decay_mask(n: int, decay: float, dtype) -> np.ndarray:
    idx = np.arange(n)
    delta = idx[:, None] - idx[None, :]
    mask = np.where(delta >= 0, np.power(float(decay), delta, dtype=np.float64), 0.0)
    return mask.astype(dtype)


def causal_forward(
    cfg: HLAConfig,
    phi_q_out: np.ndarray,
    phi_k_outs: Sequence[np.ndarray],
    v: np.ndarray,
    *,
    chunk_size: int = CHUNK_DEFAULT,
) -> np.ndarray:
    """Causal decayed attention over full sequences, chunked.

    Equivalent to pushing and querying token by token on every (batch,
    head) stream, but processes chunk_size tokens at a time: each chunk
    combines the carried state with an intra-chunk lower-triangular pass,
    then folds itself into the state.
    """
    phi_q_out = np.asarray(phi_q_out)
    phi_k_outs = [np.asarray(fk) for fk in phi_k_outs]
    v = np.asarray(v)
    if len(phi_k_outs) != cfg.factors:
        raise DimensionError(f"got {len(phi_k_outs)} key factors, need {cfg.factors}")
    check_dtype(phi_q_out, v, *phi_k_outs)
    if phi_q_out.ndim != 4 or v.ndim != 4:
        raise DimensionError("operands must be [batch, heads, n, width]")
    if phi_q_out.shape[-1] != cfg.d_phi or v.shape[-1] != cfg.head_dim:
        raise DimensionError("trailing widths do not match config")
    for fk in phi_k_outs:
        if fk.shape != phi_q_out.shape:
            raise DimensionError("key factor shapes must match phi_q_out")
    if v.shape[:3] != phi_q_out.shape[:3]:
        raise DimensionError(f"v shape {v.shape} incompatible with {phi_q_out.shape}")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")

    b, h, n, _ = phi_q_out.shape
    d = cfg.head_dim
    dt = phi_q_out.dtype
    eps = dt.type(cfg.eps)
    big = cfg.expanded_dim
    check_memory_cap(
        (b * h * big * d + 2 * b * h * chunk_size * big) * dt.itemsize,
        "causal working set",
    )

    context = np.zeros((b, h, big, d), dtype=dt)
    z = np.zeros((b, h, big), dtype=dt)
    out = np.empty((b, h, n, d), dtype=dt)
    decay = float(cfg.decay)

    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        c = stop - start
        tq = batched_kron([phi_q_out[:, :, start:stop, :]] * cfg.factors)
        tk = batched_kron([fk[:, :, start:stop, :] for fk in phi_k_outs])
        v_c = v[:, :, start:stop, :]

        # weight for the carried state at local row l is decay**(l + 1)
        carry = np.power(decay, np.arange(1, c + 1, dtype=np.float64)).astype(dt)
        scores = np.einsum("bhiD,bhjD->bhij", tq, tk, optimize=False)
        scores = scores * _decay_mask(c, decay, dt)
        num = np.einsum("bhij,bhjd->bhid", scores, v_c, optimize=False)
        num += carry[:, None] * np.einsum("bhiD,bhDd->bhid", tq, context, optimize=False)
        eta = np.sum(scores, axis=-1, dtype=dt)
        eta += carry * np.einsum("bhiD,bhD->bhi", tq, z, optimize=False)
        out[:, :, start:stop, :] = num / (eta + eps)[..., None]

        # token j at local index l enters the carried state with weight
        # decay**(c - 1 - l), and the old state ages by decay**c
        age = dt.type(decay**c)
        fold = np.power(decay, np.arange(c - 1, -1, -1, dtype=np.float64)).astype(dt)
        tk_w = tk * fold[:, None]
        context *= age
        context += np.einsum("bhjD,bhjd->bhDd", tk_w, v_c, optimize=False)
        z *= age
        z += np.sum(tk_w, axis=2, dtype=dt)

    return out


def push_op_count(cfg: HLAConfig) -> int:
    """Multiplies needed to fold one token into the context matrix."""
    return cfg.expanded_dim * cfg.head_dim


def op_count(cfg: HLAConfig, n_tokens: int) -> int:
    """Operation count for a length-n causal pass: state plus queries."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    big = cfg.expanded_dim
    return 3 * big * cfg.head_dim + n_tokens * cfg.head_dim * big


_STATE_HEADER = "state.json"


def save_state(path: str | os.PathLike, state: ContextState) -> None:
    """Snapshot a stream state: JSON header plus one file per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = state.cfg
    header = {
        "format": 1,
        "step": state.step,
        "decay": state.decay,
        "config": {
            "factors": cfg.factors,
            "d_phi": cfg.d_phi,
            "head_dim": cfg.head_dim,
            "eps": cfg.eps,
            "causal": cfg.causal,
            "decay": cfg.decay,
        },
    }
    with open(root / _STATE_HEADER, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
    save_tensor(root / "context.bin", state.context)
    save_tensor(root / "eta_acc.bin", state.eta_acc)


def load_state(path: str | os.PathLike) -> ContextState:
    """Restore a snapshot written by save_state."""
    root = Path(path)
    with open(root / _STATE_HEADER) as f:
        header = json.load(f)
    if header.get("format") != 1:
        raise ValueError(f"unknown state format {header.get('format')!r}")
    cfg = HLAConfig(**header["config"])
    context = load_tensor(root / "context.bin")
    eta_acc = load_tensor(root / "eta_acc.bin")
    if context.shape != (cfg.expanded_dim, cfg.head_dim):
        raise DimensionError(f"context shape {context.shape} does not match config")
    if eta_acc.shape != (cfg.expanded_dim,):
        raise DimensionError(f"eta_acc shape {eta_acc.shape} does not match config")
    return ContextState(
        cfg=cfg,
        context=context,
        eta_acc=eta_acc,
        step=int(header["step"]),
        decay=float(header["decay"]),
    )
