"""Self-contained correctness suites behind the `check` subcommand.

Each suite exercises one equivalence or invariant at small sizes and
reports its worst relative error against a per-precision tolerance.  The
test suite covers the same ground in more depth; these run in a second or
two as a smoke check on an installed build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import HLAConfig, hla_backward, hla_forward
from .modulation import modulate
from .feature_maps import init_feature_map, phi_forward
from .reference import naive_hla, rank_bound_check
from .streaming import causal_forward, state_init, state_push, state_query
from .tensor import outer_product, reduce_all


@dataclass
class SuiteResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol


def _dtype(precision: str):
    if precision == "single":
        return np.float32
    if precision == "double":
        return np.float64
    raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative error: worst absolute deviation over the reference
    scale.  Immune to near-zero coordinates, which is what a smoke check
    wants; the test suite applies stricter per-coordinate measures."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale == 0.0:
        scale = 1.0
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


def _draw_kernel_case(rng, dt, *, factors, n=12, b=2, h=2, d=6, d_phi=3):
    fq = rng.uniform(0.05, 1.0, size=(b, h, n, d_phi)).astype(dt)
    fks = [rng.uniform(0.05, 1.0, size=(b, h, n, d_phi)).astype(dt) for _ in range(factors)]
    v = rng.standard_normal((b, h, n, d)).astype(dt)
    return fq, fks, v


def suite_oracle_equivalence(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    worst = 0.0
    for factors in (2, 3):
        cfg = HLAConfig(
            factors=factors, d_phi=base_cfg.d_phi, head_dim=6, eps=base_cfg.eps,
            decay=base_cfg.decay,
        )
        for _ in range(5):
            fq, fks, v = _draw_kernel_case(rng, dt, factors=factors, d_phi=cfg.d_phi)
            out, _ = hla_forward(cfg, fq, fks, v)
            ref, _ = naive_hla(fq, fks, v, eps=cfg.eps)
            worst = max(worst, _rel_err(out, ref))
    return worst


def suite_lemma_identity(precision, rng, base_cfg) -> float:
    # positive draws: the kernel's feature maps are nonnegative, and a
    # cancellation-free sum keeps the relative error bounded by rounding
    dt = _dtype(precision)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 7))
        f = int(rng.integers(2, 5))
        q = rng.uniform(0.05, 1, size=d).astype(dt)
        rs = [rng.uniform(0.05, 1, size=d).astype(dt) for _ in range(f)]
        lhs = np.prod([float(q @ r) for r in rs])
        rhs = float(reduce_all(outer_product([q] * f) * outer_product(rs)))
        worst = max(worst, _rel_err(np.array(lhs), np.array(rhs)))
    return worst


def suite_normalization(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    worst = 0.0
    cfg = HLAConfig(factors=2, d_phi=3, head_dim=6, eps=0.0)
    for _ in range(5):
        fq, fks, v = _draw_kernel_case(rng, dt, factors=2)
        out, eta = hla_forward(cfg, fq, fks, v)
        _, scores = naive_hla(fq, fks, v, eps=0.0)
        worst = max(worst, _rel_err(eta, scores.sum(axis=-1)))
        ones_v = np.ones_like(v)
        row_sums, _ = hla_forward(cfg, fq, fks, ones_v)
        worst = max(worst, _rel_err(row_sums, np.ones_like(row_sums)))
    return worst


def suite_fused_vs_general(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    worst = 0.0
    for factors in (2, 3):
        cfg = HLAConfig(factors=factors, d_phi=3, head_dim=6, eps=base_cfg.eps)
        fq, fks, v = _draw_kernel_case(rng, dt, factors=factors)
        fused, eta_f = hla_forward(cfg, fq, fks, v, path="fused")
        general, eta_g = hla_forward(cfg, fq, fks, v, path="general")
        worst = max(worst, _rel_err(fused, general), _rel_err(eta_f, eta_g))
    return worst


def suite_streaming(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    worst = 0.0
    n = 16
    for decay in (1.0, 0.9):
        for factors in (2, 3):
            cfg = HLAConfig(
                factors=factors, d_phi=3, head_dim=4, eps=base_cfg.eps,
                causal=True, decay=decay,
            )
            fq, fks, v = _draw_kernel_case(rng, dt, factors=factors, n=n, b=1, h=1, d=4)
            out = causal_forward(cfg, fq, fks, v, chunk_size=5)
            state = state_init(cfg, dtype=dt)
            streamed = np.empty_like(out)
            for i in range(n):
                state_push(state, [fk[0, 0, i] for fk in fks], v[0, 0, i])
                streamed[0, 0, i] = state_query(state, fq[0, 0, i])
            idx = np.arange(n)
            delta = idx[:, None] - idx[None, :]
            mask = np.where(delta >= 0, float(decay) ** delta, 0.0).astype(dt)
            ref, _ = naive_hla(fq, fks, v, mask=mask, eps=cfg.eps)
            worst = max(worst, _rel_err(out, ref), _rel_err(streamed, ref))
    return worst


def suite_gradients(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    h_step = 1e-5 if precision == "double" else 1e-2
    cfg = HLAConfig(factors=2, d_phi=3, head_dim=4, eps=base_cfg.eps)
    fq, fks, v = _draw_kernel_case(rng, dt, factors=2, n=4, b=1, h=1, d=4)
    grad_out = rng.standard_normal(v.shape).astype(dt)
    grads = hla_backward(cfg, fq, fks, v, grad_out)

    def loss(fq_, fks_, v_):
        out, _ = hla_forward(cfg, fq_, fks_, v_)
        return float(np.sum(out * grad_out))

    worst = 0.0
    arrays = [(fq, grads.phi_q_out), (v, grads.v)] + list(zip(fks, grads.phi_k_outs))
    for arr, g in arrays:
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h_step
            up = loss(fq, fks, v)
            flat[idx] = orig - h_step
            dn = loss(fq, fks, v)
            flat[idx] = orig
            fd = (up - dn) / (2 * h_step)
            an = float(g.reshape(-1)[idx])
            denom = max(abs(fd), abs(an))
            if denom > 1e-8:
                worst = max(worst, abs(fd - an) / denom)
    return worst


def suite_rank_bounds(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    # the rank threshold must sit above the compute precision's noise
    rel_tol = 1e-8 if precision == "double" else 1e-4
    violations = 0
    for _ in range(10):
        fq = rng.uniform(0.05, 1.0, size=(1, 1, 8, 2)).astype(dt)
        fks = [rng.uniform(0.05, 1.0, size=(1, 1, 8, 2)).astype(dt) for _ in range(2)]
        v = rng.standard_normal((1, 1, 8, 4)).astype(dt)
        _, scores = naive_hla(fq, fks, v)
        factor_mats = [
            (fq[0, 0].astype(np.float64) @ fk[0, 0].astype(np.float64).T) for fk in fks
        ]
        score_mat = scores[0, 0].astype(np.float64)
        report = rank_bound_check(score_mat, factor_mats, rel_tol=rel_tol)
        if not report.holds:
            violations += 1
    return float(violations)


def suite_modulation(precision, rng, base_cfg) -> float:
    dt = _dtype(precision)
    d = 6
    p1 = init_feature_map(d, d, d, rng=rng, use_relu_output=False, use_layernorm=True, dtype=dt)
    p2 = init_feature_map(d, d, d, rng=rng, use_relu_output=False, use_layernorm=True, dtype=dt)
    t = rng.standard_normal((1, 2, 5, d)).astype(dt)
    v = rng.standard_normal((1, 2, 5, d)).astype(dt)
    got = modulate(t, v, p1, p2)
    want = t + phi_forward(p1, t) * phi_forward(p2, v)
    return _rel_err(got, want)


_SUITES = [
    ("lemma_identity", suite_lemma_identity, 1e-12, 1e-5),
    ("oracle_equivalence", suite_oracle_equivalence, 1e-10, 1e-4),
    ("normalization", suite_normalization, 1e-10, 1e-4),
    ("fused_vs_general", suite_fused_vs_general, 1e-12, 1e-5),
    ("streaming", suite_streaming, 1e-8, 1e-3),
    ("gradients", suite_gradients, 1e-6, 1e-2),
    ("rank_bounds", suite_rank_bounds, 0.0, 0.0),
    ("modulation", suite_modulation, 1e-12, 1e-5),
]


def run_suites(
    precision: str = "double", seed: int = 0, overrides: dict | None = None
) -> list[SuiteResult]:
    """Run every suite; config overrides are applied to a base HLAConfig
    first, so invalid combinations are rejected before any suite runs."""
    base_kwargs = dict(factors=2, d_phi=3, head_dim=6)
    if overrides:
        base_kwargs.update(overrides)
    base_cfg = HLAConfig(**base_kwargs)  # raises on rejected config
    results = []
    for i, (name, fn, tol_double, tol_single) in enumerate(_SUITES):
        rng = np.random.default_rng([seed, i])
        tol = tol_double if precision == "double" else tol_single
        err = fn(precision, rng, base_cfg)
        results.append(SuiteResult(name=name, max_err=err, tol=tol))
    return results
