"""Desk-scale trainability check: fit one factored-attention block to a
frozen softmax teacher.

Teacher and student share frozen random q/k/v projections; only the
feature maps and the two modulation maps train, by plain gradient descent
on the mean squared difference of the per-head block outputs (taken
before the output projection).  Everything is driven by one seeded
generator, so a config+seed pair reproduces its loss curve bitwise on a
single thread.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .block import (
    BlockConfig,
    BlockParams,
    core_backward_from_projected,
    core_from_projected,
    init_block_params,
    project_qkv,
)
from .errors import DivergenceError
from .feature_maps import FeatureMapParams
from .kernel import HLAConfig
from .reference import AttentionInputs, softmax_attention

GD_LR_DEFAULT = 0.5
ADAM_LR_DEFAULT = 0.01


@dataclass(frozen=True)
class DistillConfig:
    seed: int = 0
    steps: int = 200
    batch: int = 2
    n_tokens: int = 64
    heads: int = 2
    head_dim: int = 16
    d_phi: int = 4
    factors: int = 3
    lr: float | None = None
    optimizer: str = "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kernel_eps: float = 1e-6

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for name in ("batch", "n_tokens", "heads", "head_dim", "d_phi", "factors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.lr is not None and not self.lr >= 0:
            raise ValueError("lr must be >= 0")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return GD_LR_DEFAULT if self.optimizer == "gd" else ADAM_LR_DEFAULT


@dataclass
class DistillResult:
    config: DistillConfig
    losses: list[float]
    grad_norms: list[float]
    param_count: int

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _map_arrays(name: str, p: FeatureMapParams):
    yield f"{name}.w1", p.w1
    yield f"{name}.b1", p.b1
    yield f"{name}.w2", p.w2
    yield f"{name}.b2", p.b2
    if p.use_layernorm:
        yield f"{name}.ln_gamma", p.ln_gamma
        yield f"{name}.ln_beta", p.ln_beta


def trainable_arrays(params: BlockParams) -> list[tuple[str, np.ndarray]]:
    """Named parameter arrays the optimizer updates (the phi maps only)."""
    out = list(_map_arrays("phi_q", params.phi_q))
    for i, p in enumerate(params.phi_ks):
        out += list(_map_arrays(f"phi_k{i}", p))
    out += list(_map_arrays("phi_v1", params.phi_v1))
    out += list(_map_arrays("phi_v2", params.phi_v2))
    return out


def _grad_dict(phi_grads: dict) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}

    def add(prefix, g):
        named[f"{prefix}.w1"] = g.w1
        named[f"{prefix}.b1"] = g.b1
        named[f"{prefix}.w2"] = g.w2
        named[f"{prefix}.b2"] = g.b2
        if g.ln_gamma is not None:
            named[f"{prefix}.ln_gamma"] = g.ln_gamma
            named[f"{prefix}.ln_beta"] = g.ln_beta

    add("phi_q", phi_grads["phi_q"])
    for i, g in enumerate(phi_grads["phi_ks"]):
        add(f"phi_k{i}", g)
    add("phi_v1", phi_grads["phi_v1"])
    add("phi_v2", phi_grads["phi_v2"])
    return named


@dataclass
class DistillProblem:
    """One teacher/student pair with frozen projections."""

    cfg: DistillConfig
    block_cfg: BlockConfig
    params: BlockParams
    eval_x: np.ndarray

    def teacher(self, x: np.ndarray) -> np.ndarray:
        qh, kh, vh = project_qkv(x, self.params, self.block_cfg)
        return softmax_attention(AttentionInputs(q=qh, k=kh, v=vh))

    def loss(self, x: np.ndarray) -> float:
        qh, kh, vh = project_qkv(x, self.params, self.block_cfg)
        target = softmax_attention(AttentionInputs(q=qh, k=kh, v=vh))
        mod, _ = core_from_projected(qh, kh, vh, self.params, self.block_cfg)
        diff = mod - target
        return float(np.mean(diff * diff))

    def loss_and_grads(self, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        qh, kh, vh = project_qkv(x, self.params, self.block_cfg)
        target = softmax_attention(AttentionInputs(q=qh, k=kh, v=vh))
        mod, cache = core_from_projected(qh, kh, vh, self.params, self.block_cfg)
        diff = mod - target
        loss = float(np.mean(diff * diff))
        grad_mod = (2.0 / diff.size) * diff
        phi_grads, _, _, _ = core_backward_from_projected(
            cache, self.params, self.block_cfg, grad_mod
        )
        return loss, _grad_dict(phi_grads)


def make_problem(cfg: DistillConfig) -> tuple[DistillProblem, np.random.Generator]:
    """Build the shared-projection problem and the batch generator."""
    rng = np.random.default_rng(cfg.seed)
    block_cfg = BlockConfig(
        hla=HLAConfig(
            factors=cfg.factors,
            d_phi=cfg.d_phi,
            head_dim=cfg.head_dim,
            eps=cfg.kernel_eps,
        ),
        heads=cfg.heads,
    )
    params = init_block_params(block_cfg, rng=rng, dtype=np.float64)
    eval_x = rng.standard_normal((cfg.batch, cfg.n_tokens, block_cfg.model_dim))
    return DistillProblem(cfg, block_cfg, params, eval_x), rng


def count_phi_params(params: BlockParams) -> int:
    return sum(a.size for _, a in trainable_arrays(params))


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def distill_run(cfg: DistillConfig) -> DistillResult:
    """Train the student and return the held-out loss curve.

    losses[k] is the eval-batch loss after k updates; grad_norms[k] is the
    training-gradient norm at that point (the last entry is measured on
    one extra batch without applying an update).  Raises DivergenceError
    the moment a loss or gradient stops being finite.
    """
    problem, rng = make_problem(cfg)
    arrays = trainable_arrays(problem.params)
    lr = cfg.learning_rate

    adam_m = {n: np.zeros_like(a) for n, a in arrays} if cfg.optimizer == "adam" else None
    adam_v = {n: np.zeros_like(a) for n, a in arrays} if cfg.optimizer == "adam" else None

    losses = [problem.loss(problem.eval_x)]
    if not np.isfinite(losses[0]):
        raise DivergenceError(0)
    grad_norms: list[float] = []

    for step in range(cfg.steps):
        x = rng.standard_normal((cfg.batch, cfg.n_tokens, problem.block_cfg.model_dim))
        train_loss, grads = problem.loss_and_grads(x)
        gnorm = _grad_norm(grads)
        if not np.isfinite(train_loss) or not np.isfinite(gnorm):
            raise DivergenceError(step)
        grad_norms.append(gnorm)

        if cfg.optimizer == "gd":
            for name, a in arrays:
                a -= lr * grads[name]
        else:
            t = step + 1
            for name, a in arrays:
                g = grads[name]
                adam_m[name] = cfg.beta1 * adam_m[name] + (1 - cfg.beta1) * g
                adam_v[name] = cfg.beta2 * adam_v[name] + (1 - cfg.beta2) * g * g
                mhat = adam_m[name] / (1 - cfg.beta1**t)
                vhat = adam_v[name] / (1 - cfg.beta2**t)
                a -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)

        eval_loss = problem.loss(problem.eval_x)
        if not np.isfinite(eval_loss):
            raise DivergenceError(step)
        losses.append(eval_loss)

    # one extra gradient measurement so the curve has a norm per row
    x = rng.standard_normal((cfg.batch, cfg.n_tokens, problem.block_cfg.model_dim))
    _, grads = problem.loss_and_grads(x)
    grad_norms.append(_grad_norm(grads))

    return DistillResult(
        config=cfg,
        losses=losses,
        grad_norms=grad_norms,
        param_count=count_phi_params(problem.params),
    )


def write_loss_csv(path: str | os.PathLike, result: DistillResult) -> None:
    lines = ["step,loss,grad_norm"]
    for step, (loss, gnorm) in enumerate(zip(result.losses, result.grad_norms)):
        lines.append(f"{step},{loss!r},{gnorm!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def matched_two_factor_config(cfg: DistillConfig) -> DistillConfig:
    """Two-factor config whose phi parameter count best matches cfg's.

    Kernel-side maps cost d*hidden + hidden + hidden*d_phi + d_phi
    parameters each; with one query map and F key maps the 2-factor
    variant has one map fewer, so its d_phi widens to compensate.  The
    value maps are identical on both sides.
    """
    d = cfg.head_dim
    hid = d
    base = d * hid + hid  # first layer, shared by any d_phi
    per_out = hid + 1  # second-layer column plus bias entry
    target = (cfg.factors + 1) * (base + per_out * cfg.d_phi)
    maps2 = 3  # query map + two key maps
    dp2 = max(1, round((target / maps2 - base) / per_out))
    return replace(cfg, factors=2, d_phi=dp2)


@dataclass
class FactorComparison:
    seeds: list[int]
    finals_3f: list[float]
    finals_2f: list[float]
    median_3f: float
    median_2f: float
    params_3f: int
    params_2f: int

    @property
    def three_factor_wins(self) -> bool:
        return self.median_3f <= self.median_2f


def factor_comparison(base: DistillConfig, seeds: list[int]) -> FactorComparison:
    """Median final loss of 3-factor vs parameter-matched 2-factor runs."""
    cfg3 = replace(base, factors=3)
    cfg2 = matched_two_factor_config(cfg3)
    finals3, finals2 = [], []
    params3 = params2 = 0
    for seed in seeds:
        r3 = distill_run(replace(cfg3, seed=seed))
        r2 = distill_run(replace(cfg2, seed=seed))
        finals3.append(r3.final_loss)
        finals2.append(r2.final_loss)
        params3, params2 = r3.param_count, r2.param_count
    return FactorComparison(
        seeds=list(seeds),
        finals_3f=finals3,
        finals_2f=finals2,
        median_3f=float(np.median(finals3)),
        median_2f=float(np.median(finals2)),
        params_3f=params3,
        params_2f=params2,
    )
