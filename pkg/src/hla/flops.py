"""Analytical FLOPs accounting for attention variants.

Counting convention: one multiply and one add each cost 1 FLOP, so an
n-element dot product costs about 2n.  Softmax exponent/divide is costed
at 5 FLOPs per score entry, GELU at 5 per activation, LayerNorm at 10 per
normalized element.  Reports are pure arithmetic on the spec, so the same
spec always yields the identical report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import DimensionError

SOFTMAX_ELEMENT_COST = 5
ACTIVATION_ELEMENT_COST = 5
LAYERNORM_ELEMENT_COST = 10

CROSSOVER_N_MAX = 1 << 26


@dataclass(frozen=True)
class ModelSpec:
    """Shape of one attention block for counting purposes.

    factors == 0 marks a spec intended for the softmax variant (d_phi is
    ignored there).  phi_hidden is the feature-map hidden width and
    defaults to the head dim.
    """

    n_tokens: int
    heads: int
    head_dim: int
    d_phi: int = 0
    factors: int = 0
    phi_hidden: int | None = None
    include_projections: bool = True
    include_phi_mlps: bool = True
    include_modulation: bool = True

    def __post_init__(self):
        if self.n_tokens < 1 or self.heads < 1 or self.head_dim < 1:
            raise DimensionError("n_tokens, heads, head_dim must be positive")
        if self.d_phi < 0 or self.factors < 0:
            raise DimensionError("d_phi and factors must be >= 0")
        if self.phi_hidden is not None and self.phi_hidden < 1:
            raise DimensionError("phi_hidden must be positive when given")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def hidden(self) -> int:
        return self.phi_hidden if self.phi_hidden is not None else self.head_dim


@dataclass
class FlopsReport:
    """Per-component FLOP counts; total is their sum."""

    variant: str
    spec: ModelSpec
    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def attention_component(self) -> int:
        """FLOPs of the attention computation proper.

        Excludes projections, feature-map MLPs, and modulation; for the
        softmax variant this is scores + softmax + values, for the linear
        variants everything from tensor builds to the output product.
        """
        skip = {"projections", "phi_maps", "modulation"}
        return sum(v for k, v in self.components.items() if k not in skip)

    def to_json(self) -> str:
        payload = {
            "variant": self.variant,
            "spec": {
                "n_tokens": self.spec.n_tokens,
                "heads": self.spec.heads,
                "head_dim": self.spec.head_dim,
                "d_phi": self.spec.d_phi,
                "factors": self.spec.factors,
                "phi_hidden": self.spec.hidden,
                "model_dim": self.spec.model_dim,
            },
            "components": dict(self.components),
            "attention_component": self.attention_component(),
            "total": self.total,
            "total_tflops": self.total / 1e12,
        }
        return json.dumps(payload, indent=2)

    def csv_rows(self) -> list[str]:
        rows = ["component,flops"]
        rows += [f"{k},{v}" for k, v in self.components.items()]
        rows.append(f"total,{self.total}")
        return rows


def _projection_flops(spec: ModelSpec) -> int:
    # q, k, v, out projections: 2*N*M*M each plus the bias add
    m = spec.model_dim
    return 4 * (2 * spec.n_tokens * m * m + spec.n_tokens * m)


def _phi_map_flops(spec: ModelSpec, d_in: int, d_out: int, *, layernorm: bool, relu: bool) -> int:
    """Per-token cost of one feature map."""
    hid = spec.hidden
    f = 2 * d_in * hid + hid
    f += ACTIVATION_ELEMENT_COST * hid
    f += 2 * hid * d_out + d_out
    if layernorm:
        f += LAYERNORM_ELEMENT_COST * d_out
    if relu:
        f += d_out
    return f


def _modulation_flops(spec: ModelSpec) -> int:
    d = spec.head_dim
    per_token = 2 * _phi_map_flops(spec, d, d, layernorm=True, relu=False) + 2 * d
    return spec.heads * spec.n_tokens * per_token


def flops_softmax(spec: ModelSpec) -> FlopsReport:
    """Quadratic scaled-dot-product attention block."""
    n, h, d = spec.n_tokens, spec.heads, spec.head_dim
    comp: dict[str, int] = {}
    if spec.include_projections:
        comp["projections"] = _projection_flops(spec)
    comp["scores"] = 2 * n * n * d * h
    comp["softmax"] = SOFTMAX_ELEMENT_COST * n * n * h
    comp["attention_values"] = 2 * n * n * d * h
    return FlopsReport("softmax", spec, comp)


def _kernel_components(spec: ModelSpec, factors: int, big: int) -> dict[str, int]:
    n, h, d = spec.n_tokens, spec.heads, spec.head_dim
    comp: dict[str, int] = {}
    # each expanded entry takes factors-1 multiplies
    comp["key_tensor_build"] = h * n * big * (factors - 1)
    comp["query_tensor_build"] = h * n * big * (factors - 1)
    comp["context_build"] = 2 * h * n * big * d
    # key-sum accumulation, the eta dot product, the eps add and divide
    comp["normalization"] = h * n * big + 2 * h * n * big + h * n * (d + 1)
    comp["output_product"] = 2 * h * n * big * d
    return comp


def _flops_factored(spec: ModelSpec, variant: str, factors: int) -> FlopsReport:
    if spec.d_phi < 1:
        raise DimensionError(f"{variant} spec needs d_phi >= 1")
    n, h, d = spec.n_tokens, spec.heads, spec.head_dim
    big = spec.d_phi**factors
    comp: dict[str, int] = {}
    if spec.include_projections:
        comp["projections"] = _projection_flops(spec)
    if spec.include_phi_mlps:
        per_map = _phi_map_flops(spec, d, spec.d_phi, layernorm=False, relu=True)
        comp["phi_maps"] = h * n * (factors + 1) * per_map
    comp.update(_kernel_components(spec, factors, big))
    if spec.include_modulation:
        comp["modulation"] = _modulation_flops(spec)
    return FlopsReport(variant, spec, comp)


def flops_linear(spec: ModelSpec) -> FlopsReport:
    """Single-factor linear attention block (one key feature map)."""
    return _flops_factored(spec, "linear", 1)


def flops_hla(spec: ModelSpec) -> FlopsReport:
    """F-factor attention block; spec.factors must be >= 2."""
    if spec.factors < 2:
        raise DimensionError(f"hla spec needs factors >= 2, got {spec.factors}")
    variant = f"hla{spec.factors}" if spec.factors in (2, 3) else "hlaF"
    return _flops_factored(spec, variant, spec.factors)


def crossover_point(
    spec_quad: ModelSpec, spec_hla: ModelSpec, n_max: int = CROSSOVER_N_MAX
) -> int | None:
    """Smallest token count where the factored block is cheaper.

    Both specs must share heads and head_dim.  Returns None when no
    crossover exists at or below n_max.
    """
    if (spec_quad.heads, spec_quad.head_dim) != (spec_hla.heads, spec_hla.head_dim):
        raise DimensionError("specs must share heads and head_dim")

    def cheaper(n: int) -> bool:
        a = flops_hla(replace(spec_hla, n_tokens=n)).total
        b = flops_softmax(replace(spec_quad, n_tokens=n)).total
        return a < b

    if not cheaper(n_max):
        return None
    lo, hi = 1, n_max
    if cheaper(lo):
        return lo
    # invariant: not cheaper(lo), cheaper(hi); the difference is monotone
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cheaper(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _wan_spec(n_tokens: int, **kw) -> ModelSpec:
    return ModelSpec(n_tokens=n_tokens, heads=12, head_dim=128, **kw)


# the two video resolutions used throughout: 12600 and 32760 tokens
PRESETS: dict[str, tuple[str, ModelSpec]] = {
    "wan-320p-quad": ("softmax", _wan_spec(12600)),
    "wan-480p-quad": ("softmax", _wan_spec(32760)),
    "wan-320p-2f": ("hla", _wan_spec(12600, d_phi=12, factors=2, phi_hidden=2560)),
    "wan-480p-2f": ("hla", _wan_spec(32760, d_phi=12, factors=2, phi_hidden=2560)),
    "wan-320p-3f": ("hla", _wan_spec(12600, d_phi=6, factors=3)),
    "wan-480p-3f": ("hla", _wan_spec(32760, d_phi=6, factors=3)),
}


def preset_report(name: str) -> FlopsReport:
    """FLOPs report for a named preset; raises with the list on a miss."""
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; known presets: {known}")
    kind, spec = PRESETS[name]
    if kind == "softmax":
        return flops_softmax(spec)
    return flops_hla(spec)
