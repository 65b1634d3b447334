"""F-factor linear-time attention kernels with quadratic oracles,
streaming causal state, value modulation, verified gradients, an
analytical FLOPs model, and a benchmark CLI."""

from .block import (
    BlockConfig,
    BlockParams,
    block_backward,
    hla_attention_block,
    init_block_params,
    merge_heads,
    split_heads,
)
from .distill import (
    DistillConfig,
    DistillResult,
    distill_run,
    factor_comparison,
    write_loss_csv,
)
from .errors import (
    DimensionError,
    DivergenceError,
    MemoryCapError,
    PrecisionError,
)
from .feature_maps import (
    FeatureMapGrads,
    FeatureMapParams,
    RopeConfig,
    apply_rope,
    default_query_scale,
    gelu,
    init_feature_map,
    load_weight_bundle,
    phi_backward,
    phi_forward,
    rope_backward,
    save_weight_bundle,
    scale_queries,
)
from .flops import (
    FlopsReport,
    ModelSpec,
    PRESETS,
    crossover_point,
    flops_hla,
    flops_linear,
    flops_softmax,
    preset_report,
)
from .kernel import (
    HLAConfig,
    HLAGrads,
    build_key_tensor,
    build_query_tensor,
    hla_backward,
    hla_forward,
)
from .modulation import modulate, modulate_backward
from .reference import (
    AttentionInputs,
    linear_attention,
    naive_hla,
    numerical_rank,
    product_rank_check,
    rank_bound_check,
    softmax_attention,
)
from .streaming import (
    ContextState,
    causal_forward,
    load_state,
    op_count,
    push_op_count,
    save_state,
    state_init,
    state_push,
    state_query,
)
from .tensor import (
    contract_first_axis,
    hadamard,
    load_tensor,
    memory_cap_bytes,
    outer_product,
    reduce_all,
    reduce_trailing,
    save_tensor,
)

__version__ = "0.1.0"
