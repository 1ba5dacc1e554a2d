"""Adaptive sparse attention with importance-driven KV-cache compression.

Layers decide how many tokens they need: accumulated attention mass picks a
per-layer budget, normalized scores pick which tokens fill it, prefill
attention runs only among those tokens, and the KV cache keeps (or keeps
quantized) only what was picked. A tiny deterministic transformer makes the
whole pipeline checkable against its dense counterpart.
"""

from .attention import (
    AttentionScores,
    ProbeSet,
    ScoreStats,
    accumulated_scores,
    causal_scores,
    dense_attention,
    normalized_scores,
    probe_attention,
    restricted_attention,
    score_stats,
    select_probe_set,
    structural_nnz,
)
from .budget import (
    TAU_NOT_ADAPTIVE,
    LayerBudget,
    TokenPartition,
    adaptive_budget,
    fixed_budget,
    partition_tokens,
    top_mass_fraction,
)
from .engine import (
    ModelConfig,
    SparsityPolicy,
    TinyTransformer,
    decode_step,
    generate,
    init_model,
    load_model,
    prefill,
    save_model,
)
from .engine import LayerReport
from .errors import (
    BoundsError,
    ConfigError,
    DegenerateMaskError,
    DomainError,
    EmptySequenceError,
    FormatError,
    OrderingError,
    ShapeError,
    VocabError,
    ZipvlError,
)
from .kvcache import (
    KVCache,
    QuantizedKV,
    dequantize,
    load_snapshot,
    memory_bytes,
    quantize_mixed,
    save_snapshot,
)
from .metrics import (
    RunReport,
    attn_flops_dense,
    attn_flops_sparse,
    build_run_report,
    kv_reduction,
    report_to_dict,
)
from .workload import evaluate_score_workload, generate_workload

__all__ = [name for name in dir() if not name.startswith("_")]
