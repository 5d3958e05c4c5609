"""Span-compressed speech-token language modeling.

A toy-scale codec language model whose autoregressive layer mixes a
prompt-local sliding window with interleaved span-compression tokens, so
the KV cache stays bounded while long-range prompt conditioning survives.
Training runs on torch; decoding runs on a standalone float64 numpy engine
with two provably equivalent strategies (mask-only vs. cache eviction).
"""

from .config import (
    CFConfig,
    ModelConfig,
    RunConfig,
    Vocabulary,
    load_run_config,
    make_cf_config,
)
from .layout import SequenceLayout, SlotKind, build_layout, span_count
from .masks import (
    AttentionMask,
    build_cf_training,
    build_dense_causal,
    build_mask,
    build_prompt_local_ar,
    build_prompt_local_nar,
    visibility_oracle,
)

__all__ = [
    "AttentionMask",
    "CFConfig",
    "ModelConfig",
    "RunConfig",
    "SequenceLayout",
    "SlotKind",
    "Vocabulary",
    "build_cf_training",
    "build_dense_causal",
    "build_layout",
    "build_mask",
    "build_prompt_local_ar",
    "build_prompt_local_nar",
    "load_run_config",
    "make_cf_config",
    "span_count",
    "visibility_oracle",
]

__version__ = "0.1.0"
