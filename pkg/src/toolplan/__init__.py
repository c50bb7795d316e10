"""Graph-constrained tool-sequence planning at desk scale.

A directed tool-dependency graph is internalized into a small causal
sequence model through dedicated tool tokens, contrastive edge
reconstruction, query-to-tool SFT, and on-policy distillation from a
privileged frozen teacher.  Generated plans are evaluated with exact match,
edge legality, prefix, set, and edit-distance metrics.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    ContextLengthError,
    DataError,
    GraphFormatError,
    NumericError,
    ToolPlanError,
    TrainingDivergedError,
    VocabCollisionError,
)
from .graph import (
    DirectedPath,
    PathSamplerConfig,
    ToolGraph,
    ToolSpec,
    load_graph,
    sample_path,
    sample_paths,
    validate_trajectory,
)
from .vocab import (
    ToolVocabulary,
    build_default_lexicon,
    build_vocab,
    decode_tokens,
    encode_trajectory,
    restricted_output_ids,
)

__all__ = [
    "__version__",
    "ToolPlanError",
    "ConfigError",
    "DataError",
    "GraphFormatError",
    "VocabCollisionError",
    "CheckpointError",
    "ContextLengthError",
    "NumericError",
    "TrainingDivergedError",
    "ToolSpec",
    "ToolGraph",
    "DirectedPath",
    "PathSamplerConfig",
    "load_graph",
    "validate_trajectory",
    "sample_path",
    "sample_paths",
    "ToolVocabulary",
    "build_vocab",
    "build_default_lexicon",
    "encode_trajectory",
    "decode_tokens",
    "restricted_output_ids",
]
