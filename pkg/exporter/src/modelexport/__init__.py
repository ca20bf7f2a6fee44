"""Bridge from model checkpoints to flat recognition artifacts.

Emits the neutral formats (EMB1 matrices, vocabulary text, prediction
JSON Lines) consumed by the recognition toolkit: per-term text-embedding
tables, text-encoder and classifier key matrices, exemplar feature
blocks, vision-token blocks, and top-k prediction files. This package is
the only place allowed to touch ML frameworks; everything it writes is
framework-free.
"""
from .export import (
    ScoreNaNError,
    export_classifier_head,
    export_exemplar_features,
    export_key_text_encoder,
    export_predictions,
    export_text_embedding_table,
    export_vision_tokens,
)
from .manifest import ExportManifest
from .sources import (
    ImageDecodeError,
    ModelSource,
    SyntheticModelSource,
    TokenizationFailure,
    TorchStateDictSource,
    UnknownModelError,
    resolve_source,
)

__version__ = "0.1.0"
