"""Desk-scale toolkit for verification-based recognition pipelines.

Works entirely on exported model artifacts (embedding matrices,
vocabularies, top-k prediction files): no neural network runs here.
Three pieces fit together:

- reflection: uncertainty-gated sequential verification of top-k
  candidates against a pluggable yes/no/not-sure verifier;
- reverse_embedding: snapping vision-token embeddings onto their most
  similar text tokens and building textual replacement prompts;
- connector: a training-free key/value mapping from image features to
  per-term language-model embeddings.

See the ``visionreflect`` CLI for the file-level workflows.
"""
from .connector import (
    BundleMeta,
    ConnectorOutput,
    ConnectorWeights,
    Strategy,
    build_key_from_classifier,
    build_key_from_exemplars,
    build_key_from_text_encoder,
    build_value_matrix,
    connector_forward,
    connector_forward_block,
    load_bundle,
    save_bundle,
)
from .evaluation import (
    BinaryMetrics,
    ConfusionCounts,
    EvalReport,
    baseline_accuracy,
    binary_metrics,
    build_report,
    containment_rate,
    emit_report,
    subset_accuracy,
    top1_accuracy,
)
from .reflection import (
    PromptTemplate,
    ReflectionPolicy,
    ReflectionTrace,
    confidence_score,
    render_prompt,
    run_pipeline,
    should_reflect,
    sweep_thresholds,
    verify_candidates,
)
from .reverse_embedding import (
    KeyTermOptions,
    KeyTermReport,
    VisionTokenBlock,
    build_replacement_prompt,
    extract_key_terms,
    nearest_token,
    row_normalize,
    similarity_scores,
)
from .simulate import SimulationConfig, generate_dataset, generate_vocabulary
from .store import (
    Candidate,
    Dataset,
    EmbeddingMatrix,
    LabelMode,
    PredictionSet,
    Vocabulary,
    load_dataset,
    load_embedding_matrix,
    load_vocabulary,
    save_embedding_matrix,
    save_predictions,
    save_vocabulary,
)
from .verifiers import (
    Answer,
    OracleParams,
    RemoteVerifier,
    ScriptedVerifier,
    StaticVerifier,
    StochasticOracle,
    Verdict,
    VerdictCache,
    Verifier,
    VerifierQuery,
    parse_verdict,
)

__version__ = "0.1.0"
