"""Continual cross-modal retrieval on frozen dual encoders: coupled
audio/text prompt tuning with feature and similarity distillation against
the previous step's snapshot, plus the baseline strategies, synthetic
benchmark, and metrics that make the comparisons reproducible."""

__version__ = "0.1.0"

from .autodiff import (
    ARRAY_OPS,
    GRAPH_OPS,
    Node,
    NonFiniteError,
    ShapeError,
    apply,
    backward,
    constant,
    finite_difference_check,
    parameter,
)
from .continual import (
    ModelSnapshot,
    ModelState,
    RunResult,
    SnapshotModel,
    TrainConfig,
    init_model_state,
    load_snapshot,
    pretrain_backbone,
    run_sequence,
    run_step,
    save_snapshot,
    snapshot_from_state,
)
from .data import (
    DomainSpec,
    PairedDataset,
    SequenceSpec,
    benchmark_sequence,
    crop_or_pad,
    generate_domain,
    generate_splits,
    heldout_domain_spec,
    load_manifest,
    write_manifest,
)
from .encoders import (
    EncoderConfig,
    EncoderState,
    audio_config,
    encode_audio,
    encode_text,
    init_audio_encoder,
    init_text_encoder,
    text_config,
)
from .evaluation import (
    MetricsHistory,
    RetrievalScores,
    afs_report,
    anti_forgetting_score,
    average_metrics,
    evaluate_retrieval,
    recall_at_k,
    scores_from_embeddings,
)
from .losses import (
    BatchEmbeddings,
    LossWeights,
    SimilarityPair,
    TeacherOutputs,
    contrastive_loss,
    feature_distillation_loss,
    kl_alignment_loss,
    similarity_distillation_loss,
    similarity_matrices,
    total_loss,
)
from .prompts import (
    PromptSet,
    TrainablePartition,
    count_trainable,
    generate_text_prompts,
    init_prompt_set,
    inject_audio_prompts,
)
from .strategies import (
    STRATEGY_TAGS,
    ModelConfig,
    Strategy,
    apply_low_rank,
    build_strategy,
    desk_model_config,
)
