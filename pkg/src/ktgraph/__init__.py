"""Ensemble learning on knowledge-transfer graphs.

Networks are nodes; directed edges carry gated attract/repel losses over
probability distributions and attention maps; a fixed ensemble node averages
all node logits. Graph hyperparameters (loss design x gate per edge) are
searched with random sampling plus successive-halving pruning to maximize
ensemble accuracy.
"""

__version__ = "0.1.0"

from .data import (
    BatchStream,
    DatasetSpec,
    ImageDataset,
    balanced_half_split,
    load_dataset,
    synthetic_dataset,
)
from .estimators import (
    GraphEnsembleClassifier,
    GraphRandomSearch,
    check_image_array,
    check_labels,
)
from .gates import GateContext, apply_gate
from .graph import (
    DEFAULT_ARCH,
    LABEL,
    EdgeSpec,
    GateKind,
    GraphParseError,
    GraphSchemaError,
    GraphSizeError,
    GraphSpec,
    InvalidGraphError,
    LossDesign,
    SamplingError,
    SpaceDescriptor,
    deserialize,
    graph_digest,
    hyperparameter_space,
    sample_graph,
    serialize,
    to_dot,
    uniform_graph,
    validate_graph,
)
from .losses import (
    AttentionMap,
    CropPair,
    attn_cosine,
    attn_mse,
    crop_attention,
    design_loss,
    prob_cosine,
    prob_kl,
)
from .models import (
    ARCHITECTURES,
    BackboneConfig,
    NodeOutput,
    attention_entropy,
    build_model,
    load_checkpoint,
    num_parameters,
    save_checkpoint,
)
from .presets import list_presets, make_preset
from .search import (
    Decision,
    NoCompletedTrialsError,
    PrunerState,
    SearchResult,
    TrialLog,
    TrialRecord,
    prune_decision,
    report,
    run_search,
)
from .training import (
    EvalResult,
    TrainConfig,
    build_node_models,
    checkpoint_epochs,
    edge_loss,
    ensemble_logits,
    evaluate,
    learning_rate_at,
    node_loss,
    predict_classes,
    train_graph,
)
