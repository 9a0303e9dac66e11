"""Conditional normalizing-flow feature generation for generalized
zero-shot learning: coupling-layer density estimation, relative semantic
positioning, boundary-sample mining, and a reproducible evaluate pipeline.
"""

__version__ = "0.1.0"

from .augment import (
    ContrastiveNet,
    MiningConfig,
    PerturbConfig,
    contrastive_loss,
    contrastive_scores,
    mine_boundary,
    perturb,
    prediction_entropy,
    shannon_entropy,
    train_contrastive,
)
from .data import Dataset, SynthConfig, class_prototypes, generate_synthetic, load_dataset, save_dataset
from .errors import (
    ConfigurationError,
    InputDataError,
    MiningError,
    StateError,
    TrainingDivergenceError,
    ZsflowError,
)
from .flow import (
    CouplingLayer,
    FlowModel,
    log_density,
    nll_loss,
    prior_penalty,
    prototype_loss,
)
from .numcore import Adam, GradTape, Layer, Mlp, parameter_hash
from .pipeline import (
    EvalReport,
    SoftmaxClassifier,
    TrainConfig,
    generate_unseen,
    harmonic_mean,
    per_class_accuracy,
    run_ablation,
    run_gzsl,
    run_zsl,
    train_classifier,
    train_pipeline,
)
from .semantics import RawEmbedder, RelativeEmbedder, build_graph, select_anchors
