"""sparsevolt: energy backdoors and sponge attacks on zero-skipping accelerators.

Small numpy-backed stack for studying availability attacks that inflate
the activation density (and hence the modelled energy draw) of networks
deployed on sparsity-exploiting hardware: a reverse-mode autodiff core,
an energy/density cost model, a two-phase backdoor trainer, and
inference-time sponge input searches.
"""

__version__ = "0.1.0"

from .tensor import GraphError, ShapeError, Tensor, grad_check, sgd_step
from .energy import (
    EnergyConfig,
    EnergyReport,
    MetricSummary,
    ReportSummary,
    aggregate_reports,
    combine_summaries,
    densities,
    energy_objective,
    energy_ratio,
    format_interval,
    l0_estimate,
    per_sample_reports,
)
from .models import (
    ARCHITECTURES,
    CheckpointError,
    Model,
    build_model,
    extend_head,
    forward_traced,
    load_checkpoint,
    masked_argmax,
    predict,
    save_checkpoint,
    weights_hash,
)
from .data import (
    DataError,
    LabeledDataset,
    filter_classes,
    load_cifar10_binary,
    split_train_eval,
    synth_dataset,
)
from .trigger import (
    LABEL_MODE_GROUND_TRUTH,
    LABEL_MODE_TRIGGER_CLASS,
    MAX_POISON_RATE,
    PoisonedDataset,
    TriggerConfig,
    apply_trigger,
    export_poisoned,
    poison_dataset,
    ramp_trigger,
    relabel_to_ground_truth,
)
from .training import (
    BackdoorLossConfig,
    TrainConfig,
    TrainLog,
    TrainingError,
    backdoor_loss,
    evaluate_accuracy,
    evaluate_energy,
    phase1_inject,
    phase2_stealth,
    sponge_train_baseline,
    train_baseline,
)
from .attacks import (
    SpongeConfig,
    UniformConfig,
    grid_search_mu,
    lbfgs_two_loop,
    sponge_ga,
    sponge_gradient,
    sponge_gradient_restarts,
    uniform_inputs,
)

__all__ = [
    "__version__",
    "Tensor", "ShapeError", "GraphError", "grad_check", "sgd_step",
    "EnergyConfig", "EnergyReport", "MetricSummary", "ReportSummary",
    "l0_estimate", "energy_objective", "energy_ratio", "densities",
    "per_sample_reports", "aggregate_reports", "combine_summaries",
    "format_interval",
    "ARCHITECTURES", "Model", "build_model", "forward_traced", "predict",
    "masked_argmax", "extend_head", "weights_hash",
    "CheckpointError", "save_checkpoint", "load_checkpoint",
    "DataError", "LabeledDataset", "synth_dataset", "load_cifar10_binary",
    "split_train_eval", "filter_classes",
    "TriggerConfig", "PoisonedDataset", "ramp_trigger", "apply_trigger",
    "poison_dataset", "relabel_to_ground_truth", "export_poisoned",
    "LABEL_MODE_TRIGGER_CLASS", "LABEL_MODE_GROUND_TRUTH", "MAX_POISON_RATE",
    "TrainConfig", "TrainLog", "TrainingError", "BackdoorLossConfig",
    "backdoor_loss", "train_baseline", "sponge_train_baseline",
    "phase1_inject", "phase2_stealth", "evaluate_accuracy", "evaluate_energy",
    "SpongeConfig", "UniformConfig", "lbfgs_two_loop", "sponge_gradient",
    "sponge_gradient_restarts", "sponge_ga", "uniform_inputs", "grid_search_mu",
]
