"""querypatch: adversarial patch training against query-only image classifiers.

The toolkit optimizes a physical-style square patch so that pasting it
onto images flips a black-box classifier's decisions, using only class
probabilities returned by the model — no gradients, no weights.  Local
numpy models, subprocess oracles (JSON lines), and HTTP oracles all sit
behind the same interface.
"""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackResult, StopRule, config_hash,
                     eot_loss, init_patch, patched_accuracy,
                     save_attack_artifacts, train_patch)
from .data import (LabeledDataset, load_idx_dataset, load_image_dir_dataset,
                   read_png, split_dataset, validate_image, write_png)
from .errors import (AttackAborted, ConfigError, ConsistencyError, FormatError,
                     GeometryError, NumericError, ProtocolError, QuerypatchError,
                     TrainingError, TransportError)
from .evaluation import (EvalReport, TransferMatrix, evaluate, read_report,
                         transfer_matrix, write_report)
from .geometry import (AffineTransform, Patch, TransformConfig, apply_patch,
                       load_patch_bundle, make_mask, sample_transform,
                       save_patch_bundle, warp_patch)
from .oracle import (BrightnessOracle, BuiltinModel, BuiltinOracle, HttpOracle,
                     Oracle, SubprocessOracle, UniformOracle, load_model,
                     save_model, train_builtin)
from .rng import Rng, derive_seed
from .zo import (BoxConstraint, HistoryRow, OptimizerState, ZoHyperParams,
                 adamm_step, init_state, project_weighted_box, run_zo_adamm,
                 zo_gradient_estimate)

__all__ = [
    "__version__",
    # data
    "LabeledDataset", "load_idx_dataset", "load_image_dir_dataset",
    "split_dataset", "validate_image", "read_png", "write_png",
    # geometry
    "Patch", "AffineTransform", "TransformConfig", "make_mask",
    "sample_transform", "warp_patch", "apply_patch",
    "save_patch_bundle", "load_patch_bundle",
    # oracles
    "Oracle", "UniformOracle", "BrightnessOracle", "BuiltinModel",
    "BuiltinOracle", "SubprocessOracle", "HttpOracle",
    "train_builtin", "save_model", "load_model",
    # optimizer
    "ZoHyperParams", "OptimizerState", "BoxConstraint", "HistoryRow",
    "init_state", "zo_gradient_estimate", "adamm_step",
    "project_weighted_box", "run_zo_adamm",
    # attack
    "AttackConfig", "AttackResult", "StopRule", "init_patch", "eot_loss",
    "train_patch", "patched_accuracy", "save_attack_artifacts", "config_hash",
    # evaluation
    "EvalReport", "TransferMatrix", "evaluate", "transfer_matrix",
    "write_report", "read_report",
    # rng
    "Rng", "derive_seed",
    # errors
    "QuerypatchError", "FormatError", "ConsistencyError", "GeometryError",
    "ProtocolError", "ConfigError", "TransportError", "TrainingError",
    "NumericError", "AttackAborted",
]
