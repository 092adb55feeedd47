"""Bit-pattern attention over class activation maps.

Feature stacks exported from a CNN are turned into per-class activation
maps, thresholded into bit patterns, and counted in a per-class keyed
datastore whose normalized rows act as discrete likelihoods. The
package covers the full loop: tensor/dataset serialization, map
computation, key encoding, store training/merging/inference, evaluation
statistics, and synthetic data with brute-force oracles.
"""

from .attention import GcmlConfig, attention_key, flatten_bits, key_from_bits, threshold
from .cam import (
    Cam,
    ClassifierHead,
    class_score,
    class_scores,
    compute_cam,
    downsample_avg,
    load_head,
    minmax_normalize,
    save_head,
    upsample_bilinear,
)
from .evaluation import (
    MetricReport,
    ZTestResult,
    confusion,
    metrics,
    tau_sweep,
    two_proportion_z,
    wald_ci,
)
from .store import (
    GcmlStore,
    Prediction,
    load_store,
    lookup,
    merge,
    normalize_rows,
    predict,
    save_store,
    train_epoch,
    train_update,
)
from .tensorio import (
    DatasetManifest,
    load_manifest,
    load_tensor,
    read_tensor,
    save_manifest,
    save_tensor,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Cam",
    "ClassifierHead",
    "DatasetManifest",
    "GcmlConfig",
    "GcmlStore",
    "MetricReport",
    "Prediction",
    "ZTestResult",
    "attention_key",
    "class_score",
    "class_scores",
    "compute_cam",
    "confusion",
    "downsample_avg",
    "flatten_bits",
    "key_from_bits",
    "load_head",
    "load_manifest",
    "load_store",
    "load_tensor",
    "lookup",
    "merge",
    "metrics",
    "minmax_normalize",
    "normalize_rows",
    "predict",
    "read_tensor",
    "save_head",
    "save_manifest",
    "save_store",
    "save_tensor",
    "tau_sweep",
    "threshold",
    "train_epoch",
    "train_update",
    "two_proportion_z",
    "upsample_bilinear",
    "wald_ci",
    "write_tensor",
]
