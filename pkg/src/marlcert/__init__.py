"""Certified l2 robustness for cooperative multi-agent RL policies.

The pipeline: train value-based policies (per-agent Q networks with a VDN or
monotonic-QMIX mixer) on small deterministic gridworlds, smooth them with
Gaussian observation noise, certify per-state action robustness with
FDR-corrected per-agent radii, lower-bound the whole episode's team reward by
tree search over candidate actions, and validate the bounds with l2 PGD
attacks.
"""

from marlcert.errors import (
    CheckpointError,
    ConfigError,
    MissingArtifactError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "MissingArtifactError",
    "NumericalError",
    "__version__",
]
