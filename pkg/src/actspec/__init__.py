"""actspec: activation-spectrum monitoring and random-matrix compression.

Two pipelines built on the same spectral core:

* streaming monitoring -- slide a window over a stream of activation
  vectors, compare each window's covariance spectrum to a fitted
  Marchenko-Pastur noise baseline, and feed the resulting descriptor time
  series to a small recurrent head that scores the risk of noise-like drift
  (hallucination / out-of-distribution behavior) per step;

* compression -- fit the same noise baseline to a trained MLP's hidden
  activation spectra, keep only the eigen-directions above the bulk edge,
  fold the projection densely into the weights, and recover accuracy by
  self-distillation against the pre-reduction checkpoint.

Everything is deterministic given a seed (PCG64 + Box-Muller; see
``actspec.rng``) and depends only on numpy, with numba accelerating the
Jacobi eigensolver kernel.
"""

from . import compression, datagen, features, linalg, monitor, recurrent, rmt
from .errors import (
    AccuracyGateError,
    ActspecError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DomainError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "compression",
    "datagen",
    "features",
    "linalg",
    "monitor",
    "recurrent",
    "rmt",
    "ActspecError",
    "AccuracyGateError",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DomainError",
    "NumericalError",
    "__version__",
]
