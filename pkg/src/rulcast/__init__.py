"""Bearing remaining-useful-life transfer prediction.

Vibration ingestion, degradation-onset detection, STFT featurization,
channel-independent patching, a frozen-backbone transformer with reversible
instance normalization and triple embedding, two-stage fine-tuning, and the
accompanying evaluation and ablation tooling.
"""

from .errors import ConfigError, DataError, NumericalError, RulcastError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "RulcastError",
    "__version__",
]
