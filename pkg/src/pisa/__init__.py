"""Prime-sample-attention training utilities for detection models.

Core pieces: hierarchical local ranking of samples (IoU-HLR for positives,
Score-HLR for negatives), importance-based loss reweighting, the
classification-aware regression loss, a COCO-style evaluator, and a
synthetic desk-scale training harness comparing random sampling, hard
mining, and prime-sample attention.
"""

from pisa._kernels import NUMBA_ACTIVE
from pisa.errors import ConfigError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericalError", "NUMBA_ACTIVE", "__version__"]
