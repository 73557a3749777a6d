"""Question-aware recurrent memory for long-context QA at desk scale."""

import os as _os

# MEMSEEKER_THREADS bounds the BLAS worker pool; only effective before numpy loads
if _os.environ.get("MEMSEEKER_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MEMSEEKER_THREADS"])

from .model import ModelConfig, ModelParams  # noqa: E402
from .vocab import Vocabulary  # noqa: E402

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelParams", "Vocabulary", "__version__"]
