"""stereoqa: no-reference stereoscopic image quality assessment.

Copula-based naturalness statistics over dual-tree complex wavelet
magnitudes, plus a multi-task patch CNN whose auxiliary head predicts
those statistics while the main head predicts the quality score.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ContractError,
    DegenerateDataError,
    FormatError,
    NumericError,
    ParseError,
    ResolutionError,
    StereoQaError,
)

__all__ = [
    "CheckpointError",
    "ContractError",
    "DegenerateDataError",
    "FormatError",
    "NumericError",
    "ParseError",
    "ResolutionError",
    "StereoQaError",
    "__version__",
]
