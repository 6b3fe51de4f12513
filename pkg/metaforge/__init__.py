"""Forward and inverse design of aperiodic drill-pipe metamaterials.

Usage:
    python -m metaforge --help
"""

from .config import RunConfig, load_config
from .curves import FrequencyGrid, ModeKind, ResponseCurve
from .errors import MetaforgeError
from .geometry import DesignVector, SegmentChain, build_segments, insert_mass
from .response import Band, count_peaks_in_band, detect_peaks, largest_nonresonant_range
from .tmm import chain_transfer, frequency_sweep, segment_matrix, transmission_ratio

__version__ = "0.1.0"

__all__ = [
    "Band",
    "DesignVector",
    "FrequencyGrid",
    "MetaforgeError",
    "ModeKind",
    "ResponseCurve",
    "RunConfig",
    "SegmentChain",
    "build_segments",
    "chain_transfer",
    "count_peaks_in_band",
    "detect_peaks",
    "frequency_sweep",
    "insert_mass",
    "largest_nonresonant_range",
    "load_config",
    "segment_matrix",
    "transmission_ratio",
]
