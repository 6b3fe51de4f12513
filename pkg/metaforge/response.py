"""Scalar design quantities derived from response curves.

- peaks: interior grid points whose magnitude is >= both neighbours in any DoF channel,
  with equal-valued runs collapsed to their leftmost index, plus every TMM-flagged point;
- the largest non-resonant range: the widest band between consecutive peaks;
- the band peak counter h(x, w1, w2): the number of peaks inside a band.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .curves import ModeKind, ResponseCurve
from .errors import DomainError

__all__ = [
    "Band",
    "band_report",
    "count_peaks_in_band",
    "detect_peaks",
    "largest_nonresonant_range",
    "peak_mask",
]


@dataclass(frozen=True, order=True)
class Band:
    """Frequency interval (lo, hi) in Hz with 0 < lo < hi."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and 0 < self.lo < self.hi):
            raise DomainError(f"a band needs 0 < lo < hi, got ({self.lo!r}, {self.hi!r})")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @classmethod
    def parse(cls, text: str) -> Band:
        """Parse ``"lo:hi"`` (Hz)."""
        parts = text.split(":")
        if len(parts) != 2:
            raise DomainError(f"band must look like LO:HI, got {text!r}")
        try:
            return cls(float(parts[0]), float(parts[1]))
        except ValueError as exc:
            raise DomainError(f"band must look like LO:HI, got {text!r}") from exc

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.lo and self.hi <= hi

    def to_json(self) -> dict[str, float]:
        return {"lo": self.lo, "hi": self.hi}


def peak_mask(magnitudes: np.ndarray, resonant: np.ndarray | None = None) -> np.ndarray:
    """Boolean peak indicator per grid point (vectorised core of ``detect_peaks``)."""
    mags = np.asarray(magnitudes, dtype=np.float64)
    if mags.ndim == 1:
        mags = mags[:, None]
    n = mags.shape[0]
    mask = np.zeros(n, dtype=bool)
    if n >= 3:
        mid, left, right = mags[1:-1], mags[:-2], mags[2:]
        candidate = (mid >= left) & (mid >= right)
        # A plateau member whose left neighbour is an equal-valued candidate is not a new peak
        continues = np.zeros_like(candidate)
        continues[1:] = candidate[:-1] & (mid[1:] == left[1:])
        mask[1:-1] = np.any(candidate & ~continues, axis=1)
    if resonant is not None:
        mask |= np.asarray(resonant, dtype=bool)
    return mask


def detect_peaks(curve: ResponseCurve) -> tuple[int, ...]:
    """Sorted grid indices of peaks (see module docstring for the rule)."""
    if len(curve.grid) < 3:
        raise DomainError(f"peak detection needs >= 3 grid points, got {len(curve.grid)}")
    return tuple(int(i) for i in np.flatnonzero(peak_mask(curve.magnitudes, curve.resonant)))


def largest_nonresonant_range(
    curve: ResponseCurve, peaks: tuple[int, ...] | None = None
) -> Band:
    """Widest band between consecutive peaks; ties go to the lower band.

    With no peaks the whole analysis range is returned; with one peak the wider of the two
    endpoint-bounded bands is returned.
    """
    idx = detect_peaks(curve) if peaks is None else tuple(sorted(peaks))
    freqs = curve.grid.frequencies
    if not idx:
        return Band(freqs[0], freqs[-1])
    if len(idx) == 1:
        edges = [freqs[0], freqs[idx[0]], freqs[-1]]
    else:
        edges = [freqs[i] for i in idx]

    best: tuple[float, float] | None = None
    for lo, hi in zip(edges, edges[1:], strict=False):
        if hi <= lo:
            continue
        if best is None or hi - lo > best[1] - best[0]:
            best = (lo, hi)
    if best is None:
        # Single peak on an endpoint: the rest of the range is peak-free
        return Band(freqs[0], freqs[-1])
    return Band(*best)


def count_peaks_in_band(
    curve: ResponseCurve, band: Band, peaks: tuple[int, ...] | None = None
) -> int:
    """h(x, lo, hi): peaks whose frequency lies in the closed band."""
    if not curve.grid.contains(band.lo, band.hi):
        raise DomainError(
            f"band ({band.lo:g}, {band.hi:g}) Hz lies outside the grid "
            f"[{curve.grid.lo:g}, {curve.grid.hi:g}] Hz"
        )
    idx = detect_peaks(curve) if peaks is None else peaks
    freqs = curve.grid.frequencies
    return sum(1 for i in idx if band.lo <= freqs[i] <= band.hi)


def band_report(curve: ResponseCurve) -> dict:
    """``{mode, peaks_hz, band: {lo, hi}}`` for JSON export."""
    peaks = detect_peaks(curve)
    band = largest_nonresonant_range(curve, peaks)
    return {
        "mode": ModeKind(curve.mode).value,
        "source": curve.source,
        "peaks_hz": [curve.grid[i] for i in peaks],
        "band": band.to_json(),
    }


def band_report_json(curves: list[ResponseCurve]) -> str:
    return json.dumps([band_report(c) for c in curves], indent=2)
