"""Frequency grids, vibration mode families and sampled response curves."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DomainError


class ModeKind(str, Enum):
    AXIAL = "axial"
    TORSIONAL = "torsional"
    LATERAL = "lateral"

    @property
    def dof_names(self) -> tuple[str, ...]:
        return _DOF_NAMES[self]


# Lateral direction 2 mirrors direction 1 (the section is axisymmetric)
_DOF_NAMES: dict[ModeKind, tuple[str, ...]] = {
    ModeKind.AXIAL: ("u",),
    ModeKind.TORSIONAL: ("theta",),
    ModeKind.LATERAL: ("deflection_1", "slope_1", "deflection_2", "slope_2"),
}


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing, positive analysis frequencies in Hz."""

    frequencies: tuple[float, ...]

    def __post_init__(self) -> None:
        freqs = tuple(float(f) for f in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        if not freqs:
            raise DomainError("frequency grid is empty")
        if not all(np.isfinite(freqs)) or freqs[0] <= 0:
            raise DomainError(f"grid frequencies must be finite and > 0, first is {freqs[0]!r}")
        if any(b <= a for a, b in zip(freqs, freqs[1:], strict=False)):
            raise DomainError("grid frequencies must be strictly increasing")

    @classmethod
    def linear(cls, lo: float, hi: float, n: int) -> FrequencyGrid:
        """Endpoint-inclusive linear grid."""
        if n < 2:
            raise DomainError(f"a linear grid needs at least 2 points, got {n}")
        return cls(tuple(np.linspace(lo, hi, n).tolist()))

    def __len__(self) -> int:
        return len(self.frequencies)

    def __iter__(self):
        return iter(self.frequencies)

    def __getitem__(self, i: int) -> float:
        return self.frequencies[i]

    @property
    def lo(self) -> float:
        return self.frequencies[0]

    @property
    def hi(self) -> float:
        return self.frequencies[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.frequencies, dtype=np.float64)

    def contains(self, lo: float, hi: float) -> bool:
        return self.lo <= lo and hi <= self.hi


@dataclass(frozen=True, eq=False)
class ResponseCurve:
    """Transmission-ratio magnitudes sampled on a grid: ``magnitudes[i, dof]``.

    ``resonant[i]`` marks points where the engine hit a singular boundary system and
    reported the resonance cap instead of a solved value.
    """

    grid: FrequencyGrid
    magnitudes: np.ndarray
    mode: ModeKind
    resonant: np.ndarray = field(default=None)  # type: ignore[assignment]
    source: str = "tmm"

    def __post_init__(self) -> None:
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim == 1:
            mags = mags[:, None]
        if mags.shape[0] != len(self.grid):
            raise ValueError(
                f"magnitudes have {mags.shape[0]} rows for a {len(self.grid)}-point grid"
            )
        object.__setattr__(self, "magnitudes", mags)
        flags = (
            np.zeros(len(self.grid), dtype=bool)
            if self.resonant is None
            else np.asarray(self.resonant, dtype=bool)
        )
        object.__setattr__(self, "resonant", flags)
        object.__setattr__(self, "mode", ModeKind(self.mode))

    @property
    def n_dof(self) -> int:
        return int(self.magnitudes.shape[1])

    @property
    def dof_names(self) -> tuple[str, ...]:
        names = self.mode.dof_names
        return names if len(names) == self.n_dof else tuple(f"dof_{i}" for i in range(self.n_dof))

    def same_as(self, other: ResponseCurve) -> bool:
        """Bit-identical grids, magnitudes and flags."""
        return (
            self.mode is other.mode
            and self.grid == other.grid
            and self.magnitudes.shape == other.magnitudes.shape
            and self.magnitudes.tobytes() == other.magnitudes.tobytes()
            and np.array_equal(self.resonant, other.resonant)
        )

    # -- CSV ---------------------------------------------------------------

    _CSV_HEADER = ("frequency_hz", "mode", "dof", "magnitude", "resonant_flag")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self._CSV_HEADER)
        for i, freq in enumerate(self.grid):
            for j, dof in enumerate(self.dof_names):
                writer.writerow(
                    [repr(freq), self.mode.value, dof, repr(float(self.magnitudes[i, j])), int(self.resonant[i])]
                )
        return buf.getvalue()

    def save_csv(self, path: str | os.PathLike[str]) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_csv(), encoding="utf-8")
        return p

    @classmethod
    def from_csv(cls, text: str) -> ResponseCurve:
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty response CSV")
        mode = ModeKind(rows[0]["mode"])
        freqs: list[float] = []
        dofs: list[str] = []
        values: dict[tuple[float, str], float] = {}
        flags: dict[float, bool] = {}
        for row in rows:
            f = float(row["frequency_hz"])
            if not freqs or freqs[-1] != f:
                freqs.append(f)
            if row["dof"] not in dofs:
                dofs.append(row["dof"])
            values[(f, row["dof"])] = float(row["magnitude"])
            flags[f] = flags.get(f, False) or row["resonant_flag"].strip() in ("1", "true", "True")
        mags = np.array([[values[(f, d)] for d in dofs] for f in freqs])
        return cls(FrequencyGrid(tuple(freqs)), mags, mode, np.array([flags[f] for f in freqs]))
