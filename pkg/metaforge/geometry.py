"""Insert layouts on the host pipe: design vectors, segment chains, feasibility and mass.

A design places ``n`` annular inserts on the pipe starting at the excited end, alternating
ring and gap; whatever length is left after the last gap becomes one bare trailing segment.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DesignBounds, PipeSpec
from .errors import BoundsError, InfeasibleGeometryError, NegativeAnnulusError

logger = logging.getLogger(__name__)

__all__ = [
    "DesignBounds",
    "DesignVector",
    "PipeSpec",
    "Segment",
    "SegmentChain",
    "ValidationReport",
    "Violation",
    "build_segments",
    "insert_mass",
    "radius_profile",
    "validate_design",
]

# Relative slack used for the total-length and annulus comparisons
_LENGTH_RTOL = 1e-12


@dataclass(frozen=True)
class DesignVector:
    """Per-insert outer diameter, insert width and following gap width, in meters."""

    d: tuple[float, ...]
    w_ring: tuple[float, ...]
    w_gap: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "d", tuple(float(v) for v in self.d))
        object.__setattr__(self, "w_ring", tuple(float(v) for v in self.w_ring))
        object.__setattr__(self, "w_gap", tuple(float(v) for v in self.w_gap))
        if not (len(self.d) == len(self.w_ring) == len(self.w_gap)):
            raise ValueError(
                f"d, w_ring and w_gap must have equal length, got "
                f"{len(self.d)}, {len(self.w_ring)}, {len(self.w_gap)}"
            )
        if not self.d:
            raise ValueError("a design needs at least one insert")

    @property
    def n_inserts(self) -> int:
        return len(self.d)

    @property
    def occupied_length(self) -> float:
        return math.fsum(self.w_ring) + math.fsum(self.w_gap)

    # Flat layout [d_1..d_n, w_ring_1..w_ring_n, w_gap_1..w_gap_n] used by samplers and networks
    def to_array(self) -> np.ndarray:
        return np.array(self.d + self.w_ring + self.w_gap, dtype=np.float64)

    @classmethod
    def from_array(cls, x: Sequence[float] | np.ndarray) -> DesignVector:
        flat = np.asarray(x, dtype=np.float64).ravel()
        if flat.size % 3:
            raise ValueError(f"flat design length must be a multiple of 3, got {flat.size}")
        n = flat.size // 3
        return cls(tuple(flat[:n]), tuple(flat[n : 2 * n]), tuple(flat[2 * n :]))

    @classmethod
    def uniform(cls, pipe: PipeSpec, bounds: DesignBounds | None = None) -> DesignVector:
        """Inserts flush with the pipe: every segment shares the bare cross-section."""
        b = bounds or DesignBounds()
        n = b.n_inserts
        return cls((pipe.outer_diameter,) * n, (b.w_ring_min,) * n, (b.w_gap_min,) * n)

    def to_json(self) -> dict[str, list[float]]:
        return {"d": list(self.d), "w_ring": list(self.w_ring), "w_gap": list(self.w_gap)}

    @classmethod
    def from_json(cls, data: dict) -> DesignVector:
        missing = [k for k in ("d", "w_ring", "w_gap") if k not in data]
        if missing:
            raise ValueError(f"design JSON missing keys: {missing}")
        return cls(tuple(data["d"]), tuple(data["w_ring"]), tuple(data["w_gap"]))

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> DesignVector:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str | os.PathLike[str]) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return p


@dataclass(frozen=True)
class Segment:
    """One uniform cylindrical sub-body of the pipe."""

    width: float
    area: float
    polar_inertia: float
    bending_inertia: float
    youngs: float
    shear: float
    density: float
    outer_diameter: float = 0.0

    @classmethod
    def annulus(cls, width: float, d_out: float, d_in: float, pipe: PipeSpec) -> Segment:
        if width <= 0:
            raise ValueError(f"segment width must be > 0, got {width!r}")
        if not d_out > d_in > 0:
            raise ValueError(f"annulus needs d_out > d_in > 0, got {d_out!r}, {d_in!r}")
        area = math.pi / 4.0 * (d_out**2 - d_in**2)
        bending = math.pi / 64.0 * (d_out**4 - d_in**4)
        return cls(
            width=width,
            area=area,
            polar_inertia=2.0 * bending,
            bending_inertia=bending,
            youngs=pipe.youngs,
            shear=pipe.shear,
            density=pipe.density,
            outer_diameter=d_out,
        )

    @property
    def mass(self) -> float:
        return self.density * self.area * self.width

    @property
    def polar_mass_moment(self) -> float:
        return self.density * self.polar_inertia * self.width


@dataclass(frozen=True)
class SegmentChain:
    """Segments ordered from the excited end to the response end."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("a segment chain needs at least one segment")

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def total_length(self) -> float:
        return math.fsum(s.width for s in self.segments)

    @property
    def mass(self) -> float:
        return math.fsum(s.mass for s in self.segments)

    @property
    def polar_mass_moment(self) -> float:
        return math.fsum(s.polar_mass_moment for s in self.segments)

    @classmethod
    def uniform(cls, pipe: PipeSpec, pieces: int = 1) -> SegmentChain:
        """Bare pipe split into ``pieces`` equal segments."""
        width = pipe.length / pieces
        seg = Segment.annulus(width, pipe.outer_diameter, pipe.inner_diameter, pipe)
        return cls((seg,) * pieces)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    variable: str  # "d", "w_ring", "w_gap" or "length"
    index: int  # insert index (0-based); -1 for the total-length check
    value: float
    lower: float
    upper: float

    def describe(self) -> str:
        if self.variable == "length":
            return f"inserts and gaps occupy {self.value:.6g} m, pipe is {self.upper:.6g} m"
        return (
            f"{self.variable}[{self.index}] = {self.value:.6g} outside "
            f"[{self.lower:.6g}, {self.upper:.6g}]"
        )


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    @property
    def bound_violations(self) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.variable != "length")

    @property
    def length_violation(self) -> Violation | None:
        return next((v for v in self.violations if v.variable == "length"), None)

    def to_json(self) -> dict:
        return {
            "feasible": self.feasible,
            "violations": [
                {
                    "variable": v.variable,
                    "index": v.index,
                    "value": v.value,
                    "lower": v.lower,
                    "upper": v.upper,
                    "message": v.describe(),
                }
                for v in self.violations
            ],
        }

    def raise_if_infeasible(self) -> None:
        """Raise the length error first, then the bounds error listing offending indices."""
        length = self.length_violation
        if length is not None:
            raise InfeasibleGeometryError(length.describe())
        bounds = self.bound_violations
        if bounds:
            raise BoundsError(
                "design outside bounds: " + "; ".join(v.describe() for v in bounds),
                indices=sorted({v.index for v in bounds}),
            )


def _check_box(
    name: str, values: Iterable[float], lower: float, upper: float
) -> list[Violation]:
    out = []
    for i, value in enumerate(values):
        if not (math.isfinite(value) and lower <= value <= upper):
            out.append(Violation(name, i, value, lower, upper))
    return out


def validate_design(
    design: DesignVector, pipe: PipeSpec, bounds: DesignBounds | None = None
) -> ValidationReport:
    """Collect every bound violation plus the total-length check; empty report means feasible."""
    b = bounds or DesignBounds()
    violations: list[Violation] = []
    violations += _check_box("d", design.d, b.d_min, b.d_max)
    violations += _check_box("w_ring", design.w_ring, b.w_ring_min, b.w_ring_max)
    violations += _check_box("w_gap", design.w_gap, b.w_gap_min, b.w_gap_max)
    occupied = design.occupied_length
    if occupied > pipe.length * (1.0 + _LENGTH_RTOL):
        violations.append(Violation("length", -1, occupied, 0.0, pipe.length))
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# Chain construction and mass
# ---------------------------------------------------------------------------


def build_segments(
    design: DesignVector, pipe: PipeSpec, bounds: DesignBounds | None = None
) -> SegmentChain:
    """Expand a design into ring, gap, ..., ring, gap, trailing-bare segments.

    The total-length check always runs. Bound checks run when ``bounds`` is given; callers
    that build chains for off-box variants (single inserts, wide gaps) pass ``None``.
    """
    occupied = design.occupied_length
    if occupied > pipe.length * (1.0 + _LENGTH_RTOL):
        raise InfeasibleGeometryError(
            f"inserts and gaps occupy {occupied:.6g} m, pipe is {pipe.length:.6g} m"
        )
    if bounds is not None:
        validate_design(design, pipe, bounds).raise_if_infeasible()

    segments: list[Segment] = []
    for d_i, w_ring, w_gap in zip(design.d, design.w_ring, design.w_gap, strict=True):
        if d_i < pipe.outer_diameter * (1.0 - _LENGTH_RTOL):
            raise NegativeAnnulusError(
                f"insert diameter {d_i:.6g} m is below the pipe's {pipe.outer_diameter:.6g} m"
            )
        ring_d = max(d_i, pipe.outer_diameter)
        segments.append(Segment.annulus(w_ring, ring_d, pipe.inner_diameter, pipe))
        segments.append(
            Segment.annulus(w_gap, pipe.outer_diameter, pipe.inner_diameter, pipe)
        )

    remainder = pipe.length - occupied
    if remainder > pipe.length * _LENGTH_RTOL:
        segments.append(
            Segment.annulus(remainder, pipe.outer_diameter, pipe.inner_diameter, pipe)
        )
    return SegmentChain(tuple(segments))


def insert_mass(design: DesignVector, pipe: PipeSpec) -> float:
    """Added annular mass of the inserts in kg; the pipe body itself is excluded."""
    terms = []
    for i, (d_i, w_ring) in enumerate(zip(design.d, design.w_ring, strict=True)):
        if d_i < pipe.outer_diameter * (1.0 - _LENGTH_RTOL):
            raise NegativeAnnulusError(
                f"d[{i}] = {d_i:.6g} m is below the pipe's outer diameter {pipe.outer_diameter:.6g} m"
            )
        terms.append(math.pi / 4.0 * max(d_i**2 - pipe.outer_diameter**2, 0.0) * w_ring)
    return pipe.density * math.fsum(terms)


def radius_profile(chain: SegmentChain) -> list[tuple[float, float, float]]:
    """Stepwise outer-diameter profile ``(x_start, x_end, outer_diameter)`` along the axis."""
    profile = []
    x = 0.0
    for seg in chain:
        profile.append((x, x + seg.width, seg.outer_diameter))
        x += seg.width
    return profile
