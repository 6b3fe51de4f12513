"""Particle swarm optimisation and the two design problems built on it.

- ``maximize_band``: widen the largest non-resonant range of every mode family at once.
- ``min_mass_for_band``: lightest insert layout with no peaks inside a requested band.

Both search on the surrogate suite. Every returned design is re-checked with the TMM, and
only that check decides the ``feasible`` flag.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import multiprocessing
import multiprocessing.pool
import os
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DesignBounds, ObjectiveConfig, PipeSpec, PrecisionConfig, PsoConfig
from .curves import FrequencyGrid, ModeKind, ResponseCurve
from .errors import DomainError
from .geometry import DesignVector, build_segments, insert_mass, validate_design
from .response import Band, count_peaks_in_band, detect_peaks, largest_nonresonant_range, peak_mask
from .sampling import box, clamp, sample_designs
from .surrogate import CHANNEL_SLICES, SurrogateSuite, predict_log10
from .tmm import sweep_all_modes

logger = logging.getLogger(__name__)

# Attempts at redrawing a particle whose objective came back non-finite
_REINIT_ATTEMPTS = 3


# ---------------------------------------------------------------------------
# PSO engine
# ---------------------------------------------------------------------------


@dataclass
class PsoResult:
    best_x: np.ndarray
    best_value: float
    trace: list[float]
    evaluations: int
    reinitialized: int = 0


def _evaluate(
    objective: Callable,
    x: np.ndarray,
    vectorized: bool,
    pool: multiprocessing.pool.Pool | None,
) -> np.ndarray:
    if vectorized:
        return np.asarray(objective(x), dtype=np.float64).reshape(x.shape[0])
    if pool is not None:
        return np.array(pool.map(objective, list(x)), dtype=np.float64)
    return np.array([objective(row) for row in x], dtype=np.float64)


def pso_minimize(
    objective: Callable,
    lower: Sequence[float] | np.ndarray,
    upper: Sequence[float] | np.ndarray,
    cfg: PsoConfig,
    vectorized: bool = False,
    processes: int = 1,
) -> PsoResult:
    """Global-best PSO over the box ``[lower, upper]``.

    ``objective`` maps one position to a float, or the whole (S, D) swarm to (S,) values when
    ``vectorized`` is set. Positions leaving the box are clamped to its face and the matching
    velocity component is zeroed. A particle whose value is non-finite is redrawn uniformly.
    With ``processes > 1`` a non-vectorised objective is mapped over a worker pool; it must
    then be picklable.
    """
    lb = np.asarray(lower, dtype=np.float64)
    ub = np.asarray(upper, dtype=np.float64)
    if lb.shape != ub.shape or lb.ndim != 1:
        raise DomainError("lower and upper bounds must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub)) and np.all(ub >= lb)):
        raise DomainError("PSO bounds must be finite with upper >= lower")

    rng = np.random.default_rng(cfg.seed)
    n_particles, n_dim = cfg.population, lb.size
    span = ub - lb
    vmax = cfg.velocity_clamp * span

    pool = multiprocessing.Pool(processes) if processes > 1 and not vectorized else None
    try:
        x = lb + rng.random((n_particles, n_dim)) * span
        v = rng.uniform(-1.0, 1.0, (n_particles, n_dim)) * vmax
        fx = _evaluate(objective, x, vectorized, pool)
        evaluations = n_particles
        reinitialized = 0

        def repair(x: np.ndarray, v: np.ndarray, fx: np.ndarray) -> int:
            nonlocal evaluations
            count = 0
            for _ in range(_REINIT_ATTEMPTS):
                bad = np.flatnonzero(~np.isfinite(fx))
                if bad.size == 0:
                    break
                count += bad.size
                x[bad] = lb + rng.random((bad.size, n_dim)) * span
                v[bad] = 0.0
                fx[bad] = _evaluate(objective, x[bad], vectorized, pool)
                evaluations += bad.size
            fx[~np.isfinite(fx)] = np.inf
            return count

        reinitialized += repair(x, v, fx)
        p, fp = x.copy(), fx.copy()
        i_min = int(np.argmin(fp))
        g, fg = p[i_min].copy(), float(fp[i_min])
        trace = [fg]

        for it in range(1, cfg.max_iterations + 1):
            rp = rng.random((n_particles, n_dim))
            rg = rng.random((n_particles, n_dim))
            v = cfg.inertia * v + cfg.cognitive * rp * (p - x) + cfg.social * rg * (g - x)
            v = np.clip(v, -vmax, vmax)
            x = x + v

            outside = (x < lb) | (x > ub)
            x = np.clip(x, lb, ub)
            v[outside] = 0.0

            fx = _evaluate(objective, x, vectorized, pool)
            evaluations += n_particles
            reinitialized += repair(x, v, fx)

            improved = fx < fp
            p[improved] = x[improved]
            fp[improved] = fx[improved]
            i_min = int(np.argmin(fp))
            if fp[i_min] < fg:
                g, fg = p[i_min].copy(), float(fp[i_min])
            trace.append(fg)
            log = logger.info if it % 10 == 0 else logger.debug
            log("PSO iteration %d: best %.6g", it, fg)
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    if reinitialized:
        logger.warning("PSO redrew %d particle(s) after non-finite objective values", reinitialized)
    logger.info(
        "PSO finished: best %.6g after %d iterations (%d evaluations)",
        fg,
        cfg.max_iterations,
        evaluations,
    )
    return PsoResult(g, fg, trace, evaluations, reinitialized)


# ---------------------------------------------------------------------------
# TMM verification
# ---------------------------------------------------------------------------


def _known_modes(grids: dict[ModeKind, FrequencyGrid], modes: Iterable[ModeKind]) -> list[ModeKind]:
    return [ModeKind(m) for m in modes if ModeKind(m) in grids]


def applicable_modes(
    band: Band, grids: dict[ModeKind, FrequencyGrid], modes: Iterable[ModeKind] | None = None
) -> list[ModeKind]:
    """Mode families whose analysis range fully contains ``band``."""
    candidates = _known_modes(grids, modes if modes is not None else tuple(ModeKind))
    found = [m for m in candidates if grids[m].contains(band.lo, band.hi)]
    if not found:
        raise DomainError(
            f"band ({band.lo:g}, {band.hi:g}) Hz is outside every analysis range of "
            f"{[m.value for m in candidates]}"
        )
    return found


def _enclosing_range(curve: ResponseCurve, peaks: tuple[int, ...], band: Band) -> Band | None:
    """Peak-free interval around ``band``, bounded by the neighbouring peaks or the grid ends."""
    freqs = curve.grid.frequencies
    lo, hi = freqs[0], freqs[-1]
    for i in peaks:
        f = freqs[i]
        if band.lo <= f <= band.hi:
            return None
        if f < band.lo:
            lo = max(lo, f)
        else:
            hi = min(hi, f)
    return Band(lo, hi)


@dataclass
class ModeVerification:
    peaks_in_band: int
    enclosing_range: Band | None
    largest_range: Band

    @property
    def clear(self) -> bool:
        return self.peaks_in_band == 0

    def to_json(self) -> dict:
        return {
            "peaks_in_band": self.peaks_in_band,
            "clear": self.clear,
            "enclosing_range": self.enclosing_range.to_json() if self.enclosing_range else None,
            "largest_range": self.largest_range.to_json(),
        }


@dataclass
class BandVerification:
    """TMM re-check of one design against one band."""

    band: Band
    modes: dict[ModeKind, ModeVerification]
    mass: float
    geometry_feasible: bool = True
    oracle: str = "tmm"

    @property
    def feasible(self) -> bool:
        return self.geometry_feasible and all(v.clear for v in self.modes.values())

    def to_json(self) -> dict:
        return {
            "band": self.band.to_json(),
            "oracle": self.oracle,
            "feasible": self.feasible,
            "geometry_feasible": self.geometry_feasible,
            "mass_kg": self.mass,
            "modes": {m.value: v.to_json() for m, v in self.modes.items()},
        }


def verify_band(
    design: DesignVector,
    band: Band,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    grids: dict[ModeKind, FrequencyGrid],
    modes: Iterable[ModeKind] | None = None,
    bounds: DesignBounds | None = None,
) -> BandVerification:
    """Sweep ``design`` with the TMM and count peaks inside ``band`` for each applicable mode."""
    checked = applicable_modes(band, grids, modes)
    geometry_ok = validate_design(design, pipe, bounds).feasible
    curves = sweep_all_modes(build_segments(design, pipe), grids, prec, checked)
    results = {}
    for mode in checked:
        curve = curves[mode]
        peaks = detect_peaks(curve)
        results[mode] = ModeVerification(
            peaks_in_band=count_peaks_in_band(curve, band, peaks),
            enclosing_range=_enclosing_range(curve, peaks, band),
            largest_range=largest_nonresonant_range(curve, peaks),
        )
    return BandVerification(band, results, insert_mass(design, pipe), geometry_ok)


def verified_ranges(
    design: DesignVector,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    grids: dict[ModeKind, FrequencyGrid],
) -> dict[ModeKind, Band]:
    curves = sweep_all_modes(build_segments(design, pipe), grids, prec)
    return {m: largest_nonresonant_range(c) for m, c in curves.items()}


# ---------------------------------------------------------------------------
# Surrogate-side scalar quantities
# ---------------------------------------------------------------------------


def _surrogate_curve(suite: SurrogateSuite, log_row: np.ndarray, mode: ModeKind) -> ResponseCurve:
    # log10 is monotone, so peaks of the log curve are the peaks of the magnitude curve
    return ResponseCurve(suite.grids[mode], log_row[:, CHANNEL_SLICES[mode]], mode, source="surrogate")


def _masses(x: np.ndarray, pipe: PipeSpec, n: int) -> np.ndarray:
    d, w_ring = x[:, :n], x[:, n : 2 * n]
    annulus = np.maximum(d**2 - pipe.outer_diameter**2, 0.0)
    return pipe.density * math.pi / 4.0 * np.sum(annulus * w_ring, axis=1)


def _length_excess(x: np.ndarray, pipe: PipeSpec, n: int) -> np.ndarray:
    occupied = x[:, n : 3 * n].sum(axis=1)
    return np.maximum(occupied - pipe.length, 0.0) / pipe.length


def _count_in_band(mask: np.ndarray, freqs: np.ndarray, band: Band) -> int:
    return int(np.count_nonzero(mask & (freqs >= band.lo) & (freqs <= band.hi)))


# ---------------------------------------------------------------------------
# Design results
# ---------------------------------------------------------------------------


@dataclass
class DesignResult:
    design: DesignVector
    objective: float
    residuals: dict[str, float]
    mass: float
    verified_ranges: dict[ModeKind, Band]
    feasible: bool
    evaluations: int
    trace: list[float] = field(default_factory=list)
    verification: BandVerification | None = None

    def to_json(self) -> dict:
        out = {
            "design": self.design.to_json(),
            "objective": self.objective,
            "objective_oracle": "surrogate",
            "residuals": self.residuals,
            "mass_kg": self.mass,
            "verified_ranges": {m.value: b.to_json() for m, b in self.verified_ranges.items()},
            "verified_oracle": "tmm",
            "feasible": self.feasible,
            "evaluations": self.evaluations,
        }
        if self.verification is not None:
            out["verification"] = self.verification.to_json()
        return out


def _omega_c(objective_cfg: ObjectiveConfig) -> dict[ModeKind, float]:
    return {
        ModeKind.AXIAL: objective_cfg.omega_c_axial,
        ModeKind.TORSIONAL: objective_cfg.omega_c_torsional,
        ModeKind.LATERAL: objective_cfg.omega_c_lateral,
    }


def band_objective(
    suite: SurrogateSuite, pipe: PipeSpec, objective_cfg: ObjectiveConfig, penalty: float
) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised negative aggregate range with quadratic penalties, for ``pso_minimize``.

    Each mode's largest non-resonant range is divided by its analysis-range width; shortfalls
    below the per-mode threshold are penalised on the same scale.
    """
    omega_c = _omega_c(objective_cfg)
    n = suite.bounds.n_inserts

    def objective(x: np.ndarray) -> np.ndarray:
        log_mags = predict_log10(suite, x)
        values = np.empty(x.shape[0], dtype=np.float64)
        for k in range(x.shape[0]):
            total = 0.0
            shortfall = 0.0
            for mode in ModeKind:
                grid = suite.grids[mode]
                width = grid.hi - grid.lo
                r = largest_nonresonant_range(_surrogate_curve(suite, log_mags[k], mode)).width
                total += r / width
                shortfall += (max(0.0, omega_c[mode] - r) / width) ** 2
            values[k] = -total + penalty * shortfall
        return values + penalty * _length_excess(x, pipe, n) ** 2

    return objective


def maximize_band(
    suite: SurrogateSuite,
    cfg: PsoConfig,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    objective_cfg: ObjectiveConfig | None = None,
) -> DesignResult:
    """Forward design: widest aggregate non-resonant ranges, TMM-verified."""
    obj_cfg = objective_cfg or ObjectiveConfig()
    lower, upper = box(suite.bounds)
    run = pso_minimize(
        band_objective(suite, pipe, obj_cfg, cfg.penalty), lower, upper, cfg, vectorized=True
    )
    design = DesignVector.from_array(clamp(run.best_x, suite.bounds))
    ranges = verified_ranges(design, pipe, prec, suite.grids)
    omega_c = _omega_c(obj_cfg)
    residuals = {m.value: max(0.0, omega_c[m] - ranges[m].width) for m in ModeKind}
    feasible = validate_design(design, pipe, suite.bounds).feasible and not any(residuals.values())
    if not feasible:
        logger.warning("Best band design misses a range threshold after TMM check: %s", residuals)
    logger.info(
        "TMM-verified ranges: %s",
        {m.value: f"{b.lo:.1f}-{b.hi:.1f} Hz" for m, b in ranges.items()},
    )
    return DesignResult(
        design=design,
        objective=run.best_value,
        residuals=residuals,
        mass=insert_mass(design, pipe),
        verified_ranges=ranges,
        feasible=feasible,
        evaluations=run.evaluations,
        trace=run.trace,
    )


def mass_objective(
    suite: SurrogateSuite, pipe: PipeSpec, band: Band, modes: list[ModeKind], penalty: float
) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised insert mass plus ``penalty * h**2`` for surrogate peaks inside ``band``."""
    n = suite.bounds.n_inserts
    freqs = {m: suite.grids[m].as_array() for m in modes}

    def objective(x: np.ndarray) -> np.ndarray:
        log_mags = predict_log10(suite, x)
        h = np.zeros(x.shape[0], dtype=np.float64)
        for k in range(x.shape[0]):
            for mode in modes:
                mask = peak_mask(log_mags[k][:, CHANNEL_SLICES[mode]])
                h[k] += _count_in_band(mask, freqs[mode], band)
        return _masses(x, pipe, n) + penalty * h**2 + penalty * _length_excess(x, pipe, n) ** 2

    return objective


def min_mass_for_band(
    suite: SurrogateSuite,
    band: Band,
    cfg: PsoConfig,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    modes: Iterable[ModeKind] | None = None,
) -> DesignResult:
    """Lightest design with no peaks inside ``band`` for each mode whose range contains it."""
    checked = applicable_modes(band, suite.grids, modes)
    lower, upper = box(suite.bounds)
    run = pso_minimize(
        mass_objective(suite, pipe, band, checked, cfg.penalty), lower, upper, cfg, vectorized=True
    )
    design = DesignVector.from_array(clamp(run.best_x, suite.bounds))
    verification = verify_band(design, band, pipe, prec, suite.grids, checked, suite.bounds)
    residuals = {m.value: float(v.peaks_in_band) for m, v in verification.modes.items()}
    logger.info(
        "Band %.0f-%.0f Hz: mass %.2f kg, TMM peaks in band %s",
        band.lo,
        band.hi,
        verification.mass,
        residuals,
    )
    return DesignResult(
        design=design,
        objective=run.best_value,
        residuals=residuals,
        mass=verification.mass,
        verified_ranges={m: v.largest_range for m, v in verification.modes.items()},
        feasible=verification.feasible,
        evaluations=run.evaluations,
        trace=run.trace,
        verification=verification,
    )


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class Baseline:
    designs: list[DesignVector]
    ranges: list[dict[ModeKind, Band]]

    def mean_width(self, mode: ModeKind) -> float:
        return float(np.mean([r[ModeKind(mode)].width for r in self.ranges]))

    def to_json(self) -> dict:
        return {
            "n_designs": len(self.designs),
            "oracle": "tmm",
            "mean_range_hz": {m.value: self.mean_width(m) for m in ModeKind},
        }


def random_baseline(
    k: int,
    pipe: PipeSpec,
    bounds: DesignBounds,
    grids: dict[ModeKind, FrequencyGrid],
    prec: PrecisionConfig,
    seed: int,
) -> Baseline:
    """TMM-evaluated largest ranges of ``k`` random feasible designs."""
    designs = sample_designs(k, pipe, bounds, seed)
    ranges = [verified_ranges(d, pipe, prec, grids) for d in designs]
    baseline = Baseline(designs, ranges)
    logger.info("Random baseline over %d designs: %s", k, baseline.to_json()["mean_range_hz"])
    return baseline


# ---------------------------------------------------------------------------
# Inverse dataset
# ---------------------------------------------------------------------------


def band_plan(widths: Sequence[float], centers_per_width: int, grid: FrequencyGrid) -> list[Band]:
    """Evenly spaced bands per width, every band inside ``grid``'s range."""
    plan = []
    for width in widths:
        if width >= grid.hi - grid.lo:
            logger.warning("Band width %g Hz does not fit the %g-%g Hz range; skipped", width, grid.lo, grid.hi)
            continue
        for lo in np.linspace(grid.lo, grid.hi - width, centers_per_width):
            lo = max(float(lo), grid.lo)
            plan.append(Band(lo, min(lo + width, grid.hi)))
    return plan


@dataclass(eq=False)
class InverseDataset:
    """Mass-minimal designs (N, 30) and their bands (N, 2); every row is TMM-verified."""

    x: np.ndarray
    y: np.ndarray
    mass: np.ndarray
    verified: np.ndarray

    _HEADER_TAIL = ("omega_lo", "omega_hi", "mass_kg", "verified")

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 2)
        self.mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        self.verified = np.asarray(self.verified, dtype=bool).reshape(-1)
        n = self.x.shape[0]
        if not (self.y.shape[0] == self.mass.size == self.verified.size == n):
            raise ValueError("inverse dataset columns have different lengths")
        if not np.all(self.verified):
            raise ValueError(f"rows {np.flatnonzero(~self.verified).tolist()} are not TMM-verified")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @classmethod
    def empty(cls, n_vars: int) -> InverseDataset:
        return cls(np.empty((0, n_vars)), np.empty((0, 2)), np.empty(0), np.empty(0, dtype=bool))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x_{i + 1}" for i in range(self.x.shape[1])] + list(self._HEADER_TAIL))
        for xi, yi, mi, vi in zip(self.x, self.y, self.mass, self.verified, strict=True):
            writer.writerow([repr(float(v)) for v in (*xi, *yi, mi)] + [int(vi)])
        return buf.getvalue()

    def save(self, path: str | os.PathLike[str]) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_csv(), encoding="utf-8")
        return p

    @classmethod
    def from_csv(cls, text: str) -> InverseDataset:
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        n_vars = len(header) - len(cls._HEADER_TAIL)
        rows = [r for r in reader if r]
        if not rows:
            return cls.empty(n_vars)
        values = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
        flags = np.array([r[-1].strip() in ("1", "true", "True") for r in rows])
        return cls(values[:, :n_vars], values[:, n_vars : n_vars + 2], values[:, n_vars + 2], flags)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> InverseDataset:
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def generate_inverse_dataset(
    suite: SurrogateSuite,
    plan: Sequence[Band],
    cfg: PsoConfig,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    modes: Iterable[ModeKind] = (ModeKind.LATERAL,),
) -> InverseDataset:
    """One mass-minimal design per planned band; entries failing the TMM check are dropped."""
    modes = tuple(modes)
    xs, ys, masses = [], [], []
    dropped = 0
    for i, band in enumerate(plan):
        result = min_mass_for_band(
            suite, band, dataclasses.replace(cfg, seed=cfg.seed + i), pipe, prec, modes
        )
        if not result.feasible:
            dropped += 1
            logger.warning(
                "Dropping band %.1f-%.1f Hz: TMM residuals %s", band.lo, band.hi, result.residuals
            )
            continue
        xs.append(result.design.to_array())
        ys.append((band.lo, band.hi))
        masses.append(result.mass)
        logger.info("Inverse sample %d/%d done (%.2f kg)", i + 1, len(plan), result.mass)
    logger.info("Inverse dataset: %d verified rows, %d dropped", len(xs), dropped)
    if not xs:
        return InverseDataset.empty(3 * suite.bounds.n_inserts)
    return InverseDataset(np.stack(xs), np.array(ys), np.array(masses), np.ones(len(xs), dtype=bool))
