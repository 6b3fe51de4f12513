"""Design-box helpers: flat bounds, [-1, 1] normalisation and Latin-hypercube sampling."""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import qmc

from .config import DesignBounds, PipeSpec
from .errors import InfeasibleGeometryError
from .geometry import DesignVector, validate_design

logger = logging.getLogger(__name__)

# Cap on resampling rounds before giving up on an infeasible pipe/bounds combination
_MAX_RESAMPLE_ROUNDS = 50


def box(bounds: DesignBounds) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper bounds in the flat [d, w_ring, w_gap] layout."""
    n = bounds.n_inserts
    lower = np.concatenate(
        [np.full(n, bounds.d_min), np.full(n, bounds.w_ring_min), np.full(n, bounds.w_gap_min)]
    )
    upper = np.concatenate(
        [np.full(n, bounds.d_max), np.full(n, bounds.w_ring_max), np.full(n, bounds.w_gap_max)]
    )
    return lower, upper


def normalize(x: np.ndarray, bounds: DesignBounds) -> np.ndarray:
    """Map physical designs onto [-1, 1] per column; zero-width columns map to 0."""
    lower, upper = box(bounds)
    span = np.where(upper > lower, upper - lower, 1.0)
    return 2.0 * (np.asarray(x, dtype=np.float64) - lower) / span - 1.0


def denormalize(z: np.ndarray, bounds: DesignBounds) -> np.ndarray:
    lower, upper = box(bounds)
    span = np.where(upper > lower, upper - lower, 1.0)
    return lower + (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * span


def clamp(x: np.ndarray, bounds: DesignBounds) -> np.ndarray:
    lower, upper = box(bounds)
    return np.clip(np.asarray(x, dtype=np.float64), lower, upper)


def latin_hypercube(n: int, bounds: DesignBounds, rng: np.random.Generator) -> np.ndarray:
    """``n`` space-filling points in the physical design box, shape (n, 3 * n_inserts)."""
    lower, upper = box(bounds)
    sampler = qmc.LatinHypercube(d=lower.size, seed=rng)
    unit = sampler.random(n)
    return qmc.scale(unit, lower, upper)


def sample_designs(
    n: int, pipe: PipeSpec, bounds: DesignBounds, seed: int
) -> list[DesignVector]:
    """Draw ``n`` feasible designs; infeasible draws are replaced by fresh hypercube rows."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    rows = latin_hypercube(n, bounds, rng)
    designs: list[DesignVector | None] = [DesignVector.from_array(r) for r in rows]
    resampled = 0
    for round_number in range(_MAX_RESAMPLE_ROUNDS + 1):
        bad = [
            i
            for i, d in enumerate(designs)
            if d is None or not validate_design(d, pipe, bounds).feasible
        ]
        if not bad:
            break
        if round_number == _MAX_RESAMPLE_ROUNDS:
            raise InfeasibleGeometryError(
                f"could not draw {n} feasible designs after {_MAX_RESAMPLE_ROUNDS} rounds; "
                "check pipe.length against the width bounds"
            )
        resampled += len(bad)
        fresh = latin_hypercube(len(bad), bounds, rng)
        for i, row in zip(bad, fresh, strict=True):
            designs[i] = DesignVector.from_array(row)
    if resampled:
        logger.warning("Resampled %d infeasible designs while drawing %d", resampled, n)
    return [d for d in designs if d is not None]
