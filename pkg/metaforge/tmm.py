"""Transfer Matrix Method engine for a free-free segmented pipe.

Each uniform segment propagates a state vector from its left face to its right face:

    axial      (u, N)             displacement, axial force
    torsional  (theta, T)         twist, torque
    lateral    (v, slope, M, V)   deflection, slope, bending moment, shear force

Axial and torsional segments use the closed-form rod matrices; lateral segments use the
Euler-Bernoulli field matrix built from Krylov functions of ``lambda = beta * w``. All
arithmetic runs in an ``mpmath`` context at the configured decimal precision because the
hyperbolic terms of long lateral segments overflow double precision into cancellation.

Transmission ratio: a unit harmonic end load (force, torque or shear) acts on the excited
end while every other end load is zero. The reduced boundary system gives the excited-end
state, the chain product gives the far-end response, and the ratio divides that response by
the rigid-body response of the same load (``F / (M w^2)``), so it tends to 1 at low
frequency and is unbounded at the free-free natural frequencies.
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Iterable
from dataclasses import dataclass

import mpmath
import numpy as np

from .config import GridConfig, PrecisionConfig
from .curves import FrequencyGrid, ModeKind, ResponseCurve
from .errors import DomainError, MetaforgeError, NumericError
from .geometry import Segment, SegmentChain

logger = logging.getLogger(__name__)

__all__ = [
    "FrequencyGrid",
    "ModeKind",
    "PrecisionConfig",
    "ResponseCurve",
    "TransferMatrix",
    "Transmission",
    "axial_segment_matrix",
    "chain_transfer",
    "frequency_sweep",
    "lateral_segment_matrix",
    "mode_grids",
    "segment_matrix",
    "sweep_all_modes",
    "torsional_segment_matrix",
    "transmission_ratio",
]


@functools.lru_cache(maxsize=8)
def _context(decimal_digits: int) -> mpmath.MPContext:
    """A private mpmath context per precision, so callers never touch the global ``mp``."""
    ctx = mpmath.MPContext()
    ctx.dps = decimal_digits
    return ctx


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    entries: mpmath.matrix
    mode: ModeKind
    frequency: float
    decimal_digits: int

    @property
    def size(self) -> int:
        return int(self.entries.rows)

    @property
    def ctx(self) -> mpmath.MPContext:
        return _context(self.decimal_digits)

    def __getitem__(self, ij: tuple[int, int]):
        return self.entries[ij]

    def det(self):
        return self.ctx.det(self.entries)

    def to_numpy(self) -> np.ndarray:
        """Entries rounded to complex128, for inspection and plotting only."""
        n = self.size
        return np.array(
            [[complex(self.entries[i, j]) for j in range(n)] for i in range(n)], dtype=np.complex128
        )

    def max_relative_difference(self, other: TransferMatrix):
        """Largest entrywise |a - b| / max(|a|, |b|, tiny), evaluated at working precision."""
        ctx = self.ctx
        tiny = ctx.mpf(10) ** (-self.decimal_digits)
        worst = ctx.zero
        for i in range(self.size):
            for j in range(self.size):
                a, b = self.entries[i, j], other.entries[i, j]
                scale = max(abs(a), abs(b), tiny)
                worst = max(worst, abs(a - b) / scale)
        return worst


def _check_frequency(f: float) -> None:
    if not f > 0:
        raise DomainError(f"frequency must be > 0 Hz, got {f!r}")


def _rod_matrix(ctx, modulus, stiffness_section, seg: Segment, f: float):
    """Shared closed form of the axial and torsional 2x2 matrices."""
    w = ctx.mpf(seg.width)
    wave_speed = ctx.sqrt(ctx.mpf(modulus) / ctx.mpf(seg.density))
    omega = 2 * ctx.pi * ctx.mpf(f) * w / wave_speed
    k = ctx.mpf(modulus) * ctx.mpf(stiffness_section) / w
    c, s = ctx.cos(omega), ctx.sin(omega)
    return ctx.matrix([[c, s / (k * omega)], [-k * omega * s, c]])


def axial_segment_matrix(seg: Segment, f: float, prec: PrecisionConfig) -> TransferMatrix:
    _check_frequency(f)
    ctx = _context(prec.decimal_digits)
    entries = _rod_matrix(ctx, seg.youngs, seg.area, seg, f)
    return TransferMatrix(entries, ModeKind.AXIAL, f, prec.decimal_digits)


def torsional_segment_matrix(seg: Segment, f: float, prec: PrecisionConfig) -> TransferMatrix:
    _check_frequency(f)
    ctx = _context(prec.decimal_digits)
    entries = _rod_matrix(ctx, seg.shear, seg.polar_inertia, seg, f)
    return TransferMatrix(entries, ModeKind.TORSIONAL, f, prec.decimal_digits)


def lateral_segment_matrix(seg: Segment, f: float, prec: PrecisionConfig) -> TransferMatrix:
    _check_frequency(f)
    ctx = _context(prec.decimal_digits)
    w = ctx.mpf(seg.width)
    ei = ctx.mpf(seg.youngs) * ctx.mpf(seg.bending_inertia)
    omega = 2 * ctx.pi * ctx.mpf(f)
    beta = ctx.root(ctx.mpf(seg.density) * ctx.mpf(seg.area) * omega**2 / ei, 4)
    lam = beta * w
    if not ctx.isfinite(lam):
        raise NumericError(f"lateral wavenumber is not finite at f={f!r} Hz (w={seg.width!r} m)")

    ch, sh, c, s = ctx.cosh(lam), ctx.sinh(lam), ctx.cos(lam), ctx.sin(lam)
    k_s = (ch + c) / 2
    k_t = (sh + s) / 2
    k_u = (ch - c) / 2
    k_v = (sh - s) / 2

    entries = ctx.matrix(
        [
            [k_s, k_t / beta, k_u / (ei * beta**2), k_v / (ei * beta**3)],
            [beta * k_v, k_s, k_t / (ei * beta), k_u / (ei * beta**2)],
            [ei * beta**2 * k_u, ei * beta * k_v, k_s, k_t / beta],
            [ei * beta**3 * k_t, ei * beta**2 * k_u, beta * k_v, k_s],
        ]
    )
    return TransferMatrix(entries, ModeKind.LATERAL, f, prec.decimal_digits)


_SEGMENT_MATRIX = {
    ModeKind.AXIAL: axial_segment_matrix,
    ModeKind.TORSIONAL: torsional_segment_matrix,
    ModeKind.LATERAL: lateral_segment_matrix,
}


def segment_matrix(seg: Segment, f: float, mode: ModeKind, prec: PrecisionConfig) -> TransferMatrix:
    return _SEGMENT_MATRIX[ModeKind(mode)](seg, f, prec)


def chain_transfer(
    chain: SegmentChain, f: float, mode: ModeKind, prec: PrecisionConfig
) -> TransferMatrix:
    """T_n ... T_2 T_1: maps the excited-end state onto the response-end state."""
    mode = ModeKind(mode)
    total = None
    for seg in chain:
        m = segment_matrix(seg, f, mode, prec)
        if total is not None and total.rows != m.entries.rows:
            raise MetaforgeError("segment matrix dimension mismatch inside one chain")
        total = m.entries if total is None else m.entries * total
    assert total is not None
    return TransferMatrix(total, mode, f, prec.decimal_digits)


@dataclass(frozen=True)
class Transmission:
    magnitudes: tuple[float, ...]
    resonant: bool


def _capped(ctx, value, cap: float) -> tuple[float, bool]:
    magnitude = abs(value)
    if not ctx.isfinite(magnitude) or magnitude >= cap:
        return cap, True
    return float(magnitude), False


def transmission_ratio(
    chain: SegmentChain, f: float, mode: ModeKind, prec: PrecisionConfig
) -> Transmission:
    """Free-free end-to-end transmission per DoF of ``mode`` (see module docstring)."""
    _check_frequency(f)
    mode = ModeKind(mode)
    ctx = _context(prec.decimal_digits)
    t = chain_transfer(chain, f, mode, prec).entries
    omega_sq = (2 * ctx.pi * ctx.mpf(f)) ** 2
    cap = prec.resonance_cap

    if mode is ModeKind.LATERAL:
        rigid = ctx.mpf(chain.mass) * omega_sq
        # Unknowns (v1, slope1); rows 3 and 4 enforce M2 = V2 = 0 with M1 = 0, V1 = 1
        det = t[2, 0] * t[3, 1] - t[2, 1] * t[3, 0]
        if det == 0:
            return Transmission((cap,) * 4, True)
        v1 = (-t[2, 3] * t[3, 1] + t[2, 1] * t[3, 3]) / det
        slope1 = (-t[2, 0] * t[3, 3] + t[2, 3] * t[3, 0]) / det
        v2 = t[0, 0] * v1 + t[0, 1] * slope1 + t[0, 3]
        slope2 = t[1, 0] * v1 + t[1, 1] * slope1 + t[1, 3]
        deflection, res_v = _capped(ctx, v2 * rigid, cap)
        slope, res_s = _capped(ctx, slope2 * rigid * ctx.mpf(chain.total_length), cap)
        resonant = res_v or res_s
        return Transmission((deflection, slope, deflection, slope), resonant)

    inertia = chain.mass if mode is ModeKind.AXIAL else chain.polar_mass_moment
    rigid = ctx.mpf(inertia) * omega_sq
    # Unknown u1; row 2 enforces N2 = 0 with N1 = 1
    if t[1, 0] == 0:
        return Transmission((cap,), True)
    u1 = -t[1, 1] / t[1, 0]
    u2 = t[0, 0] * u1 + t[0, 1]
    magnitude, resonant = _capped(ctx, u2 * rigid, cap)
    return Transmission((magnitude,), resonant)


def frequency_sweep(
    chain: SegmentChain, grid: FrequencyGrid, mode: ModeKind, prec: PrecisionConfig
) -> ResponseCurve:
    """Evaluate the transmission ratio at every grid point; failures become flagged caps."""
    mode = ModeKind(mode)
    n_dof = len(mode.dof_names)
    mags = np.empty((len(grid), n_dof), dtype=np.float64)
    flags = np.zeros(len(grid), dtype=bool)
    for i, f in enumerate(grid):
        try:
            result = transmission_ratio(chain, f, mode, prec)
        except (MetaforgeError, ArithmeticError, ValueError) as exc:
            logger.warning("TMM %s point f=%.6g Hz failed (%s); reporting the cap", mode.value, f, exc)
            result = Transmission((prec.resonance_cap,) * n_dof, True)
        mags[i, :] = result.magnitudes
        flags[i] = result.resonant
    return ResponseCurve(grid, mags, mode, flags)


def mode_grids(grid_cfg: GridConfig) -> dict[ModeKind, FrequencyGrid]:
    """Linear analysis grids per mode family; axial and torsional share one range."""
    shared = FrequencyGrid.linear(grid_cfg.axial_lo, grid_cfg.axial_hi, grid_cfg.n_points)
    return {
        ModeKind.AXIAL: shared,
        ModeKind.TORSIONAL: shared,
        ModeKind.LATERAL: FrequencyGrid.linear(
            grid_cfg.lateral_lo, grid_cfg.lateral_hi, grid_cfg.n_points
        ),
    }


def sweep_all_modes(
    chain: SegmentChain,
    grids: dict[ModeKind, FrequencyGrid],
    prec: PrecisionConfig,
    modes: Iterable[ModeKind] = tuple(ModeKind),
) -> dict[ModeKind, ResponseCurve]:
    return {ModeKind(m): frequency_sweep(chain, grids[ModeKind(m)], m, prec) for m in modes}
