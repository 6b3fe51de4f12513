"""Tests for the particle swarm engine, TMM verification and the design problems."""

import logging
from unittest.mock import MagicMock

import numpy as np
import pytest

from metaforge import optimize
from metaforge.config import (
    DesignBounds,
    GridConfig,
    ObjectiveConfig,
    PipeSpec,
    PrecisionConfig,
    PsoConfig,
    TrainConfig,
)
from metaforge.curves import FrequencyGrid, ModeKind
from metaforge.errors import DomainError
from metaforge.geometry import DesignVector, insert_mass
from metaforge.optimize import (
    InverseDataset,
    applicable_modes,
    band_objective,
    band_plan,
    generate_inverse_dataset,
    mass_objective,
    maximize_band,
    min_mass_for_band,
    pso_minimize,
    random_baseline,
    verify_band,
)
from metaforge.response import Band
from metaforge.sampling import box
from metaforge.surrogate import N_CHANNELS, Dataset, train_suite
from metaforge.tmm import mode_grids

PIPE = PipeSpec()
BOUNDS = DesignBounds()
LOW_PREC = PrecisionConfig(decimal_digits=30)
SMALL_GRID = GridConfig(lateral_hi=2000.0, n_points=5)


def _shifted_square(x: np.ndarray) -> float:
    return float((x[0] - 2.0) ** 2)


def _sphere(x: np.ndarray) -> np.ndarray:
    return np.sum(x**2, axis=1)


def _monotone_suite():
    """Suite whose predictions rise with frequency for every design, so no surrogate peaks."""
    grids = mode_grids(SMALL_GRID)
    x = np.random.default_rng(0).uniform(-1.0, 1.0, size=(10, 30))
    ramp = 0.1 * np.arange(SMALL_GRID.n_points, dtype=float)
    targets = np.broadcast_to(ramp[None, :, None], (10, SMALL_GRID.n_points, N_CHANNELS)).copy()
    data = Dataset(x, targets, BOUNDS, grids)
    return train_suite(data, TrainConfig(max_iterations=2, batch_size=8, hidden_units=8))


def _small_pso(**overrides) -> PsoConfig:
    values = {"population": 20, "max_iterations": 30, "seed": 0}
    values.update(overrides)
    return PsoConfig(**values)


class TestPso:
    def test_one_dimensional_quadratic(self):
        result = pso_minimize(_shifted_square, [-5.0], [5.0], _small_pso())
        assert abs(result.best_x[0] - 2.0) < 1e-3
        assert result.evaluations == 20 * 31

    def test_trace_is_monotone(self):
        result = pso_minimize(_sphere, [-5.0] * 5, [5.0] * 5, _small_pso(), vectorized=True)
        assert len(result.trace) == 31
        assert all(b <= a for a, b in zip(result.trace, result.trace[1:]))
        assert result.best_value == result.trace[-1]

    def test_same_seed_same_run(self):
        a = pso_minimize(_sphere, [-5.0] * 4, [5.0] * 4, _small_pso(), vectorized=True)
        b = pso_minimize(_sphere, [-5.0] * 4, [5.0] * 4, _small_pso(), vectorized=True)
        assert a.trace == b.trace
        np.testing.assert_array_equal(a.best_x, b.best_x)

    def test_positions_stay_in_box(self):
        seen = []

        def objective(x):
            seen.append(x.copy())
            return -np.sum(x, axis=1)

        pso_minimize(objective, [0.0, -1.0], [1.0, 2.0], _small_pso(), vectorized=True)
        everything = np.vstack(seen)
        assert np.all(everything >= [0.0, -1.0]) and np.all(everything <= [1.0, 2.0])

    def test_non_finite_values_are_redrawn(self):
        def objective(x):
            return np.where(x[:, 0] > 0.0, np.nan, x[:, 0] ** 2)

        result = pso_minimize(objective, [-1.0], [1.0], _small_pso(), vectorized=True)
        assert result.reinitialized > 0
        assert np.isfinite(result.best_value)

    def test_all_non_finite_gives_infinity(self):
        result = pso_minimize(
            lambda x: np.full(x.shape[0], np.nan), [0.0], [1.0], _small_pso(max_iterations=3), vectorized=True
        )
        assert result.best_value == np.inf

    def test_worker_pool_matches_serial(self):
        cfg = _small_pso(max_iterations=5)
        serial = pso_minimize(_shifted_square, [-5.0], [5.0], cfg)
        pooled = pso_minimize(_shifted_square, [-5.0], [5.0], cfg, processes=2)
        assert serial.trace == pooled.trace

    def test_bad_bounds(self):
        with pytest.raises(DomainError):
            pso_minimize(_shifted_square, [1.0], [0.0], _small_pso())
        with pytest.raises(DomainError):
            pso_minimize(_shifted_square, [0.0, 0.0], [1.0], _small_pso())

    def test_progress_logged_every_ten_iterations(self, caplog):
        with caplog.at_level(logging.INFO, logger="metaforge.optimize"):
            pso_minimize(_sphere, [-1.0], [1.0], _small_pso(), vectorized=True)
        iterations = [r.getMessage() for r in caplog.records if "PSO iteration" in r.getMessage()]
        assert len(iterations) == 3

    @pytest.mark.slow
    def test_sphere_thirty_dimensions(self):
        best = [
            pso_minimize(_sphere, [-5.0] * 30, [5.0] * 30, PsoConfig(seed=s), vectorized=True).best_value
            for s in range(5)
        ]
        assert float(np.median(best)) < 0.1


class TestVerification:
    def setup_method(self, _method=None):
        self.grids = mode_grids(GridConfig())
        self.design = DesignVector.uniform(PIPE, BOUNDS)

    def test_applicable_modes(self):
        assert applicable_modes(Band(6500.0, 7000.0), self.grids) == [ModeKind.LATERAL]
        assert applicable_modes(Band(100.0, 700.0), self.grids) == list(ModeKind)
        assert applicable_modes(Band(100.0, 700.0), self.grids, [ModeKind.AXIAL]) == [ModeKind.AXIAL]

    def test_band_outside_every_range(self):
        with pytest.raises(DomainError):
            applicable_modes(Band(20000.0, 21000.0), self.grids)
        with pytest.raises(DomainError):
            applicable_modes(Band(6500.0, 7000.0), self.grids, [ModeKind.AXIAL])

    def test_clear_band(self):
        result = verify_band(
            self.design, Band(100.0, 500.0), PIPE, LOW_PREC, self.grids, [ModeKind.AXIAL], BOUNDS
        )
        axial = result.modes[ModeKind.AXIAL]
        assert result.feasible
        assert axial.peaks_in_band == 0
        assert axial.enclosing_range.lo == pytest.approx(0.1)
        assert 565.0 < axial.enclosing_range.hi < 586.0
        assert result.mass == 0.0

    def test_band_over_resonance(self):
        result = verify_band(self.design, Band(500.0, 700.0), PIPE, LOW_PREC, self.grids, [ModeKind.AXIAL])
        assert not result.feasible
        assert result.modes[ModeKind.AXIAL].peaks_in_band == 1
        assert result.modes[ModeKind.AXIAL].enclosing_range is None
        assert result.to_json()["oracle"] == "tmm"

    def test_out_of_bounds_design_is_infeasible(self):
        n = BOUNDS.n_inserts
        heavy = DesignVector((0.4,) * n, (0.1,) * n, (0.01,) * n)
        result = verify_band(heavy, Band(100.0, 500.0), PIPE, LOW_PREC, self.grids, [ModeKind.AXIAL], BOUNDS)
        assert not result.geometry_feasible
        assert not result.feasible


class TestSurrogateObjectives:
    def setup_method(self, _method=None):
        self.suite = _monotone_suite()
        lower, upper = box(BOUNDS)
        self.x = np.random.default_rng(1).uniform(lower, upper, size=(6, 30))

    def test_band_objective_counts_full_ranges(self):
        objective = band_objective(self.suite, PIPE, ObjectiveConfig(), penalty=1000.0)
        np.testing.assert_allclose(objective(self.x), -3.0)

    def test_band_objective_penalises_short_ranges(self):
        strict = ObjectiveConfig(omega_c_lateral=5000.0)
        values = band_objective(self.suite, PIPE, strict, penalty=1000.0)(self.x)
        assert np.all(values > -3.0)

    def test_mass_objective_is_mass_without_peaks(self):
        objective = mass_objective(self.suite, PIPE, Band(1000.0, 1500.0), [ModeKind.LATERAL], 1000.0)
        expected = [insert_mass(DesignVector.from_array(r), PIPE) for r in self.x]
        np.testing.assert_allclose(objective(self.x), expected, rtol=1e-12)

    def test_length_excess_is_penalised(self):
        short = PipeSpec(length=1.0)
        objective = mass_objective(self.suite, short, Band(1000.0, 1500.0), [ModeKind.LATERAL], 1000.0)
        masses = [insert_mass(DesignVector.from_array(r), short) for r in self.x]
        assert np.all(objective(self.x) > np.asarray(masses))


class TestDesignProblems:
    def setup_method(self, _method=None):
        self.suite = _monotone_suite()

    def test_maximize_band(self):
        result = maximize_band(self.suite, _small_pso(max_iterations=3), PIPE, LOW_PREC)
        assert result.objective == pytest.approx(-3.0)
        assert set(result.verified_ranges) == set(ModeKind)
        payload = result.to_json()
        assert payload["objective_oracle"] == "surrogate"
        assert payload["verified_oracle"] == "tmm"
        assert set(payload["residuals"]) == {"axial", "torsional", "lateral"}

    def test_min_mass_for_band(self):
        result = min_mass_for_band(self.suite, Band(1000.0, 1500.0), _small_pso(), PIPE, LOW_PREC)
        lower, upper = box(BOUNDS)
        x = result.design.to_array()
        assert np.all(x >= lower) and np.all(x <= upper)
        assert result.trace[-1] < result.trace[0]
        assert result.mass < 80.0
        assert result.mass == pytest.approx(result.objective, rel=1e-9)
        assert set(result.verification.modes) == {ModeKind.LATERAL}

    def test_random_baseline(self):
        grids = mode_grids(SMALL_GRID)
        baseline = random_baseline(2, PIPE, BOUNDS, grids, LOW_PREC, seed=4)
        payload = baseline.to_json()
        assert payload["n_designs"] == 2
        for mode in ModeKind:
            assert 0.0 < baseline.mean_width(mode) <= grids[mode].hi - grids[mode].lo


class TestInverseDataset:
    def test_band_plan(self):
        grid = FrequencyGrid.linear(0.1, 10000.0, 80)
        plan = band_plan((250.0, 500.0, 20000.0), 3, grid)
        assert len(plan) == 6
        assert all(grid.contains(b.lo, b.hi) for b in plan)
        assert [round(b.width) for b in plan] == [250] * 3 + [500] * 3

    def test_default_plan_fits_lateral_grid(self):
        grid = mode_grids(GridConfig())[ModeKind.LATERAL]
        plan = band_plan((250.0, 500.0, 750.0, 1000.0), 25, grid)
        assert len(plan) == 100
        assert plan[0].lo == grid.lo
        assert plan[-1].hi <= grid.hi
        for band in plan:
            assert grid.contains(band.lo, band.hi)
            assert applicable_modes(band, {ModeKind.LATERAL: grid}) == [ModeKind.LATERAL]

    def test_rows_must_be_verified(self):
        with pytest.raises(ValueError):
            InverseDataset(np.zeros((2, 30)), np.ones((2, 2)), np.zeros(2), [True, False])

    def test_csv_file(self, tmp_path):
        rng = np.random.default_rng(0)
        data = InverseDataset(rng.random((3, 30)), [[1.0, 2.0]] * 3, [5.0, 6.0, 7.0], [True] * 3)
        path = data.save(tmp_path / "inverse.csv")
        header = path.read_text().splitlines()[0].split(",")
        assert header[:2] == ["x_1", "x_2"]
        assert header[-4:] == ["omega_lo", "omega_hi", "mass_kg", "verified"]
        loaded = InverseDataset.load(path)
        np.testing.assert_array_equal(loaded.x, data.x)
        np.testing.assert_array_equal(loaded.mass, data.mass)
        assert len(InverseDataset.load(InverseDataset.empty(30).save(tmp_path / "e.csv"))) == 0

    def test_infeasible_results_are_dropped(self, monkeypatch):
        seeds = []

        def fake_min_mass(suite, band, cfg, pipe, prec, modes):
            seeds.append(cfg.seed)
            result = MagicMock()
            result.feasible = band.lo < 1000.0
            result.design = DesignVector.uniform(PIPE, BOUNDS)
            result.mass = 1.5
            result.residuals = {"lateral": 1.0}
            return result

        monkeypatch.setattr(optimize, "min_mass_for_band", fake_min_mass)
        suite = MagicMock()
        suite.bounds = BOUNDS
        plan = [Band(500.0, 700.0), Band(1200.0, 1400.0), Band(600.0, 900.0)]
        data = generate_inverse_dataset(suite, plan, _small_pso(seed=10), PIPE, LOW_PREC)
        assert seeds == [10, 11, 12]
        assert len(data) == 2
        np.testing.assert_array_equal(data.y, [[500.0, 700.0], [600.0, 900.0]])
        assert np.all(data.verified)

    def test_nothing_feasible_gives_empty_dataset(self, monkeypatch):
        monkeypatch.setattr(
            optimize, "min_mass_for_band", lambda *args: MagicMock(feasible=False, residuals={})
        )
        suite = MagicMock()
        suite.bounds = BOUNDS
        data = generate_inverse_dataset(suite, [Band(500.0, 700.0)], _small_pso(), PIPE, LOW_PREC)
        assert len(data) == 0
        assert data.x.shape == (0, 30)
