"""Tests for the invertible network: exact inversion, Jacobians, training and retrieval."""

import json

import numpy as np
import pytest

from metaforge.config import DesignBounds, GridConfig, INNTrainConfig, PipeSpec, PrecisionConfig
from metaforge.errors import DomainError
from metaforge.inn import (
    INNModel,
    build_inn,
    inn_forward,
    inn_forward_with_logdet,
    inn_inverse,
    inn_jacobian,
    retrieve_design,
    train_inn,
)
from metaforge.optimize import InverseDataset
from metaforge.response import Band
from metaforge.sampling import box, denormalize, normalize
from metaforge.tmm import mode_grids

BOUNDS = DesignBounds()
PIPE = PipeSpec()
LOW_PREC = PrecisionConfig(decimal_digits=30)
SMALL_GRIDS = mode_grids(GridConfig(lateral_hi=2000.0, n_points=5))


def _model(seed: int = 0, y_min=(1000.0, 1250.0), y_max=(1500.0, 2000.0)) -> INNModel:
    return build_inn(INNTrainConfig(seed=seed), BOUNDS, np.array(y_min), np.array(y_max))


def _linear_inverse_dataset(n: int, seed: int = 0) -> tuple[InverseDataset, np.ndarray]:
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(n, 30))
    forms = rng.normal(size=(30, 2)) / np.sqrt(30)
    x = denormalize(u, BOUNDS)
    return InverseDataset(x, u @ forms, np.zeros(n), np.ones(n, dtype=bool)), forms


class TestInvertibility:
    def setup_method(self, _method=None):
        self.model = _model()
        self.x = np.random.default_rng(1).uniform(-1.0, 1.0, size=(1000, 30))

    def test_round_trip(self):
        y, z = inn_forward(self.model, self.x)
        assert y.shape == (1000, 2) and z.shape == (1000, 28)
        back = inn_inverse(self.model, y, z)
        assert np.max(np.abs(back - self.x)) < 1e-6

    def test_single_row_shapes(self):
        y, z = inn_forward(self.model, self.x[0])
        assert y.shape == (2,) and z.shape == (28,)
        assert inn_inverse(self.model, y, z).shape == (30,)

    def test_jacobian_matches_finite_differences(self):
        x0 = self.x[3]
        jac = inn_jacobian(self.model, x0)
        h = 1e-6
        fd = np.empty((30, 30))
        for i in range(30):
            step = np.zeros(30)
            step[i] = h
            plus = np.concatenate(inn_forward(self.model, x0 + step))
            minus = np.concatenate(inn_forward(self.model, x0 - step))
            fd[:, i] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(jac, fd, rtol=1e-4, atol=1e-7)

    def test_log_det_matches_jacobian(self):
        x0 = self.x[5]
        _, _, log_det = inn_forward_with_logdet(self.model, x0)
        _, expected = np.linalg.slogdet(inn_jacobian(self.model, x0))
        assert log_det == pytest.approx(expected, abs=1e-9)

    def test_non_finite_input(self):
        bad = self.x[0].copy()
        bad[4] = np.nan
        with pytest.raises(DomainError):
            inn_forward(self.model, bad)
        with pytest.raises(DomainError):
            inn_inverse(self.model, np.array([0.0, np.inf]), np.zeros(28))

    def test_wrong_width(self):
        with pytest.raises(DomainError):
            inn_forward(self.model, np.zeros(29))
        with pytest.raises(DomainError):
            inn_inverse(self.model, np.zeros((2, 2)), np.zeros((3, 28)))

    def test_seed_fixes_weights_and_permutations(self):
        a, b = _model(seed=4), _model(seed=4)
        assert a.permutations == b.permutations
        np.testing.assert_array_equal(inn_forward(a, self.x[:5])[0], inn_forward(b, self.x[:5])[0])
        assert _model(seed=5).permutations != a.permutations


class TestPersistence:
    def test_save_and_load(self, tmp_path):
        model = _model()
        blob = model.save(tmp_path / "inn", metrics={"test_mse": 0.5})
        assert blob.name == "inn.bin"
        manifest = json.loads((tmp_path / "inn" / "inn.json").read_text())
        assert manifest["dim"] == 30
        assert manifest["metrics"] == {"test_mse": 0.5}
        x = np.random.default_rng(2).uniform(-1.0, 1.0, size=(8, 30))
        for source in (tmp_path / "inn", tmp_path / "inn" / "inn.json", blob):
            loaded = INNModel.load(source)
            np.testing.assert_array_equal(inn_forward(loaded, x)[1], inn_forward(model, x)[1])
            np.testing.assert_array_equal(loaded.y_max, model.y_max)

    def test_y_normalisation(self):
        model = _model()
        y = np.array([[1000.0, 1250.0], [1500.0, 2000.0]])
        np.testing.assert_allclose(model.normalize_y(y), [[-1.0, -1.0], [1.0, 1.0]])
        np.testing.assert_allclose(model.denormalize_y(model.normalize_y(y)), y)


class TestTraining:
    def test_too_few_rows(self):
        data, _ = _linear_inverse_dataset(10)
        with pytest.raises(ValueError):
            train_inn(data, INNTrainConfig(), BOUNDS)

    def test_short_run_report(self):
        data, _ = _linear_inverse_dataset(60)
        cfg = INNTrainConfig(max_iterations=3, batch_size=16)
        model, report = train_inn(data, cfg, BOUNDS)
        assert report.epochs == 3
        assert len(report.history) == 3
        assert not report.diverged
        assert np.isfinite(report.test_mse) and np.isfinite(report.test_mse_hz2)
        _, again = train_inn(data, cfg, BOUNDS)
        assert again.history == report.history
        np.testing.assert_allclose(model.y_min, data.y.min(axis=0))

    @pytest.mark.slow
    def test_linear_forms_are_learned(self):
        data, forms = _linear_inverse_dataset(800, seed=3)
        cfg = INNTrainConfig(max_iterations=400)
        model, report = train_inn(data, cfg, BOUNDS)
        assert report.test_mse < 1e-2

        held_out, _ = _linear_inverse_dataset(200, seed=9)
        u = normalize(held_out.x, BOUNDS)
        u = np.clip(u, -1.0, 1.0)
        y_true = model.normalize_y(u @ forms)
        _, z = inn_forward(model, u)
        retrieved = inn_inverse(model, y_true, z)
        y_retrieved = model.normalize_y(retrieved @ forms)
        assert float(np.mean((y_retrieved - y_true) ** 2)) < 1e-2


class TestRetrieval:
    def test_sampled_candidates_are_clamped_and_ranked(self):
        result = retrieve_design(
            _model(), Band(1200.0, 1500.0), PIPE, LOW_PREC, SMALL_GRIDS, "sample", k=3, seed=1
        )
        lower, upper = box(BOUNDS)
        assert len(result.candidates) == 3
        for candidate in result.candidates:
            x = candidate.design.to_array()
            assert np.all(x >= lower) and np.all(x <= upper)
        keys = [(not c.feasible, c.mass) for c in result.candidates]
        assert keys == sorted(keys)
        assert result.best is result.candidates[0]
        assert not result.extrapolated
        assert result.to_json()["oracle"] == "tmm"

    def test_zero_policy_is_one_candidate(self):
        result = retrieve_design(_model(), Band(1200.0, 1500.0), PIPE, LOW_PREC, SMALL_GRIDS)
        assert len(result.candidates) == 1
        np.testing.assert_array_equal(result.best.z, np.zeros(28))

    def test_band_outside_training_range_is_flagged(self):
        model = _model(y_min=(100.0, 300.0), y_max=(200.0, 400.0))
        result = retrieve_design(model, Band(1200.0, 1500.0), PIPE, LOW_PREC, SMALL_GRIDS)
        assert result.extrapolated

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            retrieve_design(_model(), Band(1200.0, 1500.0), PIPE, LOW_PREC, SMALL_GRIDS, "random")
