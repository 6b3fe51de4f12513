"""Tests for surrogate datasets, suite training, persistence and prediction."""

import json

import numpy as np
import pytest

from metaforge.config import DesignBounds, GridConfig, PipeSpec, PrecisionConfig, TrainConfig
from metaforge.curves import ModeKind
from metaforge.geometry import DesignVector
from metaforge.sampling import box, denormalize
from metaforge.surrogate import (
    CHANNEL_SLICES,
    N_CHANNELS,
    Dataset,
    SurrogateSuite,
    design_targets,
    generate_dataset,
    held_out_designs,
    is_extrapolation,
    parameter_count,
    predict,
    predict_batch,
    predict_log10,
    train_suite,
    validate_suite,
)
from metaforge.tmm import mode_grids

PIPE = PipeSpec()
BOUNDS = DesignBounds()
SMALL_GRID = GridConfig(axial_lo=50.0, axial_hi=800.0, lateral_lo=50.0, lateral_hi=2000.0, n_points=4)
LOW_PREC = PrecisionConfig(decimal_digits=30)


def _linear_dataset(n: int = 320, n_freq: int = 3, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 30))
    a = rng.normal(0.0, 0.05, size=(30, n_freq * N_CHANNELS))
    y = (x @ a).reshape(n, n_freq, N_CHANNELS)
    grids = mode_grids(GridConfig(n_points=n_freq))
    return Dataset(x, y, BOUNDS, grids, seed), a


def _fast_cfg(**overrides) -> TrainConfig:
    values = {"max_iterations": 20, "batch_size": 16, "hidden_units": 16, "seed": 1}
    values.update(overrides)
    return TrainConfig(**values)


class TestDataset:
    def test_shape_checks(self):
        grids = mode_grids(GridConfig(n_points=3))
        with pytest.raises(ValueError):
            Dataset(np.zeros((4, 30)), np.zeros((3, 3, N_CHANNELS)), BOUNDS, grids)
        with pytest.raises(ValueError):
            Dataset(np.zeros((4, 30)), np.zeros((4, 3, 2)), BOUNDS, grids)
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 30)), np.full((1, 3, N_CHANNELS), np.nan), BOUNDS, grids)

    def test_save_and_load(self, tmp_path):
        data, _ = _linear_dataset(n=12)
        data.save(tmp_path / "ds")
        sidecar = json.loads((tmp_path / "ds" / "dataset.json").read_text())
        assert sidecar["shape"] == [12, 3, N_CHANNELS]
        assert sidecar["target_transform"] == "log10"
        header = (tmp_path / "ds" / "inputs.csv").read_text().splitlines()[0]
        assert header.split(",")[0] == "x_1" and header.split(",")[-1] == "x_30"

        loaded = Dataset.load(tmp_path / "ds")
        np.testing.assert_array_equal(loaded.inputs, data.inputs)
        np.testing.assert_array_equal(loaded.targets, data.targets)
        assert loaded.bounds == BOUNDS
        assert loaded.grids == data.grids

    def test_designs_are_physical(self):
        data, _ = _linear_dataset(n=5)
        lower, upper = box(BOUNDS)
        for design in data.designs():
            x = design.to_array()
            assert np.all(x >= lower - 1e-12) and np.all(x <= upper + 1e-12)


class TestGenerateDataset:
    def test_tmm_targets_are_log10(self):
        design = DesignVector.uniform(PIPE, BOUNDS)
        targets = design_targets(design, PIPE, mode_grids(SMALL_GRID), LOW_PREC)
        assert targets.shape == (4, N_CHANNELS)
        # 50 Hz axial is deep in the rigid-body regime
        assert targets[0, 0] == pytest.approx(0.0, abs=1e-2)

    def test_small_dataset(self):
        data = generate_dataset(3, PIPE, 5, LOW_PREC, BOUNDS, SMALL_GRID)
        assert data.inputs.shape == (3, 30)
        assert data.targets.shape == (3, 4, N_CHANNELS)
        assert np.all(np.abs(data.inputs) <= 1.0 + 1e-12)
        again = generate_dataset(3, PIPE, 5, LOW_PREC, BOUNDS, SMALL_GRID)
        np.testing.assert_array_equal(again.targets, data.targets)


class TestTraining:
    def test_linear_map_is_learned(self):
        data, _ = _linear_dataset()
        suite = train_suite(data, TrainConfig(max_iterations=200, batch_size=16, seed=2))
        assert suite.n_models == 3
        for metrics in suite.metrics:
            assert not metrics.diverged
            assert metrics.train_mse < 1e-3
            assert metrics.train_mse <= metrics.initial_mse

    def test_default_architecture_size(self, tmp_path):
        data, _ = _linear_dataset(n=20)
        suite = train_suite(data, TrainConfig(max_iterations=1, batch_size=8))
        # 30 inputs -> 100 tanh units -> 6 channels
        assert [parameter_count(m) for m in suite.models] == [3706] * suite.n_models
        suite.save(tmp_path / "suite")
        manifest = json.loads((tmp_path / "suite" / "manifest.json").read_text())
        assert manifest["architecture"]["parameters_per_model"] == 3706

    def test_constant_targets_give_zero_error(self):
        grids = mode_grids(GridConfig(n_points=3))
        x = np.random.default_rng(0).uniform(-1, 1, size=(20, 30))
        data = Dataset(x, np.full((20, 3, N_CHANNELS), 1.5), BOUNDS, grids)
        suite = train_suite(data, _fast_cfg())
        assert np.all(suite.target_scale == 0.0)
        assert all(m.train_mse == 0.0 and m.test_mse == 0.0 for m in suite.metrics)
        pred = predict_log10(suite, denormalize(x[:2], BOUNDS))
        np.testing.assert_allclose(pred, 1.5)

    def test_training_is_deterministic(self):
        data, _ = _linear_dataset(n=40)
        a = train_suite(data, _fast_cfg())
        b = train_suite(data, _fast_cfg())
        points = denormalize(data.inputs[:5], BOUNDS)
        np.testing.assert_array_equal(predict_log10(a, points), predict_log10(b, points))

    def test_threads_match_serial(self):
        data, _ = _linear_dataset(n=40)
        points = denormalize(data.inputs[:5], BOUNDS)
        serial = predict_log10(train_suite(data, _fast_cfg()), points)
        threaded = predict_log10(train_suite(data, _fast_cfg(), threads=3), points)
        np.testing.assert_array_equal(serial, threaded)


class TestPrediction:
    def setup_method(self, _method=None):
        self.data, _ = _linear_dataset(n=40)
        self.suite = train_suite(self.data, _fast_cfg())

    def test_surface_shapes(self):
        design = self.data.designs()[0]
        surface = predict(self.suite, design)
        assert surface.magnitudes.shape == (3, N_CHANNELS)
        assert not surface.extrapolated
        lateral = surface.curve(ModeKind.LATERAL)
        assert lateral.n_dof == 4
        assert lateral.source == "surrogate"
        np.testing.assert_allclose(
            lateral.magnitudes, surface.magnitudes[:, CHANNEL_SLICES[ModeKind.LATERAL]]
        )

    def test_batch_matches_single(self):
        designs = self.data.designs()[:4]
        batch = predict_batch(self.suite, designs)
        for design, surface in zip(designs, batch):
            np.testing.assert_allclose(surface.magnitudes, predict(self.suite, design).magnitudes)

    def test_out_of_box_is_extrapolation(self):
        n = BOUNDS.n_inserts
        outside = DesignVector((0.4,) * n, (0.1,) * n, (0.01,) * n)
        assert is_extrapolation(self.suite, outside)
        assert predict(self.suite, outside).extrapolated

    def test_save_and_load(self, tmp_path):
        self.suite.save(tmp_path / "suite")
        manifest = json.loads((tmp_path / "suite" / "manifest.json").read_text())
        assert manifest["n_models"] == 3
        assert manifest["architecture"]["activation"] == "tanh"
        loaded = SurrogateSuite.load(tmp_path / "suite")
        points = denormalize(self.data.inputs[:3], BOUNDS)
        np.testing.assert_allclose(
            predict_log10(loaded, points), predict_log10(self.suite, points), rtol=1e-12
        )
        assert [m.train_mse for m in loaded.metrics] == [m.train_mse for m in self.suite.metrics]


class TestValidation:
    def test_held_out_designs_depend_on_seed(self):
        first = held_out_designs(3, PIPE, BOUNDS, seed=7)
        assert first != held_out_designs(3, PIPE, BOUNDS, seed=8)
        assert len(first) == 3

    def test_validation_report(self):
        data = generate_dataset(6, PIPE, 1, LOW_PREC, BOUNDS, SMALL_GRID)
        suite = train_suite(data, _fast_cfg(test_fraction=0.5))
        report = validate_suite(suite, held_out_designs(2, PIPE, BOUNDS, 1), PIPE, LOW_PREC)
        assert report.n_designs == 2
        assert set(report.within_one) == {"axial", "torsional", "lateral"}
        assert 0.0 <= report.overall <= 1.0
