"""Per-frequency surrogate networks standing in for the TMM inside optimisation loops.

One shallow network per grid index maps the 30 normalised design variables to six log10
transmission magnitudes. Model ``j`` serves the ``j``-th point of the axial/torsional grid
and the ``j``-th point of the lateral grid at the same time. Output channels:

    0 axial u, 1 torsional theta,
    2 lateral deflection dir 1, 3 lateral slope dir 1, 4 lateral deflection dir 2, 5 lateral slope dir 2
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import multiprocessing
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import DesignBounds, GridConfig, PipeSpec, PrecisionConfig, TrainConfig
from .curves import FrequencyGrid, ModeKind, ResponseCurve
from .geometry import DesignVector, build_segments
from .response import detect_peaks
from .sampling import box, denormalize, normalize, sample_designs
from .tmm import mode_grids, sweep_all_modes

logger = logging.getLogger(__name__)

CHANNELS: tuple[str, ...] = (
    "axial_u",
    "torsional_theta",
    "lateral_deflection_1",
    "lateral_slope_1",
    "lateral_deflection_2",
    "lateral_slope_2",
)
N_CHANNELS = len(CHANNELS)

# Channel slice per mode family in the 6-wide output
CHANNEL_SLICES: dict[ModeKind, slice] = {
    ModeKind.AXIAL: slice(0, 1),
    ModeKind.TORSIONAL: slice(1, 2),
    ModeKind.LATERAL: slice(2, 6),
}

_DATASET_FORMAT_VERSION = 1
_SUITE_FORMAT_VERSION = 1
# log10 floor for magnitudes that underflow to zero
_LOG_FLOOR = -300.0
# Standard deviations below this are treated as constant targets
_CONSTANT_STD = 1e-12
# Serialises seeded weight initialisation across training threads
_INIT_LOCK = threading.Lock()


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def _grids_json(grids: dict[ModeKind, FrequencyGrid]) -> dict[str, list[float]]:
    return {m.value: list(g.frequencies) for m, g in grids.items()}


def _grids_from_json(data: dict[str, list[float]]) -> dict[ModeKind, FrequencyGrid]:
    return {ModeKind(k): FrequencyGrid(tuple(v)) for k, v in data.items()}


@dataclass(eq=False)
class Dataset:
    """Normalised designs and log10 targets, shape (N, 30) and (N, n_freq, 6)."""

    inputs: np.ndarray
    targets: np.ndarray
    bounds: DesignBounds
    grids: dict[ModeKind, FrequencyGrid]
    seed: int = 0

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows"
            )
        if self.targets.ndim != 3 or self.targets.shape[2] != N_CHANNELS:
            raise ValueError(f"targets must be (N, n_freq, {N_CHANNELS}), got {self.targets.shape}")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("dataset targets contain non-finite values")

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_frequencies(self) -> int:
        return int(self.targets.shape[1])

    def designs(self) -> list[DesignVector]:
        return [DesignVector.from_array(r) for r in denormalize(self.inputs, self.bounds)]

    def save(self, directory: str | os.PathLike[str]) -> Path:
        """Write ``inputs.csv``, ``targets.bin`` (little-endian float64) and ``dataset.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        header = ",".join(f"x_{i + 1}" for i in range(self.inputs.shape[1]))
        lines = [header] + [",".join(repr(float(v)) for v in row) for row in self.inputs]
        (out / "inputs.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / "targets.bin").write_bytes(self.targets.astype("<f8").tobytes(order="C"))
        lower, upper = box(self.bounds)
        sidecar = {
            "version": _DATASET_FORMAT_VERSION,
            "shape": list(self.targets.shape),
            "dtype": "<f8",
            "target_transform": "log10",
            "channels": list(CHANNELS),
            "normalization": {"lower": lower.tolist(), "upper": upper.tolist(), "range": [-1, 1]},
            "bounds": dataclasses.asdict(self.bounds),
            "grids": _grids_json(self.grids),
            "seed": self.seed,
        }
        (out / "dataset.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
        return out

    @classmethod
    def load(cls, directory: str | os.PathLike[str]) -> Dataset:
        src = Path(directory)
        sidecar = json.loads((src / "dataset.json").read_text(encoding="utf-8"))
        shape = tuple(sidecar["shape"])
        targets = np.frombuffer((src / "targets.bin").read_bytes(), dtype="<f8").reshape(shape)
        rows = (src / "inputs.csv").read_text(encoding="utf-8").strip().splitlines()[1:]
        inputs = np.array([[float(v) for v in r.split(",")] for r in rows], dtype=np.float64)
        return cls(
            inputs=inputs,
            targets=targets.astype(np.float64),
            bounds=DesignBounds(**sidecar["bounds"]),
            grids=_grids_from_json(sidecar["grids"]),
            seed=int(sidecar.get("seed", 0)),
        )


def design_targets(
    design: DesignVector,
    pipe: PipeSpec,
    grids: dict[ModeKind, FrequencyGrid],
    prec: PrecisionConfig,
) -> np.ndarray:
    """Full three-mode TMM sweep of one design as a (n_freq, 6) log10 array."""
    chain = build_segments(design, pipe)
    curves = sweep_all_modes(chain, grids, prec)
    n = len(grids[ModeKind.AXIAL])
    if any(len(g) != n for g in grids.values()):
        raise ValueError("all mode grids must have the same number of points")
    out = np.empty((n, N_CHANNELS), dtype=np.float64)
    for mode, sl in CHANNEL_SLICES.items():
        out[:, sl] = curves[mode].magnitudes
    with np.errstate(divide="ignore"):
        return np.maximum(np.log10(out), _LOG_FLOOR)


def _targets_worker(args: tuple) -> np.ndarray:
    design, pipe, grids, prec = args
    return design_targets(design, pipe, grids, prec)


def generate_dataset(
    n: int,
    pipe: PipeSpec,
    sampler_seed: int,
    prec: PrecisionConfig,
    bounds: DesignBounds | None = None,
    grid_cfg: GridConfig | None = None,
    threads: int = 1,
) -> Dataset:
    """Latin-hypercube designs within bounds, each swept by the TMM in all three modes."""
    b = bounds or DesignBounds()
    grids = mode_grids(grid_cfg or GridConfig())
    designs = sample_designs(n, pipe, b, sampler_seed)
    logger.info(
        "Generating %d TMM samples (%d-point grids, %d digits, %d worker(s))",
        n,
        len(grids[ModeKind.AXIAL]),
        prec.decimal_digits,
        threads,
    )
    jobs = [(d, pipe, grids, prec) for d in designs]
    if threads > 1:
        with multiprocessing.Pool(processes=threads) as pool:
            rows = list(pool.imap(_targets_worker, jobs, chunksize=max(1, n // (threads * 8))))
    else:
        rows = []
        for i, job in enumerate(jobs, start=1):
            rows.append(_targets_worker(job))
            if i % 100 == 0:
                logger.info("  %d/%d designs swept", i, n)
    x = normalize(np.stack([d.to_array() for d in designs]), b)
    return Dataset(inputs=x, targets=np.stack(rows), bounds=b, grids=grids, seed=sampler_seed)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def _make_model(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, n_out)).double()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class ModelMetrics:
    initial_mse: float
    train_mse: float
    test_mse: float
    diverged: bool = False

    def to_json(self) -> dict:
        return {
            "initial_mse": self.initial_mse,
            "train_mse": self.train_mse,
            "test_mse": self.test_mse,
            "diverged": self.diverged,
        }


@dataclass(eq=False)
class SurrogateSuite:
    """One trained network per frequency index plus the records needed to use them."""

    models: list[nn.Sequential]
    target_mean: np.ndarray  # (n_freq, 6) log10
    target_scale: np.ndarray  # (n_freq, 6); 0 where the training target was constant
    bounds: DesignBounds
    grids: dict[ModeKind, FrequencyGrid]
    metrics: list[ModelMetrics]
    hidden_units: int = 100
    _stacked: tuple[torch.Tensor, ...] | None = field(default=None, init=False, repr=False)

    @property
    def n_models(self) -> int:
        return len(self.models)

    def stacked_weights(self) -> tuple[torch.Tensor, ...]:
        """All first/second-layer weights stacked along a leading model axis."""
        if self._stacked is None:
            w1 = torch.stack([m[0].weight.detach().T for m in self.models])  # (F, in, H)
            b1 = torch.stack([m[0].bias.detach() for m in self.models])  # (F, H)
            w2 = torch.stack([m[2].weight.detach().T for m in self.models])  # (F, H, out)
            b2 = torch.stack([m[2].bias.detach() for m in self.models])  # (F, out)
            self._stacked = (w1, b1, w2, b2)
        return self._stacked

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str | os.PathLike[str]) -> Path:
        """JSON weight file per model plus ``manifest.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for j, model in enumerate(self.models):
            name = f"model_{j:03d}.json"
            weights = {k: v.detach().cpu().tolist() for k, v in model.state_dict().items()}
            (out / name).write_text(json.dumps({"index": j, "weights": weights}) + "\n", encoding="utf-8")
            files.append(name)
        lower, upper = box(self.bounds)
        manifest = {
            "version": _SUITE_FORMAT_VERSION,
            "n_models": self.n_models,
            "architecture": {
                "inputs": int(lower.size),
                "hidden": self.hidden_units,
                "outputs": N_CHANNELS,
                "activation": "tanh",
                "parameters_per_model": parameter_count(self.models[0]) if self.models else 0,
            },
            "channels": list(CHANNELS),
            "grids": _grids_json(self.grids),
            "normalization": {
                "lower": lower.tolist(),
                "upper": upper.tolist(),
                "target_transform": "log10",
                "target_mean": self.target_mean.tolist(),
                "target_scale": self.target_scale.tolist(),
            },
            "bounds": dataclasses.asdict(self.bounds),
            "metrics": [m.to_json() for m in self.metrics],
            "files": files,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return out

    @classmethod
    def load(cls, directory: str | os.PathLike[str]) -> SurrogateSuite:
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        arch = manifest["architecture"]
        models = []
        for name in manifest["files"]:
            payload = json.loads((src / name).read_text(encoding="utf-8"))
            model = _make_model(arch["inputs"], arch["hidden"], arch["outputs"])
            state = {k: torch.tensor(v, dtype=torch.float64) for k, v in payload["weights"].items()}
            model.load_state_dict(state)
            model.eval()
            models.append(model)
        norm = manifest["normalization"]
        return cls(
            models=models,
            target_mean=np.asarray(norm["target_mean"], dtype=np.float64),
            target_scale=np.asarray(norm["target_scale"], dtype=np.float64),
            bounds=DesignBounds(**manifest["bounds"]),
            grids=_grids_from_json(manifest["grids"]),
            metrics=[ModelMetrics(**m) for m in manifest["metrics"]],
            hidden_units=int(arch["hidden"]),
        )


def _split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction)) if n >= 2 else 0
    n_test = min(max(n_test, 1 if n >= 2 else 0), n - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _mse(model: nn.Module, x: torch.Tensor, y: torch.Tensor, scale: torch.Tensor) -> float:
    """MSE in log10 units (standardised residuals rescaled by the target scale)."""
    if x.shape[0] == 0:
        return float("nan")
    with torch.no_grad():
        resid = (model(x) - y) * scale
        return float(torch.mean(resid**2))


def _train_one(
    j: int,
    x_train: torch.Tensor,
    y_train: torch.Tensor,
    x_test: torch.Tensor,
    y_test: torch.Tensor,
    scale: torch.Tensor,
    cfg: TrainConfig,
) -> tuple[nn.Sequential, ModelMetrics]:
    """Mini-batch SGD with momentum; keeps the best-train-loss weights."""
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed * 100_003 + j)
        model = _make_model(x_train.shape[1], cfg.hidden_units, y_train.shape[1])
    gen = torch.Generator().manual_seed(cfg.seed * 100_003 + j)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    loss_fn = nn.MSELoss()
    # Constant channels contribute nothing to the loss
    weight = (scale > 0).to(torch.float64)

    initial = _mse(model, x_train, y_train, scale)
    best_loss = initial
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    diverged = False
    n = x_train.shape[0]
    for epoch in range(cfg.max_iterations):
        model.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(x_train[idx]) * weight, y_train[idx] * weight)
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            opt.step()
        if diverged:
            logger.warning(
                "Surrogate model %d diverged at epoch %d (lr=%g); keeping last good weights",
                j,
                epoch,
                cfg.learning_rate,
            )
            break
        current = _mse(model, x_train, y_train, scale)
        if not math.isfinite(current):
            diverged = True
            logger.warning("Surrogate model %d produced a non-finite loss at epoch %d", j, epoch)
            break
        if current <= best_loss:
            best_loss = current
            best_state = {k: v.clone() for k, v in model.state_dict().items()}

    model.load_state_dict(best_state)
    model.eval()
    metrics = ModelMetrics(
        initial_mse=initial,
        train_mse=_mse(model, x_train, y_train, scale),
        test_mse=_mse(model, x_test, y_test, scale),
        diverged=diverged,
    )
    return model, metrics


def train_suite(data: Dataset, cfg: TrainConfig, threads: int = 1) -> SurrogateSuite:
    """Train one network per frequency index; the models are independent and seeded by index."""
    x = torch.as_tensor(data.inputs, dtype=torch.float64)
    train_idx, test_idx = _split(data.n_samples, cfg.test_fraction, cfg.seed)
    y_all = data.targets[train_idx]
    mean = y_all.mean(axis=0)
    std = y_all.std(axis=0)
    scale = np.where(std > _CONSTANT_STD, std, 0.0)
    divisor = np.where(scale > 0, scale, 1.0)
    standardized = (data.targets - mean) / divisor

    def job(j: int) -> tuple[nn.Sequential, ModelMetrics]:
        y = torch.as_tensor(standardized[:, j, :], dtype=torch.float64)
        return _train_one(
            j,
            x[train_idx],
            y[train_idx],
            x[test_idx],
            y[test_idx],
            torch.as_tensor(scale[j], dtype=torch.float64),
            cfg,
        )

    logger.info(
        "Training %d surrogate models on %d samples (%d train / %d test)",
        data.n_frequencies,
        data.n_samples,
        train_idx.size,
        test_idx.size,
    )
    indices = range(data.n_frequencies)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, indices))
    else:
        results = [job(j) for j in indices]

    metrics = [m for _, m in results]
    diverged = sum(m.diverged for m in metrics)
    test = [m.test_mse for m in metrics if math.isfinite(m.test_mse)]
    logger.info(
        "Surrogate suite trained: median train MSE %.4g, median test MSE %.4g, %d diverged",
        float(np.median([m.train_mse for m in metrics])),
        float(np.median(test)) if test else float("nan"),
        diverged,
    )
    return SurrogateSuite(
        models=[m for m, _ in results],
        target_mean=mean,
        target_scale=scale,
        bounds=data.bounds,
        grids=data.grids,
        metrics=metrics,
        hidden_units=cfg.hidden_units,
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ResponseSurface:
    """Predicted magnitudes (n_freq, 6) with the grids each column family is bound to."""

    magnitudes: np.ndarray
    grids: dict[ModeKind, FrequencyGrid]
    extrapolated: bool = False

    def curve(self, mode: ModeKind) -> ResponseCurve:
        mode = ModeKind(mode)
        return ResponseCurve(
            self.grids[mode], self.magnitudes[:, CHANNEL_SLICES[mode]], mode, source="surrogate"
        )

    def curves(self) -> dict[ModeKind, ResponseCurve]:
        return {m: self.curve(m) for m in ModeKind}


def predict_log10(suite: SurrogateSuite, designs: np.ndarray) -> np.ndarray:
    """Batch prediction on physical designs (k, 30) -> log10 magnitudes (k, n_freq, 6)."""
    x = np.atleast_2d(np.asarray(designs, dtype=np.float64))
    z = torch.as_tensor(normalize(x, suite.bounds), dtype=torch.float64)
    w1, b1, w2, b2 = suite.stacked_weights()
    with torch.no_grad():
        hidden = torch.tanh(torch.einsum("ki,fih->fkh", z, w1) + b1[:, None, :])
        out = torch.einsum("fkh,fho->fko", hidden, w2) + b2[:, None, :]
    standardized = out.permute(1, 0, 2).numpy()
    return standardized * suite.target_scale[None] + suite.target_mean[None]


def is_extrapolation(suite: SurrogateSuite, design: DesignVector) -> bool:
    lower, upper = box(suite.bounds)
    x = design.to_array()
    return x.size != lower.size or bool(np.any(x < lower) or np.any(x > upper))


def predict(suite: SurrogateSuite, design: DesignVector) -> ResponseSurface:
    extrapolated = is_extrapolation(suite, design)
    if extrapolated:
        logger.warning("Surrogate prediction outside the training box (extrapolation)")
    log_mags = predict_log10(suite, design.to_array()[None, :])[0]
    return ResponseSurface(10.0**log_mags, suite.grids, extrapolated)


def predict_batch(suite: SurrogateSuite, designs: list[DesignVector]) -> list[ResponseSurface]:
    log_mags = predict_log10(suite, np.stack([d.to_array() for d in designs]))
    return [
        ResponseSurface(10.0**m, suite.grids, is_extrapolation(suite, d))
        for m, d in zip(log_mags, designs, strict=True)
    ]


# ---------------------------------------------------------------------------
# Validation against the TMM
# ---------------------------------------------------------------------------


@dataclass
class SuiteValidation:
    n_designs: int
    within_one: dict[str, float]  # fraction of designs per mode with |dpeaks| <= 1
    overall: float

    def to_json(self) -> dict:
        return {"n_designs": self.n_designs, "within_one": self.within_one, "overall": self.overall}


def validate_suite(
    suite: SurrogateSuite,
    designs: list[DesignVector],
    pipe: PipeSpec,
    prec: PrecisionConfig,
) -> SuiteValidation:
    """Compare surrogate peak counts with TMM peak counts per mode on held-out designs."""
    hits = {m: 0 for m in ModeKind}
    surfaces = predict_batch(suite, designs)
    for design, surface in zip(designs, surfaces, strict=True):
        tmm_curves = sweep_all_modes(build_segments(design, pipe), suite.grids, prec)
        for mode in ModeKind:
            n_tmm = len(detect_peaks(tmm_curves[mode]))
            n_sur = len(detect_peaks(surface.curve(mode)))
            hits[mode] += abs(n_tmm - n_sur) <= 1
    n = max(len(designs), 1)
    within = {m.value: hits[m] / n for m in ModeKind}
    overall = sum(hits.values()) / (n * len(ModeKind))
    logger.info("Surrogate peak-count agreement (+/-1): %s, overall %.2f", within, overall)
    return SuiteValidation(len(designs), within, overall)


def held_out_designs(n: int, pipe: PipeSpec, bounds: DesignBounds, seed: int) -> list[DesignVector]:
    """Designs for validation drawn from a seed stream disjoint from training sampling."""
    return sample_designs(n, pipe, bounds, seed + 1_000_003)
