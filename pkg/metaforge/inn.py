"""Invertible network mapping a normalised design (30) onto band edges (2) plus latent (28).

The network is a stack of affine coupling blocks separated by fixed permutations, so the
inverse is exact algebra rather than a second learned model:

    forward  x -> [y | z]      y: normalised (omega_lo, omega_hi), z: latent
    inverse  [y | z] -> x

Design variables are normalised with the geometry bounds; band edges with min-max scaling
over the training bands. Everything runs in float64.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from torch import nn

from .config import DesignBounds, INNTrainConfig, PipeSpec, PrecisionConfig
from .curves import FrequencyGrid, ModeKind
from .errors import DomainError
from .geometry import DesignVector
from .optimize import BandVerification, InverseDataset, verify_band
from .response import Band
from .sampling import clamp, denormalize, normalize

logger = logging.getLogger(__name__)

_FORMAT_VERSION = 1
Y_DIM = 2
# Soft bound on the log-scale of each coupling, keeps exp() well conditioned
_SCALE_CLAMP = 2.0
# Normalised band edges farther than this outside [-1, 1] count as extrapolation
_EXTRAPOLATION_TOL = 0.05
_MMD_WIDTHS = (0.2, 0.5, 0.9, 1.3)

ZPolicy = Literal["zero", "sample"]


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


def _subnet(n_in: int, n_out: int, hidden: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden),
        nn.LeakyReLU(slope),
        nn.Linear(hidden, hidden),
        nn.LeakyReLU(slope),
        nn.Linear(hidden, n_out),
    )


class AffineCoupling(nn.Module):
    """Keeps the first half, scales and shifts the second half conditioned on the first."""

    def __init__(self, dim: int, hidden: int, slope: float):
        super().__init__()
        self.split = dim // 2
        self.net = _subnet(self.split, 2 * (dim - self.split), hidden, slope)

    def _scale_shift(self, x1: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw_s, t = self.net(x1).chunk(2, dim=-1)
        return _SCALE_CLAMP * torch.tanh(raw_s / _SCALE_CLAMP), t

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x1, x2 = x[..., : self.split], x[..., self.split :]
        s, t = self._scale_shift(x1)
        return torch.cat([x1, x2 * torch.exp(s) + t], dim=-1), s.sum(dim=-1)

    def inverse(self, v: torch.Tensor) -> torch.Tensor:
        v1, v2 = v[..., : self.split], v[..., self.split :]
        s, t = self._scale_shift(v1)
        return torch.cat([v1, (v2 - t) * torch.exp(-s)], dim=-1)


class INNModel(nn.Module):
    """Permute-then-couple blocks plus the normalisation records for x and y."""

    def __init__(
        self,
        dim: int,
        n_blocks: int,
        hidden: int,
        negative_slope: float,
        permutations: list[list[int]],
        bounds: DesignBounds,
        y_min: np.ndarray,
        y_max: np.ndarray,
    ):
        super().__init__()
        if dim <= Y_DIM:
            raise ValueError(f"design dimension must exceed {Y_DIM}, got {dim}")
        self.dim = dim
        self.hidden = hidden
        self.negative_slope = negative_slope
        self.blocks = nn.ModuleList(AffineCoupling(dim, hidden, negative_slope) for _ in range(n_blocks))
        self.permutations = [list(map(int, p)) for p in permutations]
        for i, perm in enumerate(self.permutations):
            if sorted(perm) != list(range(dim)):
                raise ValueError(f"permutation {i} is not a permutation of {dim} indices")
        self._perm = [torch.tensor(p, dtype=torch.long) for p in self.permutations]
        self._inv_perm = [torch.argsort(p) for p in self._perm]
        self.bounds = bounds
        self.y_min = np.asarray(y_min, dtype=np.float64)
        self.y_max = np.asarray(y_max, dtype=np.float64)
        self.double()

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def z_dim(self) -> int:
        return self.dim - Y_DIM

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        log_det = torch.zeros(x.shape[:-1], dtype=x.dtype)
        for perm, block in zip(self._perm, self.blocks, strict=True):
            x, ld = block(x[..., perm])
            log_det = log_det + ld
        return x, log_det

    def inverse(self, v: torch.Tensor) -> torch.Tensor:
        for inv_perm, block in zip(reversed(self._inv_perm), reversed(self.blocks), strict=True):
            v = block.inverse(v)[..., inv_perm]
        return v

    # -- normalisation -------------------------------------------------------

    def normalize_y(self, y_hz: np.ndarray) -> np.ndarray:
        span = np.where(self.y_max > self.y_min, self.y_max - self.y_min, 1.0)
        return 2.0 * (np.asarray(y_hz, dtype=np.float64) - self.y_min) / span - 1.0

    def denormalize_y(self, y: np.ndarray) -> np.ndarray:
        span = np.where(self.y_max > self.y_min, self.y_max - self.y_min, 1.0)
        return self.y_min + (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * span

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | os.PathLike[str], metrics: dict | None = None) -> Path:
        """Write ``inn.json`` (manifest) and ``inn.bin`` (little-endian float64 weights).

        ``path`` is a directory or the path of either file; both land side by side.
        """
        blob_path, manifest_path = _artifact_paths(path)
        blob_path.parent.mkdir(parents=True, exist_ok=True)
        params = []
        chunks = []
        offset = 0
        for name, tensor in self.state_dict().items():
            flat = tensor.detach().cpu().numpy().astype("<f8").ravel()
            params.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            chunks.append(flat)
            offset += flat.size
        blob_path.write_bytes(np.concatenate(chunks).tobytes())
        manifest = {
            "version": _FORMAT_VERSION,
            "dim": self.dim,
            "y_dim": Y_DIM,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "negative_slope": self.negative_slope,
            "scale_clamp": _SCALE_CLAMP,
            "permutations": self.permutations,
            "normalization": {
                "x": "geometry_bounds",
                "bounds": dataclasses.asdict(self.bounds),
                "y_min": self.y_min.tolist(),
                "y_max": self.y_max.tolist(),
            },
            "blob": blob_path.name,
            "dtype": "<f8",
            "parameters": params,
            "metrics": metrics or {},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return blob_path

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> INNModel:
        blob_path, manifest_path = _artifact_paths(path)
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported INN format version {manifest.get('version')!r}")
        norm = manifest["normalization"]
        model = cls(
            dim=manifest["dim"],
            n_blocks=manifest["n_blocks"],
            hidden=manifest["hidden"],
            negative_slope=manifest["negative_slope"],
            permutations=manifest["permutations"],
            bounds=DesignBounds(**norm["bounds"]),
            y_min=np.asarray(norm["y_min"]),
            y_max=np.asarray(norm["y_max"]),
        )
        blob = np.frombuffer((blob_path.parent / manifest["blob"]).read_bytes(), dtype="<f8")
        state = {}
        for p in manifest["parameters"]:
            n = int(np.prod(p["shape"])) if p["shape"] else 1
            chunk = blob[p["offset"] : p["offset"] + n].reshape(p["shape"])
            state[p["name"]] = torch.tensor(chunk.copy(), dtype=torch.float64)
        model.load_state_dict(state)
        model.eval()
        return model


def _artifact_paths(path: str | os.PathLike[str]) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        return p.with_suffix(".bin"), p.with_suffix(".json")
    return p / "inn.bin", p / "inn.json"


def build_inn(
    cfg: INNTrainConfig, bounds: DesignBounds, y_min: np.ndarray, y_max: np.ndarray
) -> INNModel:
    """Freshly initialised model; weights and permutations follow ``cfg.seed``."""
    dim = 3 * bounds.n_inserts
    rng = np.random.default_rng(cfg.seed)
    perms = [rng.permutation(dim).tolist() for _ in range(cfg.n_blocks)]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return INNModel(
            dim, cfg.n_blocks, cfg.hidden_units, cfg.negative_slope, perms, bounds, y_min, y_max
        )


# ---------------------------------------------------------------------------
# Forward / inverse on numpy arrays
# ---------------------------------------------------------------------------


def _as_batch(model: INNModel, a: np.ndarray, width: int, what: str) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(a, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != width:
        raise DomainError(f"{what} must have {width} entries, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite values")
    return torch.as_tensor(arr), single


def inn_forward_with_logdet(
    model: INNModel, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(y, z, log|det J|) for normalised ``x`` of shape (30,) or (k, 30)."""
    t, single = _as_batch(model, x, model.dim, "x")
    with torch.no_grad():
        v, log_det = model(t)
    v_np, ld = v.numpy(), log_det.numpy()
    if single:
        return v_np[0, :Y_DIM], v_np[0, Y_DIM:], ld[0]
    return v_np[:, :Y_DIM], v_np[:, Y_DIM:], ld


def inn_forward(model: INNModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y, z, _ = inn_forward_with_logdet(model, x)
    return y, z


def inn_inverse(model: INNModel, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Exact inverse of ``inn_forward`` on normalised (y, z)."""
    ty, single = _as_batch(model, y, Y_DIM, "y")
    tz, _ = _as_batch(model, z, model.z_dim, "z")
    if ty.shape[0] != tz.shape[0]:
        raise DomainError(f"{ty.shape[0]} y rows but {tz.shape[0]} z rows")
    with torch.no_grad():
        x = model.inverse(torch.cat([ty, tz], dim=-1)).numpy()
    return x[0] if single else x


def inn_jacobian(model: INNModel, x: np.ndarray) -> np.ndarray:
    """d[y|z]/dx at one point, composed block by block from autograd Jacobians."""
    t, _ = _as_batch(model, x, model.dim, "x")
    v = t[0]
    total = torch.eye(model.dim, dtype=torch.float64)
    for perm, block in zip(model._perm, model.blocks, strict=True):
        permuted = v[perm]
        j_block = torch.autograd.functional.jacobian(lambda u, b=block: b(u)[0], permuted)
        total = j_block @ total[perm]
        with torch.no_grad():
            v = block(permuted)[0]
    return total.detach().numpy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mmd(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Maximum mean discrepancy with a sum of inverse multiquadratic kernels."""

    def kernel(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        d2 = torch.cdist(p, q) ** 2
        return sum(h * h / (h * h + d2) for h in _MMD_WIDTHS)

    return kernel(a, a).mean() + kernel(b, b).mean() - 2.0 * kernel(a, b).mean()


@dataclass
class INNTrainReport:
    train_mse: float
    test_mse: float
    train_mse_hz2: float
    test_mse_hz2: float
    latent_mmd: float
    epochs: int
    diverged: bool = False
    history: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "train_mse": self.train_mse,
            "test_mse": self.test_mse,
            "train_mse_hz2": self.train_mse_hz2,
            "test_mse_hz2": self.test_mse_hz2,
            "latent_mmd": self.latent_mmd,
            "epochs": self.epochs,
            "diverged": self.diverged,
        }


def _y_mse(model: INNModel, x: torch.Tensor, y: torch.Tensor) -> tuple[float, float]:
    """MSE of the y-part in normalised units and in Hz^2."""
    if x.shape[0] == 0:
        return float("nan"), float("nan")
    with torch.no_grad():
        pred = model(x)[0][:, :Y_DIM]
    resid = (pred - y).numpy()
    half_span = 0.5 * np.where(model.y_max > model.y_min, model.y_max - model.y_min, 1.0)
    return float(np.mean(resid**2)), float(np.mean((resid * half_span) ** 2))


def train_inn(
    data: InverseDataset,
    cfg: INNTrainConfig,
    bounds: DesignBounds,
    min_rows: int = 50,
) -> tuple[INNModel, INNTrainReport]:
    """Train forward and inverse directions jointly with Adam and an exponential LR decay.

    The loss adds the y-fit, an MMD pull of z towards a standard normal, and the error of
    reconstructing x from (y_true, z_pred) through the exact inverse.
    """
    if len(data) < min_rows:
        raise ValueError(f"INN training needs >= {min_rows} rows, got {len(data)}")
    y_min, y_max = data.y.min(axis=0), data.y.max(axis=0)
    model = build_inn(cfg, bounds, y_min, y_max)
    x_all = torch.as_tensor(normalize(data.x, bounds))
    y_all = torch.as_tensor(model.normalize_y(data.y))

    order = np.random.default_rng(cfg.seed).permutation(len(data))
    n_test = max(1, int(round(len(data) * cfg.test_fraction)))
    test_idx = torch.as_tensor(np.sort(order[:n_test]))
    train_idx = torch.as_tensor(np.sort(order[n_test:]))
    x_train, y_train = x_all[train_idx], y_all[train_idx]

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    gamma = (cfg.lr_end / cfg.lr_start) ** (1.0 / max(cfg.max_iterations - 1, 1))
    scheduler = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=gamma)

    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    history: list[float] = []
    diverged = False
    epoch = 0
    n = x_train.shape[0]
    for epoch in range(1, cfg.max_iterations + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            out, _ = model(xb)
            y_pred, z_pred = out[:, :Y_DIM], out[:, Y_DIM:]
            prior = torch.randn(z_pred.shape, generator=gen, dtype=torch.float64)
            x_rec = model.inverse(torch.cat([yb, z_pred], dim=-1))
            loss = (
                cfg.weight_y * torch.mean((y_pred - yb) ** 2)
                + cfg.weight_z * _mmd(z_pred, prior)
                + cfg.weight_x * torch.mean((x_rec - xb) ** 2)
            )
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * idx.numel()
        if diverged:
            logger.warning("INN training diverged at epoch %d; restoring the last good weights", epoch)
            model.load_state_dict(last_good)
            break
        scheduler.step()
        history.append(epoch_loss / n)
        last_good = {k: v.clone() for k, v in model.state_dict().items()}
        if epoch % 100 == 0:
            logger.info("INN epoch %d: loss %.5g, lr %.3g", epoch, history[-1], scheduler.get_last_lr()[0])

    model.eval()
    train_mse, train_hz = _y_mse(model, x_train, y_train)
    test_mse, test_hz = _y_mse(model, x_all[test_idx], y_all[test_idx])
    with torch.no_grad():
        z_train = model(x_train)[0][:, Y_DIM:]
        prior = torch.randn(z_train.shape, generator=gen, dtype=torch.float64)
        latent = float(_mmd(z_train, prior))
    report = INNTrainReport(
        train_mse, test_mse, train_hz, test_hz, latent, epoch, diverged, history
    )
    logger.info(
        "INN trained: y MSE train %.4g / test %.4g (normalised), %.4g / %.4g Hz^2, latent MMD %.4g",
        train_mse,
        test_mse,
        train_hz,
        test_hz,
        latent,
    )
    return model, report


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    design: DesignVector
    z: np.ndarray
    verification: BandVerification

    @property
    def feasible(self) -> bool:
        return self.verification.feasible

    @property
    def mass(self) -> float:
        return self.verification.mass

    def to_json(self) -> dict:
        return {
            "design": self.design.to_json(),
            "mass_kg": self.mass,
            "feasible": self.feasible,
            "verification": self.verification.to_json(),
        }


@dataclass
class Retrieval:
    band: Band
    candidates: list[Candidate]
    extrapolated: bool

    @property
    def best(self) -> Candidate:
        return self.candidates[0]

    def to_json(self) -> dict:
        return {
            "band": self.band.to_json(),
            "extrapolated": self.extrapolated,
            "oracle": "tmm",
            "best": self.best.to_json(),
            "candidates": [c.to_json() for c in self.candidates],
        }


def _rank(candidates: list[Candidate]) -> list[Candidate]:
    # Verified-feasible first, lightest first within each group
    return sorted(candidates, key=lambda c: (not c.feasible, c.mass if math.isfinite(c.mass) else math.inf))


def retrieve_design(
    model: INNModel,
    band: Band,
    pipe: PipeSpec,
    prec: PrecisionConfig,
    grids: dict[ModeKind, FrequencyGrid],
    z_policy: ZPolicy = "zero",
    k: int = 1,
    seed: int = 0,
    modes: tuple[ModeKind, ...] = (ModeKind.LATERAL,),
) -> Retrieval:
    """Invert the band into designs, clamp them into bounds and check each with the TMM."""
    y = model.normalize_y(np.array([band.lo, band.hi]))
    extrapolated = bool(np.any(np.abs(y) > 1.0 + _EXTRAPOLATION_TOL))
    if extrapolated:
        logger.warning(
            "Band %.1f-%.1f Hz lies outside the training band range (%s to %s Hz)",
            band.lo,
            band.hi,
            model.y_min.tolist(),
            model.y_max.tolist(),
        )

    if z_policy == "zero":
        zs = np.zeros((1, model.z_dim))
    elif z_policy == "sample":
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        zs = np.random.default_rng(seed).standard_normal((k, model.z_dim))
    else:
        raise ValueError(f"unknown z policy {z_policy!r}")

    xs = inn_inverse(model, np.repeat(y[None, :], zs.shape[0], axis=0), zs)
    designs = clamp(denormalize(xs, model.bounds), model.bounds)
    candidates = [
        Candidate(
            DesignVector.from_array(row),
            z,
            verify_band(DesignVector.from_array(row), band, pipe, prec, grids, modes, model.bounds),
        )
        for row, z in zip(designs, zs, strict=True)
    ]
    ranked = _rank(candidates)
    logger.info(
        "Retrieved %d candidate(s) for %.0f-%.0f Hz; best %.2f kg (%s)",
        len(ranked),
        band.lo,
        band.hi,
        ranked[0].mass,
        "verified" if ranked[0].feasible else "not verified",
    )
    return Retrieval(band, ranked, extrapolated)
