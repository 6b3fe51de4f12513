"""Process-level settings from the environment and the schema-validated run configuration.

Environment variables (a ``.env`` file is honoured):

    METAFORGE_WORKSPACE       workspace root, overrides ``run.workspace``
    METAFORGE_LOG_LEVEL       logging level for the CLI (default INFO)
    METAFORGE_THREADS         default worker count for ``--threads`` (default 1)
    METAFORGE_RESONANCE_CAP   default transmission-ratio cap (default 1e12)

Run configuration is an INI file whose sections map onto the frozen dataclasses below.
Defaults mirror the drill-pipe study: a 9 m pipe, ten inserts, 80-point grids, 100-digit TMM,
a 30-100-6 surrogate per frequency, a 300 x 50 swarm and a 1500-iteration INN.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()


def _env_int(name: str, default: int) -> int:
    """Read an integer env var, raising ConfigError naming the variable on bad input."""
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name} must be a number, got {raw!r}") from exc


LOG_LEVEL: str = os.getenv("METAFORGE_LOG_LEVEL", "INFO").upper()
DEFAULT_THREADS: int = _env_int("METAFORGE_THREADS", 1)
DEFAULT_RESONANCE_CAP: float = _env_float("METAFORGE_RESONANCE_CAP", 1e12)

WORKSPACE_ENV_VAR = "METAFORGE_WORKSPACE"


def workspace_override() -> str | None:
    """Return the workspace path from the environment, if set (read at call time)."""
    value = os.getenv(WORKSPACE_ENV_VAR, "").strip()
    return value or None


# ---------------------------------------------------------------------------
# Config records
# ---------------------------------------------------------------------------


class _Section:
    """Mixin giving each record a config section name and uniform range checks."""

    section: ClassVar[str] = ""

    def _require(self, key: str, ok: bool, message: str) -> None:
        if not ok:
            raise ConfigError(f"{self.section}.{key}: {message}")

    def _positive(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            self._require(key, math.isfinite(value) and value > 0, f"must be > 0, got {value!r}")


@dataclass(frozen=True)
class PipeSpec(_Section):
    """Host pipe geometry and material (SI units)."""

    section: ClassVar[str] = "pipe"

    length: float = 9.0
    density: float = 1800.0
    youngs: float = 193e9
    shear: float = 77.2e9
    inner_diameter: float = 0.15
    outer_diameter: float = 0.16

    def __post_init__(self) -> None:
        self._positive("length", "density", "youngs", "shear", "inner_diameter", "outer_diameter")
        self._require(
            "outer_diameter",
            self.outer_diameter > self.inner_diameter,
            f"must exceed inner_diameter ({self.inner_diameter!r}), got {self.outer_diameter!r}",
        )


@dataclass(frozen=True)
class DesignBounds(_Section):
    """Per-variable box for insert diameter, insert width and gap width (meters)."""

    section: ClassVar[str] = "bounds"

    d_min: float = 0.16
    d_max: float = 0.32
    w_ring_min: float = 0.075
    w_ring_max: float = 0.375
    w_gap_min: float = 0.0015
    w_gap_max: float = 0.0225
    n_inserts: int = 10

    def __post_init__(self) -> None:
        self._positive("d_min", "d_max", "w_ring_min", "w_ring_max", "w_gap_min", "w_gap_max")
        self._require("n_inserts", self.n_inserts >= 1, f"must be >= 1, got {self.n_inserts!r}")
        for lo, hi in (("d_min", "d_max"), ("w_ring_min", "w_ring_max"), ("w_gap_min", "w_gap_max")):
            self._require(hi, getattr(self, hi) >= getattr(self, lo), f"must be >= {lo}")


@dataclass(frozen=True)
class GridConfig(_Section):
    """Analysis ranges; axial and torsional share one range, lateral has its own."""

    section: ClassVar[str] = "grid"

    axial_lo: float = 0.1
    axial_hi: float = 800.0
    lateral_lo: float = 0.1
    lateral_hi: float = 10000.0
    n_points: int = 80

    def __post_init__(self) -> None:
        self._positive("axial_lo", "axial_hi", "lateral_lo", "lateral_hi")
        self._require("axial_hi", self.axial_hi > self.axial_lo, "must exceed axial_lo")
        self._require("lateral_hi", self.lateral_hi > self.lateral_lo, "must exceed lateral_lo")
        self._require("n_points", self.n_points >= 3, f"must be >= 3, got {self.n_points!r}")


@dataclass(frozen=True)
class PrecisionConfig(_Section):
    """Working precision of the transfer-matrix engine."""

    section: ClassVar[str] = "tmm"

    decimal_digits: int = 100
    resonance_cap: float = DEFAULT_RESONANCE_CAP

    def __post_init__(self) -> None:
        self._require(
            "decimal_digits",
            self.decimal_digits >= 16,
            f"must be >= 16, got {self.decimal_digits!r}",
        )
        self._positive("resonance_cap")


@dataclass(frozen=True)
class SamplerConfig(_Section):
    section: ClassVar[str] = "sampler"

    n_samples: int = 2000
    seed: int = 7

    def __post_init__(self) -> None:
        self._require("n_samples", self.n_samples >= 1, f"must be >= 1, got {self.n_samples!r}")
        self._require("seed", self.seed >= 0, "must be >= 0")


@dataclass(frozen=True)
class TrainConfig(_Section):
    """SGD-with-momentum settings for the per-frequency surrogate networks."""

    section: ClassVar[str] = "surrogate"

    max_iterations: int = 200
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    test_fraction: float = 0.2
    hidden_units: int = 100
    seed: int = 11

    def __post_init__(self) -> None:
        self._positive("max_iterations", "learning_rate", "momentum", "batch_size", "hidden_units")
        self._require("momentum", self.momentum < 1, "must be < 1")
        self._require(
            "test_fraction", 0 < self.test_fraction < 1, f"must be in (0, 1), got {self.test_fraction!r}"
        )
        self._require("seed", self.seed >= 0, "must be >= 0")


@dataclass(frozen=True)
class PsoConfig(_Section):
    """Global-best particle swarm settings (constriction-type coefficients by default)."""

    section: ClassVar[str] = "pso"

    population: int = 300
    max_iterations: int = 50
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    velocity_clamp: float = 0.2
    penalty: float = 1000.0
    seed: int = 3

    def __post_init__(self) -> None:
        self._require("population", self.population >= 2, f"must be >= 2, got {self.population!r}")
        self._positive("max_iterations", "inertia", "cognitive", "social", "velocity_clamp", "penalty")
        self._require("seed", self.seed >= 0, "must be >= 0")


@dataclass(frozen=True)
class ObjectiveConfig(_Section):
    """Minimum acceptable non-resonant range width per mode family (Hz)."""

    section: ClassVar[str] = "objective"

    omega_c_axial: float = 200.0
    omega_c_torsional: float = 200.0
    omega_c_lateral: float = 1000.0

    def __post_init__(self) -> None:
        self._positive("omega_c_axial", "omega_c_torsional", "omega_c_lateral")


@dataclass(frozen=True)
class InverseConfig(_Section):
    """Band plan for generating mass-minimal (design, band) training pairs."""

    section: ClassVar[str] = "inverse"

    band_widths: tuple[float, ...] = (250.0, 500.0, 750.0, 1000.0)
    centers_per_width: int = 25

    def __post_init__(self) -> None:
        self._require("band_widths", len(self.band_widths) > 0, "must list at least one width")
        self._require(
            "band_widths",
            all(math.isfinite(w) and w > 0 for w in self.band_widths),
            "all widths must be > 0",
        )
        self._require("centers_per_width", self.centers_per_width >= 1, "must be >= 1")


@dataclass(frozen=True)
class INNTrainConfig(_Section):
    """Architecture and Adam schedule of the invertible network."""

    section: ClassVar[str] = "inn"

    max_iterations: int = 1500
    lr_start: float = 1e-3
    lr_end: float = 0.02e-3
    batch_size: int = 64
    weight_y: float = 1.0
    weight_z: float = 0.5
    weight_x: float = 1.0
    n_blocks: int = 4
    hidden_units: int = 64
    negative_slope: float = 0.01
    test_fraction: float = 0.2
    z_candidates: int = 8
    seed: int = 5

    def __post_init__(self) -> None:
        self._positive(
            "max_iterations", "lr_start", "lr_end", "batch_size", "hidden_units", "negative_slope"
        )
        self._require("lr_end", self.lr_end < self.lr_start, "must be below lr_start")
        self._require("n_blocks", self.n_blocks >= 2 and self.n_blocks % 2 == 0, "must be even and >= 2")
        for key in ("weight_y", "weight_z", "weight_x"):
            self._require(key, getattr(self, key) >= 0, "must be >= 0")
        self._require("test_fraction", 0 < self.test_fraction < 1, "must be in (0, 1)")
        self._require("z_candidates", self.z_candidates >= 1, "must be >= 1")
        self._require("seed", self.seed >= 0, "must be >= 0")


@dataclass(frozen=True)
class RunSettings(_Section):
    section: ClassVar[str] = "run"

    workspace: str = "workspace"
    threads: int = DEFAULT_THREADS
    lock_timeout_s: float = 3600.0

    def __post_init__(self) -> None:
        self._require("workspace", bool(self.workspace.strip()), "must not be empty")
        self._require("threads", self.threads >= 1, f"must be >= 1, got {self.threads!r}")
        self._positive("lock_timeout_s")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline stage needs; one attribute per config section."""

    pipe: PipeSpec = field(default_factory=PipeSpec)
    bounds: DesignBounds = field(default_factory=DesignBounds)
    grid: GridConfig = field(default_factory=GridConfig)
    tmm: PrecisionConfig = field(default_factory=PrecisionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    surrogate: TrainConfig = field(default_factory=TrainConfig)
    pso: PsoConfig = field(default_factory=PsoConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    inn: INNTrainConfig = field(default_factory=INNTrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def workspace(self) -> Path:
        return Path(self.run.workspace)

    def seeds(self) -> dict[str, int]:
        return {
            "sampler": self.sampler.seed,
            "surrogate": self.surrogate.seed,
            "pso": self.pso.seed,
            "inn": self.inn.seed,
        }


_SECTIONS: dict[str, Any] = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


# ---------------------------------------------------------------------------
# INI parsing / serialisation
# ---------------------------------------------------------------------------


def _parse_value(key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_DEFAULT_SECTION = "__defaults__"


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse INI text into a validated RunConfig; unknown sections and keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, default_section=_DEFAULT_SECTION)
    parser.optionxform = str  # type: ignore[assignment]
    # configparser would merge this section into every other one
    for line in text.splitlines():
        header = parser.SECTCRE.match(line.strip())
        if header and header.group("header").strip() == _DEFAULT_SECTION:
            raise ConfigError(f"{source}: unknown section [{_DEFAULT_SECTION}]")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    sections: dict[str, Any] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        record_cls = _SECTIONS[name]
        defaults = record_cls()
        known = {f.name for f in dataclasses.fields(record_cls)}
        values: dict[str, Any] = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            values[key] = _parse_value(f"{name}.{key}", raw, getattr(defaults, key))
        sections[name] = record_cls(**values)

    override = workspace_override()
    if override:
        run = sections.get("run", RunSettings())
        sections["run"] = dataclasses.replace(run, workspace=override)
    return RunConfig(**sections)


def load_config(path: str | os.PathLike[str] | None) -> RunConfig:
    """Load and validate a run config; ``None`` yields the all-defaults config."""
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), source=str(p))


def dump_config(cfg: RunConfig) -> str:
    """Serialise every key of ``cfg`` to INI text, sections in declaration order."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment]
    for section_field in dataclasses.fields(cfg):
        record = getattr(cfg, section_field.name)
        parser[section_field.name] = {
            f.name: _format_value(getattr(record, f.name)) for f in dataclasses.fields(record)
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path: str | os.PathLike[str]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_config(cfg), encoding="utf-8")
    return p


def config_as_dict(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    """JSON-friendly echo of the config for run manifests."""
    return {
        f.name: {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(getattr(cfg, f.name)).items()}
        for f in dataclasses.fields(cfg)
    }


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical dump, excluding run-local settings that do not affect numbers."""
    numeric = dataclasses.replace(cfg, run=RunSettings(workspace="-", threads=1))
    return hashlib.sha256(dump_config(numeric).encode("utf-8")).hexdigest()
