"""Command-line entry point for the design pipeline.

Usage:
    python -m metaforge [--config run.ini] [--workspace DIR] [--threads N] <command> ...

Every command writes into a content-addressed workspace directory and prints that
directory on stdout. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from .config import LOG_LEVEL, RunConfig, config_as_dict, load_config
from .curves import ModeKind
from .errors import DomainError, InfeasibleDesignError, MetaforgeError, exit_code_for
from .geometry import DesignVector, build_segments, radius_profile
from .inn import INNModel, retrieve_design, train_inn
from .optimize import (
    InverseDataset,
    applicable_modes,
    band_plan,
    generate_inverse_dataset,
    maximize_band,
    random_baseline,
    verify_band,
)
from .response import Band, band_report_json
from .surrogate import Dataset, SurrogateSuite, generate_dataset, held_out_designs, train_suite, validate_suite
from .tmm import mode_grids, sweep_all_modes
from .workspace import Workspace

logger = logging.getLogger(__name__)

UNIFORM_DESIGN = "uniform"
LOG_FORMAT = "%(asctime)s %(levelname)s [metaforge] %(message)s"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _sections(cfg: RunConfig, *names: str) -> dict[str, Any]:
    everything = config_as_dict(cfg)
    return {name: everything[name] for name in names}


def _parse_band(text: str) -> Band:
    # Malformed bands are infeasible input for the commands that take one
    try:
        return Band.parse(text)
    except DomainError as exc:
        raise InfeasibleDesignError(str(exc)) from exc


def _check_band(band: Band, cfg: RunConfig, modes: tuple[ModeKind, ...] | None) -> None:
    # A band no analysis range covers cannot be verified; reject it as infeasible input
    try:
        applicable_modes(band, mode_grids(cfg.grid), modes)
    except DomainError as exc:
        raise InfeasibleDesignError(str(exc)) from exc


def _load_design(spec: str, cfg: RunConfig) -> DesignVector:
    if spec == UNIFORM_DESIGN:
        return DesignVector.uniform(cfg.pipe, cfg.bounds)
    return DesignVector.load(spec)


def _design_input(spec: str) -> dict[str, str]:
    return {} if spec == UNIFORM_DESIGN else {"design": spec}


def _suite_dir(path: str | Path) -> Path:
    p = Path(path)
    return p / "suite" if (p / "suite" / "manifest.json").is_file() else p


def _write_json(path: Path, payload: Any) -> Path:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _write_profile(path: Path, design: DesignVector, cfg: RunConfig) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x_start_m", "x_end_m", "outer_diameter_m"])
        for row in radius_profile(build_segments(design, cfg.pipe)):
            writer.writerow([repr(v) for v in row])
    return path


def _write_trace(path: Path, trace: Sequence[float]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "best_value"])
        for i, value in enumerate(trace):
            writer.writerow([i, repr(float(value))])
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    design = _load_design(args.design, cfg)
    chain = build_segments(design, cfg.pipe, cfg.bounds)
    modes = tuple(ModeKind) if args.mode == "all" else (ModeKind(args.mode),)
    grids = mode_grids(cfg.grid)
    parts = {
        "command": "sweep",
        "design": args.design if args.design == UNIFORM_DESIGN else None,
        "modes": [m.value for m in modes],
        **_sections(cfg, "pipe", "grid", "tmm"),
    }
    with ws.stage("runs", parts, "sweep", args.argv, cfg, _design_input(args.design)) as (out, manifest):
        curves = sweep_all_modes(chain, grids, cfg.tmm, modes)
        for mode, curve in curves.items():
            curve.save_csv(out / f"curve_{mode.value}.csv")
        (out / "bands.json").write_text(band_report_json(list(curves.values())) + "\n", encoding="utf-8")
        design.save(out / "design.json")
        _write_profile(out / "profile.csv", design, cfg)
        manifest.oracle = {"magnitudes": "tmm", "bands": "tmm"}
    return out


def cmd_gen_samples(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    if args.n is not None:
        cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, n_samples=args.n))
    parts = {"command": "gen-samples", **_sections(cfg, "pipe", "bounds", "grid", "tmm", "sampler")}
    existing, _ = ws.resolve("datasets", parts)
    if ws.is_complete(existing) and not args.force:
        logger.info("Reusing dataset %s", existing)
        return existing
    with ws.stage("datasets", parts, "gen-samples", args.argv, cfg) as (out, manifest):
        data = generate_dataset(
            cfg.sampler.n_samples,
            cfg.pipe,
            cfg.sampler.seed,
            cfg.tmm,
            bounds=cfg.bounds,
            grid_cfg=cfg.grid,
            threads=cfg.run.threads,
        )
        data.save(out)
        manifest.oracle = {"targets": "tmm"}
        manifest.results = {"n_samples": data.n_samples, "n_frequencies": data.n_frequencies}
    return out


def cmd_train_surrogates(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    parts = {
        "command": "train-surrogates",
        "validate": args.validate,
        **_sections(cfg, "surrogate", "pipe", "tmm", "sampler"),
    }
    inputs = {"dataset": args.dataset}
    existing, _ = ws.resolve("models", parts, inputs)
    if ws.is_complete(existing) and not args.force:
        logger.info("Reusing surrogate suite %s", existing)
        return existing
    data = Dataset.load(args.dataset)
    with ws.stage("models", parts, "train-surrogates", args.argv, cfg, inputs) as (out, manifest):
        suite = train_suite(data, cfg.surrogate, threads=cfg.run.threads)
        suite.save(out / "suite")
        test = [m.test_mse for m in suite.metrics]
        manifest.results = {
            "n_models": suite.n_models,
            "diverged": sum(m.diverged for m in suite.metrics),
            "fraction_test_mse_below_0.05": sum(t < 0.05 for t in test) / len(test),
        }
        manifest.oracle = {"metrics": "surrogate"}
        if args.validate:
            designs = held_out_designs(args.validate, cfg.pipe, cfg.bounds, cfg.sampler.seed)
            report = validate_suite(suite, designs, cfg.pipe, cfg.tmm)
            _write_json(out / "validation.json", report.to_json())
            manifest.results["validation"] = report.to_json()
            manifest.oracle["validation"] = "tmm vs surrogate"
    return out


def cmd_optimize_band(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    parts = {
        "command": "optimize-band",
        "baseline": args.baseline,
        **_sections(cfg, "pso", "objective", "pipe", "tmm", "sampler"),
    }
    inputs = {"suite": _suite_dir(args.suite)}
    suite = SurrogateSuite.load(inputs["suite"])
    with ws.stage("runs", parts, "optimize-band", args.argv, cfg, inputs) as (out, manifest):
        result = maximize_band(suite, cfg.pso, cfg.pipe, cfg.tmm, cfg.objective)
        _write_json(out / "result.json", result.to_json())
        result.design.save(out / "design.json")
        _write_profile(out / "profile.csv", result.design, cfg)
        _write_trace(out / "trace.csv", result.trace)
        manifest.results = {"result": result.to_json(), "trace": result.trace}
        manifest.oracle = {"objective": "surrogate", "verified_ranges": "tmm"}
        if args.baseline:
            baseline = random_baseline(
                args.baseline, cfg.pipe, suite.bounds, suite.grids, cfg.tmm, cfg.sampler.seed
            )
            _write_json(out / "baseline.json", baseline.to_json())
            manifest.results["baseline"] = baseline.to_json()
            manifest.oracle["baseline"] = "tmm"
    return out


def cmd_gen_inverse_samples(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    parts = {
        "command": "gen-inverse-samples",
        "limit": args.limit,
        **_sections(cfg, "pso", "inverse", "pipe", "tmm"),
    }
    inputs = {"suite": _suite_dir(args.suite)}
    existing, _ = ws.resolve("datasets", parts, inputs)
    if ws.is_complete(existing) and not args.force:
        logger.info("Reusing inverse dataset %s", existing)
        return existing
    suite = SurrogateSuite.load(inputs["suite"])
    plan = band_plan(cfg.inverse.band_widths, cfg.inverse.centers_per_width, suite.grids[ModeKind.LATERAL])
    if args.limit is not None:
        plan = plan[: args.limit]
    with ws.stage("datasets", parts, "gen-inverse-samples", args.argv, cfg, inputs) as (out, manifest):
        data = generate_inverse_dataset(suite, plan, cfg.pso, cfg.pipe, cfg.tmm)
        data.save(out / "inverse.csv")
        _write_json(out / "plan.json", [b.to_json() for b in plan])
        manifest.results = {"planned": len(plan), "rows": len(data), "dropped": len(plan) - len(data)}
        manifest.oracle = {"designs": "surrogate", "verified": "tmm"}
    return out


def cmd_train_inn(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    source = Path(args.inverse)
    csv_path = source / "inverse.csv" if source.is_dir() else source
    parts = {"command": "train-inn", **_sections(cfg, "inn", "bounds")}
    inputs = {"inverse": csv_path}
    existing, _ = ws.resolve("models", parts, inputs)
    if ws.is_complete(existing) and not args.force:
        logger.info("Reusing INN %s", existing)
        return existing
    data = InverseDataset.load(csv_path)
    with ws.stage("models", parts, "train-inn", args.argv, cfg, inputs) as (out, manifest):
        model, report = train_inn(data, cfg.inn, cfg.bounds)
        model.save(out / "inn.bin", metrics=report.to_json())
        manifest.results = report.to_json()
        manifest.oracle = {"metrics": "inn"}
    return out


def cmd_retrieve(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    band = _parse_band(args.band)
    _check_band(band, cfg, (ModeKind.LATERAL,))
    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / "inn.bin"
    model = INNModel.load(model_path)
    k = args.k if args.k is not None else (cfg.inn.z_candidates if args.z_policy == "sample" else 1)
    parts = {
        "command": "retrieve",
        "band": band.to_json(),
        "z_policy": args.z_policy,
        "k": k,
        "seed": args.seed,
        **_sections(cfg, "pipe", "grid", "tmm"),
    }
    inputs = {"model": model_path, "model_manifest": model_path.with_suffix(".json")}
    with ws.stage("runs", parts, "retrieve", args.argv, cfg, inputs) as (out, manifest):
        retrieval = retrieve_design(
            model,
            band,
            cfg.pipe,
            cfg.tmm,
            mode_grids(cfg.grid),
            z_policy=args.z_policy,
            k=k,
            seed=args.seed,
        )
        retrieval.best.design.save(out / "design.json")
        _write_json(out / "report.json", retrieval.to_json())
        _write_profile(out / "profile.csv", retrieval.best.design, cfg)
        manifest.results = {
            "best_mass_kg": retrieval.best.mass,
            "feasible": retrieval.best.feasible,
            "extrapolated": retrieval.extrapolated,
        }
        manifest.oracle = {"design": "inn", "verification": "tmm"}
    return out


def cmd_verify(args: argparse.Namespace, cfg: RunConfig, ws: Workspace) -> Path:
    band = _parse_band(args.band)
    design = _load_design(args.design, cfg)
    modes = None if args.mode == "applicable" else (ModeKind(args.mode),)
    _check_band(band, cfg, modes)
    parts = {
        "command": "verify",
        "band": band.to_json(),
        "mode": args.mode,
        **_sections(cfg, "pipe", "bounds", "grid", "tmm"),
    }
    with ws.stage("runs", parts, "verify", args.argv, cfg, _design_input(args.design)) as (out, manifest):
        report = verify_band(design, band, cfg.pipe, cfg.tmm, mode_grids(cfg.grid), modes, cfg.bounds)
        _write_json(out / "report.json", report.to_json())
        manifest.results = {"feasible": report.feasible, "mass_kg": report.mass}
        manifest.oracle = {"verification": "tmm"}
    if not report.feasible:
        raise InfeasibleDesignError(
            f"design does not clear {band.lo:g}-{band.hi:g} Hz: "
            + ", ".join(f"{m.value}={v.peaks_in_band}" for m, v in report.modes.items())
        )
    return out


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig, Workspace], Path]] = {
    "sweep": cmd_sweep,
    "gen-samples": cmd_gen_samples,
    "train-surrogates": cmd_train_surrogates,
    "optimize-band": cmd_optimize_band,
    "gen-inverse-samples": cmd_gen_inverse_samples,
    "train-inn": cmd_train_inn,
    "retrieve": cmd_retrieve,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaforge", description="Aperiodic drill-pipe metamaterial design pipeline"
    )
    parser.add_argument("--config", help="INI run config (default: built-in defaults)")
    parser.add_argument("--workspace", help="workspace root (overrides config and METAFORGE_WORKSPACE)")
    parser.add_argument("--threads", type=int, help="worker processes/threads for parallel stages")
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="log level (default: METAFORGE_LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in ModeKind]

    p = sub.add_parser("sweep", help="TMM transmission curves for one design")
    p.add_argument("--design", default=UNIFORM_DESIGN, help="design JSON, or 'uniform' for the bare pipe")
    p.add_argument("--mode", default="all", choices=[*modes, "all"])

    p = sub.add_parser("gen-samples", help="Latin-hypercube designs swept by the TMM")
    p.add_argument("--n", type=int, help="number of samples (overrides sampler.n_samples)")
    p.add_argument("--force", action="store_true", help="recompute even if a finished dataset exists")

    p = sub.add_parser("train-surrogates", help="train the per-frequency surrogate suite")
    p.add_argument("--dataset", required=True, help="dataset directory from gen-samples")
    p.add_argument("--validate", type=int, default=0, metavar="N", help="TMM-check N held-out designs")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("optimize-band", help="maximise the non-resonant ranges with PSO")
    p.add_argument("--suite", required=True, help="surrogate suite directory")
    p.add_argument("--baseline", type=int, default=0, metavar="K", help="compare against K random designs")

    p = sub.add_parser("gen-inverse-samples", help="mass-minimal designs over the band plan")
    p.add_argument("--suite", required=True, help="surrogate suite directory")
    p.add_argument("--limit", type=int, help="only the first N planned bands")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train-inn", help="train the invertible network on an inverse dataset")
    p.add_argument("--inverse", required=True, help="inverse.csv or its dataset directory")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("retrieve", help="design for a band from a trained INN")
    p.add_argument("--band", required=True, help="LO:HI in Hz")
    p.add_argument("--model", required=True, help="inn.bin (with inn.json beside it) or its directory")
    p.add_argument("--z-policy", default="zero", choices=["zero", "sample"])
    p.add_argument("--k", type=int, help="candidates for the sample policy (default: inn.z_candidates)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="TMM re-check of a design against a band")
    p.add_argument("--design", required=True, help="design JSON, or 'uniform'")
    p.add_argument("--band", required=True, help="LO:HI in Hz")
    p.add_argument("--mode", default="applicable", choices=[*modes, "applicable"])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then environment, then command-line flags."""
    cfg = load_config(args.config)
    run = cfg.run
    if args.workspace:
        run = dataclasses.replace(run, workspace=args.workspace)
    if args.threads is not None:
        run = dataclasses.replace(run, threads=args.threads)
    return dataclasses.replace(cfg, run=run)


def execute(argv: Sequence[str]) -> Path:
    """Run one command and return its artifact directory; errors propagate."""
    args = build_parser().parse_args(list(argv))
    args.argv = list(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    cfg = resolve_config(args)
    return COMMANDS[args.command](args, cfg, Workspace.from_config(cfg))


def run_command(argv: Sequence[str]) -> int:
    """``execute`` with errors mapped onto exit codes; prints the artifact directory."""
    try:
        out = execute(argv)
    except MetaforgeError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except Exception:
        logger.exception("Unexpected failure")
        return 1
    print(out)
    return 0


def main() -> None:
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, stream=sys.stderr)
    sys.exit(run_command(sys.argv[1:]))
