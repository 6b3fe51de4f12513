"""Run every pipeline stage in order: samples, surrogates, forward design, inverse design.

Each stage is an ordinary ``metaforge`` command, so finished stages are reused from the
workspace on a rerun. Ctrl+C stops the pipeline.
"""

import argparse
import logging
import sys

from metaforge.cli import LOG_FORMAT, execute
from metaforge.config import LOG_LEVEL
from metaforge.errors import MetaforgeError, exit_code_for

logger = logging.getLogger(__name__)


def _stage(name: str, global_args: list[str], argv: list[str]):
    logger.info("[%s] starting", name)
    out = execute([*global_args, *argv])
    logger.info("[%s] done -> %s", name, out)
    return out


def run(args: argparse.Namespace) -> int:
    global_args = []
    if args.config:
        global_args += ["--config", args.config]
    if args.workspace:
        global_args += ["--workspace", args.workspace]
    if args.threads:
        global_args += ["--threads", str(args.threads)]

    dataset = _stage("samples", global_args, ["gen-samples", "--n", str(args.samples)])
    suite = _stage(
        "surrogates",
        global_args,
        ["train-surrogates", "--dataset", str(dataset), "--validate", str(args.validate)],
    )
    _stage("forward", global_args, ["optimize-band", "--suite", str(suite), "--baseline", str(args.baseline)])
    inverse = _stage("inverse-samples", global_args, ["gen-inverse-samples", "--suite", str(suite)])
    model = _stage("inn", global_args, ["train-inn", "--inverse", str(inverse)])
    retrieved = _stage(
        "retrieve",
        global_args,
        ["retrieve", "--band", args.band, "--model", str(model), "--z-policy", "sample", "--k", "8"],
    )
    try:
        _stage("verify", global_args, ["verify", "--design", str(retrieved / "design.json"), "--band", args.band])
    except MetaforgeError as exc:
        logger.warning("Retrieved design did not verify: %s", exc)
        return exit_code_for(exc)
    return 0


def main() -> None:
    parser = argparse.ArgumentParser(description="metaforge end-to-end desk-scale pipeline")
    parser.add_argument("--config")
    parser.add_argument("--workspace")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--validate", type=int, default=50, help="held-out designs for the surrogate check")
    parser.add_argument("--baseline", type=int, default=20, help="random designs for the forward comparison")
    parser.add_argument("--band", default="6500:7000", help="retrieval band LO:HI in Hz")
    args = parser.parse_args()

    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    try:
        code = run(args)
    except MetaforgeError as exc:
        logger.error("Pipeline stopped: %s", exc)
        code = exit_code_for(exc)
    except KeyboardInterrupt:
        logger.info("Pipeline interrupted")
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main()
