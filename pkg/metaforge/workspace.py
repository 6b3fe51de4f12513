"""Workspace layout, lock files and run manifests.

    <root>/datasets/<hash>/   TMM sample sets
    <root>/models/<hash>/     surrogate suites and INN weights
    <root>/runs/<hash>/       optimisation and retrieval outputs

Directory names are content hashes of whatever determines the artifact (config sections,
seeds, input blobs), so a rerun with the same inputs lands in the same place and can be
skipped. Concurrent processes coordinate through a ``.lock`` file per directory.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .config import RunConfig, config_as_dict, config_digest
from .errors import MetaforgeError

logger = logging.getLogger(__name__)

KINDS = ("datasets", "models", "runs")
LOCK_NAME = ".lock"
MANIFEST_NAME = "manifest.json"
_HASH_CHARS = 16
_LOCK_MAX_BACKOFF = 30.0  # seconds


def blob_sha1(path: str | os.PathLike[str]) -> str:
    """Git-style blob hash: ``sha1(b"blob <size>\\0" + content)``."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(usedforsecurity=False)
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def tree_sha1(directory: str | os.PathLike[str]) -> str:
    """Hash of every regular file under ``directory`` (relative path + blob hash, sorted)."""
    root = Path(directory)
    h = hashlib.sha1(usedforsecurity=False)
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name not in (LOCK_NAME, MANIFEST_NAME)):
        h.update(f"{p.relative_to(root).as_posix()} {blob_sha1(p)}\n".encode())
    return h.hexdigest()


def input_hash(path: str | os.PathLike[str]) -> str:
    p = Path(path)
    return tree_sha1(p) if p.is_dir() else blob_sha1(p)


def content_key(parts: dict[str, Any]) -> str:
    """Short SHA-256 of the canonical JSON of ``parts``."""
    canonical = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:_HASH_CHARS]


# ---------------------------------------------------------------------------
# Locking
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def locked(directory: Path, timeout_s: float) -> Iterator[Path]:
    """Hold ``directory/.lock`` for the duration of the block.

    Waits with doubling back-off while another live process holds the lock. A lock file
    older than ``timeout_s`` is reported as stale rather than broken automatically.
    """
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    deadline = time.monotonic() + timeout_s
    delay = 1.0
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                age = time.time() - lock.stat().st_mtime
            except FileNotFoundError:
                continue
            if age > timeout_s:
                raise MetaforgeError(
                    f"stale lock {lock} ({age:.0f}s old); remove it if no other run is active"
                ) from None
            if time.monotonic() >= deadline:
                raise MetaforgeError(f"timed out after {timeout_s:g}s waiting for {lock}") from None
            logger.warning("%s is locked by another run, retrying in %.0fs...", directory, delay)
            time.sleep(delay)
            delay = min(delay * 2, _LOCK_MAX_BACKOFF)
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        break
    try:
        yield directory
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, dict[str, Any]]
    seeds: dict[str, int]
    config_digest: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    oracle: dict[str, str] = field(default_factory=dict)
    results: dict[str, Any] = field(default_factory=dict)
    started_at: str = ""
    wall_time_s: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "config_digest": self.config_digest,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "oracle": self.oracle,
            "results": self.results,
            "started_at": self.started_at,
            "wall_time_s": self.wall_time_s,
        }

    def write(self, directory: Path) -> Path:
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2, default=str) + "\n", encoding="utf-8")
        return path


class Workspace:
    def __init__(self, root: str | os.PathLike[str], lock_timeout_s: float = 3600.0):
        self.root = Path(root)
        self.lock_timeout_s = lock_timeout_s

    @classmethod
    def from_config(cls, cfg: RunConfig) -> Workspace:
        return cls(cfg.workspace, cfg.run.lock_timeout_s)

    def stage_dir(self, kind: str, parts: dict[str, Any]) -> Path:
        if kind not in KINDS:
            raise ValueError(f"unknown workspace kind {kind!r}; expected one of {KINDS}")
        return self.root / kind / content_key(parts)

    def resolve(
        self,
        kind: str,
        parts: dict[str, Any],
        inputs: dict[str, str | os.PathLike[str]] | None = None,
    ) -> tuple[Path, dict[str, str]]:
        """Directory for ``parts`` plus the hashed inputs that went into its name."""
        hashed = {name: input_hash(p) for name, p in (inputs or {}).items()}
        return self.stage_dir(kind, {**parts, "inputs": hashed}), hashed

    def is_complete(self, directory: Path) -> bool:
        """A directory is reusable once its manifest was written (the last step of a stage)."""
        return (directory / MANIFEST_NAME).is_file() and not (directory / LOCK_NAME).exists()

    @contextlib.contextmanager
    def stage(
        self,
        kind: str,
        parts: dict[str, Any],
        command: str,
        argv: list[str],
        cfg: RunConfig,
        inputs: dict[str, str | os.PathLike[str]] | None = None,
    ) -> Iterator[tuple[Path, RunManifest]]:
        """Lock a content-addressed directory and write its manifest when the block finishes."""
        directory, hashed_inputs = self.resolve(kind, parts, inputs)
        manifest = RunManifest(
            command=command,
            argv=list(argv),
            config=config_as_dict(cfg),
            seeds=cfg.seeds(),
            config_digest=config_digest(cfg),
            inputs=hashed_inputs,
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )
        start = time.perf_counter()
        with locked(directory, self.lock_timeout_s):
            logger.info("Stage %s -> %s", command, directory)
            yield directory, manifest
            manifest.wall_time_s = round(time.perf_counter() - start, 3)
            manifest.outputs = sorted(
                p.relative_to(directory).as_posix()
                for p in directory.rglob("*")
                if p.is_file() and p.name not in (LOCK_NAME, MANIFEST_NAME)
            )
            manifest.write(directory)
