"""Run-directory bookkeeping: content-hashed stage fingerprints so
re-running a stage with unchanged inputs is a no-op, and a lock file so
only one pipeline stage runs per directory at a time."""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

from .errors import StageDependencyError


def hash_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._stage_dir = self.path / ".stages"
        self._stage_dir.mkdir(exist_ok=True)

    def subdir(self, name: str) -> Path:
        out = self.path / name
        out.mkdir(parents=True, exist_ok=True)
        return out

    def require(self, stage: str, artifact: str | Path) -> Path:
        """Resolve an upstream artifact, failing with its name when absent."""
        artifact = Path(artifact)
        if not artifact.exists():
            raise StageDependencyError(stage, str(artifact))
        return artifact

    def fingerprint(self, inputs: list[str | Path], params: dict) -> str:
        digest = hashlib.sha256()
        for item in inputs:
            path = Path(item)
            digest.update(str(path).encode())
            digest.update(hash_file(path).encode())
        digest.update(json.dumps(params, sort_keys=True, default=str).encode())
        return digest.hexdigest()

    def is_current(self, stage: str, fingerprint: str) -> bool:
        record_path = self._stage_dir / f"{stage}.json"
        if not record_path.exists():
            return False
        with open(record_path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        if record.get("fingerprint") != fingerprint:
            return False
        return all(Path(p).exists() for p in record.get("outputs", []))

    def mark(self, stage: str, fingerprint: str, outputs: list[str | Path]) -> None:
        record = {"fingerprint": fingerprint, "outputs": [str(p) for p in outputs]}
        with open(self._stage_dir / f"{stage}.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)

    @contextmanager
    def lock(self):
        """Exclusive per-run-directory lock for pipeline stages."""
        lock_path = self.path / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RuntimeError(
                f"run directory is locked by another stage ({lock_path})"
            ) from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)
