"""Run manifests written beside every CLI output."""
from __future__ import annotations

import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def atomic_write(path, data) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunRecorder:
    """Collects inputs/outputs of one command and writes the manifest at the end."""

    def __init__(self, config: dict, seeds=(), deterministic: bool = True, workers: int = 1,
                 command_line=None):
        self.config = config
        self.command_line = list(sys.argv if command_line is None else command_line)
        self.seeds = list(seeds)
        self.deterministic = deterministic
        self.workers = workers
        self.inputs = []
        self.outputs = []
        self.started = time.monotonic()

    def input(self, path) -> None:
        if path is not None:
            self.inputs.append(Path(path))

    def output(self, path) -> None:
        self.outputs.append(Path(path))

    def manifest(self) -> dict:
        return {
            "artifact_version": __version__,
            "command_line": self.command_line,
            "config": self.config,
            "config_digest": config_digest(self.config),
            "seeds": self.seeds,
            "deterministic": self.deterministic,
            "workers": self.workers,
            "inputs": {str(p): file_digest(p) for p in self.inputs},
            "outputs": {str(p): file_digest(p) for p in self.outputs if p.is_file()},
            "wall_clock_s": round(time.monotonic() - self.started, 3),
        }

    def write(self, path) -> Path:
        path = Path(path)
        atomic_write(path, json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path

    def write_beside(self, output) -> Path:
        output = Path(output)
        return self.write(output.with_name(output.name + ".run.json"))
