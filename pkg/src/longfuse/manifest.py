"""Run manifests: a JSON record of config, input hashes, outputs, and
timings sufficient to reproduce a run."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from . import __version__


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(command: str, config: dict, inputs, outputs,
                   timings: dict | None = None) -> dict:
    return {
        "tool": "longfuse",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": [{"path": str(p), "sha256": sha256_of(p)} for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timings_seconds": timings or {},
    }


def write_manifest(path, manifest: dict) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
