"""Run manifests: resolved config, seeds, versions and output digests."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["RunManifest", "file_digest", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = ""
    versions: dict = field(default_factory=dict)

    def record_files(self, out_dir: Path, names) -> None:
        for name in sorted(names):
            self.files[name] = file_digest(Path(out_dir) / name)

    def finish(self) -> None:
        from .. import __version__
        from .._backend import BACKEND

        self.finished = _now()
        self.versions = {"spatial_sir": __version__, "backend": BACKEND, "numpy": np.__version__,
                         "python": platform.python_version()}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        payload = {
            "format": "spatial-sir-manifest v1",
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "files": self.files,
            "started": self.started,
            "finished": self.finished,
            "versions": self.versions,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("format") != "spatial-sir-manifest v1":
            raise ValueError(f"{path}: not a spatial-sir manifest")
        return cls(command=d["command"], config=d["config"], seeds=d.get("seeds", []), files=d.get("files", {}),
                   started=d.get("started", ""), finished=d.get("finished", ""), versions=d.get("versions", {}))
