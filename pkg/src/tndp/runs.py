"""Run directories and their manifests.

Every artifact-producing command gets a directory ``<timestamp>_seed<seed>``
under the output root. ``manifest.json`` is written first with
``status: running`` and rewritten with the end time and output list when the
command finishes.
"""
from __future__ import annotations

import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

OUTPUT_ROOT_ENV = "TNDP_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


def code_version() -> str:
    from tndp import __version__

    return __version__


def output_root(cli_value: Optional[str] = None) -> str:
    return cli_value or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def write_json_atomic(obj, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@dataclass
class RunManifest:
    command: list[str]
    config_hash: str
    seed: int
    code_version: str
    start_time: str
    end_time: Optional[str] = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


class RunDirectory:
    """Owns one run directory; all outputs of a command go through :meth:`path`."""

    def __init__(self, path: str, manifest: RunManifest):
        self.root = path
        self.manifest = manifest
        self.manifest_path = os.path.join(path, "manifest.json")

    @classmethod
    def create(cls, out_root: str, seed: int, config_hash: str, argv: Optional[list[str]] = None,
               extra: Optional[dict] = None) -> "RunDirectory":
        os.makedirs(out_root, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        base = os.path.join(out_root, f"{stamp}_seed{seed}")
        path, n = base, 1
        while True:
            try:
                os.makedirs(path)
                break
            except FileExistsError:
                n += 1
                path = f"{base}-{n}"
        manifest = RunManifest(list(argv if argv is not None else sys.argv), config_hash, seed,
                               code_version(), _now(), extra=extra or {})
        run = cls(path, manifest)
        run.save()
        return run

    @classmethod
    def open(cls, path: str) -> "RunDirectory":
        mpath = os.path.join(path, "manifest.json")
        if not os.path.exists(mpath):
            raise FileNotFoundError(f"{path} has no manifest.json")
        return cls(path, RunManifest.load(mpath))

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def save(self) -> None:
        write_json_atomic(asdict(self.manifest), self.manifest_path)

    def finalize(self, status: str = "ok") -> None:
        self.manifest.end_time = _now()
        self.manifest.status = status
        self.manifest.outputs = sorted(
            f for f in os.listdir(self.root) if f != "manifest.json" and not f.endswith(".tmp"))
        self.save()
