"""Run manifests: config snapshots plus checksums of every produced artifact."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .exceptions import FormatError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    params: dict
    inputs: dict
    outputs: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    seed: int | None = None
    started: str = ""
    finished: str = ""

    def add_output(self, name: str, path: str | Path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def to_dict(self) -> dict:
        return {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "params": self.params,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "started": self.started,
            "finished": self.finished,
        }

    def write(self, out_dir: str | Path) -> Path:
        self.finished = utc_now()
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("manifest_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest_version {d.get('manifest_version')!r}")
        return cls(
            command=d["command"],
            params=d["params"],
            inputs=d["inputs"],
            outputs=d["outputs"],
            seed=d["seed"],
            started=d["started"],
            finished=d["finished"],
        )


def start_manifest(command: str, params: dict, inputs: dict, seed: int | None = None) -> RunManifest:
    return RunManifest(
        command=command,
        params=params,
        inputs={k: str(v) for k, v in inputs.items()},
        seed=seed,
        started=utc_now(),
    )


def compare_artifacts(a: RunManifest, b: RunManifest) -> dict[str, bool]:
    """Checksum equality per shared output name (manifests themselves differ
    by timestamps and are not artifacts)."""
    shared = set(a.outputs) & set(b.outputs)
    return {name: a.outputs[name]["sha256"] == b.outputs[name]["sha256"] for name in sorted(shared)}
