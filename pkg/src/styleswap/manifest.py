"""Run manifests: everything needed to reproduce a command's outputs bitwise.

Every CLI command writes one of these next to its outputs. The ``args`` dict
holds the fully resolved flag values (defaults applied), so replaying a
manifest re-executes the identical configuration; output checksums let the
replay be verified byte-for-byte.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .checkpoint import file_sha256

MANIFEST_SUFFIX = ".manifest.json"


def git_describe(cwd: Optional[str] = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=cwd, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


@dataclass
class RunManifest:
    command: str
    args: dict                       # resolved flag values, JSON-able
    seeds: dict = field(default_factory=dict)
    checkpoint_hashes: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)   # path (as given) -> sha256
    git: str = "unknown"
    wall_time: float = 0.0

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def add_checkpoint(self, name: str, path) -> None:
        self.checkpoint_hashes[name] = file_sha256(path)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> RunManifest:
    data = json.loads(Path(path).read_text())
    return RunManifest(**data)


def manifest_path_for(output_path) -> Path:
    """Conventional manifest location next to a single-file output."""
    p = Path(output_path)
    return p.with_name(p.name + MANIFEST_SUFFIX)
