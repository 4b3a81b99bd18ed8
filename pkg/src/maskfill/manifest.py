"""Run manifests: the record needed to reproduce a CLI run.

In strict mode the wall-clock timing block is omitted so two identical runs
produce byte-identical manifests.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_VERSION = 1


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    strict: bool = False
    weights_digest: str | None = None
    rows: list[dict] = field(default_factory=list)
    timings: dict | None = None
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        payload = asdict(self)
        if self.strict:
            payload["timings"] = None
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_manifest(manifest: RunManifest, path) -> Path:
    path = Path(path)
    path.write_text(manifest.to_json())
    return path


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def manifest_path_for(output: Path) -> Path:
    """manifest.json inside an output directory, or a .manifest.json sibling."""
    output = Path(output)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")
