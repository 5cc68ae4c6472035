"""Run manifests: one ``<artifact>.manifest.json`` sidecar per output file.

A manifest records the command, the config hash, the seed, the tool version,
wall-clock start/finish times and the sha256 of the artifact and of every
input it was built from. :func:`verify_tree` re-hashes everything and
reports mismatches, so a chain of artifacts can be checked end to end.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

SUFFIX = ".manifest.json"
SCHEMA_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _rel(path: Path, root: Path) -> str:
    path = Path(path).resolve()
    try:
        return path.relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def manifest_path(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + SUFFIX)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str
    started: str = field(default_factory=_now)
    inputs: Dict[str, str] = field(default_factory=dict)

    def add_inputs(self, paths: Iterable, root: Path):
        for p in paths:
            p = Path(p)
            if p.is_file():
                self.inputs[_rel(p, root)] = sha256_file(p)

    def write(self, artifact, root: Path) -> Path:
        """Write the sidecar for ``artifact`` (which must already exist)."""
        doc = {
            "schema_version": SCHEMA_VERSION,
            "artifact": _rel(artifact, root),
            "sha256": sha256_file(artifact),
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "inputs": dict(sorted(self.inputs.items())),
            "started": self.started,
            "finished": _now(),
        }
        out = manifest_path(artifact)
        out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return out


@dataclass
class Problem:
    manifest: str
    message: str

    def __str__(self):
        return f"{self.manifest}: {self.message}"


def verify_tree(artifact_dir, root) -> List[Problem]:
    """Check every manifest under ``artifact_dir`` against the files on disk."""
    root = Path(root)
    problems: List[Problem] = []
    manifests = sorted(Path(artifact_dir).rglob("*" + SUFFIX))
    for mf in manifests:
        name = _rel(mf, root)
        try:
            doc = json.loads(mf.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            problems.append(Problem(name, f"unreadable manifest: {exc}"))
            continue
        art = root / doc["artifact"]
        if not art.is_file():
            problems.append(Problem(name, f"artifact {doc['artifact']} is missing"))
        elif sha256_file(art) != doc["sha256"]:
            problems.append(Problem(name, f"artifact {doc['artifact']} changed since it was written"))
        for rel, digest in doc.get("inputs", {}).items():
            p = root / rel
            if not p.is_file():
                problems.append(Problem(name, f"input {rel} is missing"))
            elif sha256_file(p) != digest:
                problems.append(Problem(name, f"input {rel} changed since it was consumed"))
    return problems


def count_manifests(artifact_dir) -> int:
    return sum(1 for _ in Path(artifact_dir).rglob("*" + SUFFIX))


def read_manifest(artifact) -> Optional[dict]:
    p = manifest_path(artifact)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))
