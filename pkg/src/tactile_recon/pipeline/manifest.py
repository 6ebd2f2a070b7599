"""Per-stage manifests: one entry with a SHA-256 checksum for every written file."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

MANIFEST_NAME = "manifest.json"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Collects the files a stage writes below ``root`` plus free-form metadata."""

    def __init__(self, root, stage: str, meta: Optional[Dict[str, Any]] = None):
        self.root = Path(root)
        self.stage = stage
        self.meta = dict(meta or {})
        self.files: Dict[str, str] = {}

    def add(self, path) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        if rel == MANIFEST_NAME:
            raise ValueError("the manifest does not list itself")
        self.files[rel] = sha256(path)
        return path

    def write_text(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return self.add(path)

    def to_dict(self) -> Dict[str, Any]:
        return {"stage": self.stage, "meta": self.meta,
                "files": [{"path": k, "sha256": self.files[k]} for k in sorted(self.files)]}

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def load_manifest(root) -> Dict[str, Any]:
    return json.loads((Path(root) / MANIFEST_NAME).read_text(encoding="utf-8"))


def verify(root) -> Dict[str, str]:
    """Return ``{path: problem}`` for listed files that are missing or altered."""
    problems = {}
    for entry in load_manifest(root)["files"]:
        p = Path(root) / entry["path"]
        if not p.exists():
            problems[entry["path"]] = "missing"
        elif sha256(p) != entry["sha256"]:
            problems[entry["path"]] = "checksum mismatch"
    return problems
