"""Byte-stable CSV/JSON writers and the run manifest."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

__all__ = ["format_value", "write_csv", "read_csv", "write_json", "RunManifest", "sha256_file"]


def format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float) or hasattr(v, "dtype"):
        x = float(v)
        if math.isnan(x):
            return "nan"
        return "%.17g" % x
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict], footer: dict | None = None) -> Path:
    """Header line, one line per row, optional ``# {json}`` footer."""
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(row[c]) for c in columns))
    if footer is not None:
        lines.append("# " + json.dumps(_plain(footer), sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    cols = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        rows.append({c: float(v) for c, v in zip(cols, ln.split(","))})
    return cols, rows


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _plain(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """Config hash, version, per-stage status and checksums of every file
    written. Timestamps live here and nowhere else."""

    config_hash: str
    version: str
    seed: int
    stages: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def record_stage(self, name: str, status: str, detail: str = "") -> None:
        self.stages[name] = {"status": status, "detail": detail}

    def add_file(self, root: Path, path: Path) -> None:
        rel = str(Path(path).relative_to(root))
        if rel in self.files:
            raise ValueError(f"file {rel} emitted twice")
        self.files[rel] = sha256_file(path)

    def write(self, root: Path) -> Path:
        data = {
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "stages": self.stages,
            "files": dict(sorted(self.files.items())),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        return write_json(Path(root) / "manifest.json", data)
