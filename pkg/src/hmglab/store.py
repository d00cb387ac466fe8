"""Append-only result store: a JSON-lines record log plus a manifest.

Records are canonical JSON (sorted keys, no whitespace, no timestamps), so
two runs with the same configuration and seed write byte-identical logs.
Run bookkeeping (configuration hash, code version, timestamps) lives in
``manifest.json`` and never in the records themselves.
"""

from __future__ import annotations

import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

from . import __version__

__all__ = ["ResultStore", "canonical", "record_identity", "dedupe", "merge_stores"]

RECORDS = "records.jsonl"
MANIFEST = "manifest.json"


def _plain(obj):
    """Convert numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def canonical(obj) -> str:
    """Deterministic JSON text for ``obj``."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def record_identity(record: dict) -> str:
    """The part of a record that names it: type, configuration hash and key."""
    return canonical([record.get("type"), record.get("config_hash"), record.get("key")])


def dedupe(records: Iterable[dict]) -> list[dict]:
    """Keep the first record of every identity, in order."""
    seen: set[str] = set()
    out = []
    for r in records:
        ident = record_identity(r)
        if ident not in seen:
            seen.add(ident)
            out.append(r)
    return out


class ResultStore:
    """A directory holding ``records.jsonl`` and ``manifest.json``.

    All writes go through one instance in one process; worker processes
    return results to the orchestrator rather than writing themselves.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @property
    def records_path(self) -> Path:
        return self.root / RECORDS

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    # -- manifest ---------------------------------------------------------

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"code_version": __version__, "runs": []}
        return json.loads(self.manifest_path.read_text())

    def _write_manifest(self, data: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def completed(self, run_key: str) -> bool:
        """Whether a run with this key finished successfully before."""
        return any(r["run_key"] == run_key and r.get("status") == "ok" for r in self.manifest()["runs"])

    def begin_run(self, run_key: str, command: str, config_hash: str) -> None:
        data = self.manifest()
        data["code_version"] = __version__
        data["runs"].append(
            {
                "run_key": run_key,
                "command": command,
                "config_hash": config_hash,
                "code_version": __version__,
                "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "finished": None,
                "status": "running",
                "records": 0,
            }
        )
        self._write_manifest(data)

    def end_run(self, run_key: str, status: str, n_records: int) -> None:
        data = self.manifest()
        for run in reversed(data["runs"]):
            if run["run_key"] == run_key and run["status"] == "running":
                run["status"] = status
                run["records"] = n_records
                run["finished"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
                break
        self._write_manifest(data)

    # -- records ----------------------------------------------------------

    def append(self, record: dict) -> None:
        """Append one record; existing lines are never touched."""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.records_path, "a", encoding="utf-8") as fh:
            fh.write(canonical(record) + "\n")

    def records(self) -> Iterator[dict]:
        if not self.records_path.exists():
            return
        with open(self.records_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    def is_empty(self) -> bool:
        return next(self.records(), None) is None


def merge_stores(stores: Iterable[ResultStore]) -> list[dict]:
    """Concatenate the logs of several stores, dropping duplicate records."""
    return dedupe(r for s in stores for r in s.records())
