"""On-disk content-addressed storage for the pool service.

Layout under the root directory::

    blobs/<sha256>.dmtm   model bytes
    meta/<sha256>.json    metadata sidecar (written after the blob)

Every file is written to a temporary name and moved into place with
``os.replace``, so a reader sees either nothing or a complete file. An entry
exists once its sidecar exists; the index is rebuilt from ``meta/`` on start.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
import threading
from datetime import datetime, timezone
from pathlib import Path

from ..errors import BlobFormatError, NotFoundError, PoolValidationError
from .blob import content_id, deserialize, model_dimension, read_header

KINDS = ("detector", "ert", "ert-aggregated")
ID_RE = re.compile(r"^[0-9a-f]{64}$")


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def validate_entry(blob: bytes, metadata: dict) -> dict:
    """Check ``metadata`` against ``blob`` and return the normalised record (without id)."""
    if not isinstance(metadata, dict):
        raise PoolValidationError("metadata must be a JSON object")
    try:
        blob_kind, _, _ = read_header(blob)
        model = deserialize(blob)
    except BlobFormatError as exc:
        raise PoolValidationError(f"body is not a model blob: {exc}") from exc
    kind = metadata.get("kind")
    if kind not in KINDS:
        raise PoolValidationError(f"kind must be one of {', '.join(KINDS)}")
    if kind != blob_kind:
        raise PoolValidationError(f"declared kind {kind!r} but blob is {blob_kind!r}")
    label = metadata.get("dataset_label")
    if not isinstance(label, str):
        raise PoolValidationError("dataset_label (string) is required")
    record = {k: v for k, v in metadata.items() if k not in ("id", "blob")}
    for key, value in model_dimension(model).items():
        if key in record and record[key] != value:
            raise PoolValidationError(f"{key}={record[key]!r} but blob has {value}")
        record[key] = value
    metrics = record.get("metrics")
    if metrics is not None and not isinstance(metrics, dict):
        raise PoolValidationError("metrics must be an object or null")
    record.setdefault("metrics", None)
    record.setdefault("created_at", utc_now())
    return record


class PoolStore:
    def __init__(self, root):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.meta_dir = self.root / "meta"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.meta_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[str, dict] = {}
        self.rescan()

    def rescan(self) -> None:
        index = {}
        for path in sorted(self.meta_dir.glob("*.json")):
            eid = path.stem
            if not ID_RE.match(eid) or not (self.blob_dir / f"{eid}.dmtm").exists():
                continue
            try:
                index[eid] = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError):
                continue
        with self._lock:
            self._index = index

    def put(self, blob: bytes, metadata: dict) -> tuple[str, bool]:
        """Store an entry; returns ``(id, created)``. Re-pushing a blob keeps the first entry."""
        eid = content_id(blob)
        record = validate_entry(blob, metadata)
        with self._lock:
            if eid in self._index:
                return eid, False
            record["id"] = eid
            _atomic_write(self.blob_dir / f"{eid}.dmtm", blob)
            text = json.dumps(record, sort_keys=True, ensure_ascii=False)
            _atomic_write(self.meta_dir / f"{eid}.json", text.encode("utf-8"))
            self._index[eid] = record
        return eid, True

    def meta(self, eid: str) -> dict:
        with self._lock:
            record = self._index.get(eid)
        if record is None:
            raise NotFoundError(eid)
        return dict(record)

    def blob(self, eid: str) -> bytes:
        self.meta(eid)
        try:
            return (self.blob_dir / f"{eid}.dmtm").read_bytes()
        except FileNotFoundError:
            raise NotFoundError(eid) from None

    def list(self, kind=None, label=None) -> list[dict]:
        with self._lock:
            records = list(self._index.values())
        out = [dict(r) for r in records
               if (kind is None or r.get("kind") == kind)
               and (label is None or label in r.get("dataset_label", ""))]
        out.sort(key=lambda r: (r.get("created_at", ""), r["id"]))
        return out
