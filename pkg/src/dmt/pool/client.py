"""Blocking client for the pool service, plus local aggregation of pulled models."""
from __future__ import annotations

import http.client
import json
import socket
from dataclasses import dataclass
from urllib.parse import quote, urlencode

from ..errors import (IncompatibleModelsError, IntegrityError, NotFoundError, PoolConnectionError,
                      PoolError, PoolValidationError)
from .blob import content_id, deserialize, model_kind, serialize
from .server import BLOB_CONTENT_TYPE, METADATA_HEADER, parse_address


class PoolClient:
    """One HTTP connection per call, so an instance is safe to share across threads."""

    def __init__(self, address=None, timeout: float = 60.0):
        self.host, self.port = parse_address(address)
        self.timeout = timeout

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _request(self, method, path, body=None, headers=None):
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.request(method, path, body=body, headers=headers or {})
            resp = conn.getresponse()
            data = resp.read()
        except (OSError, http.client.HTTPException, socket.timeout) as exc:
            raise PoolConnectionError(f"pool at {self.address} unreachable: {exc}") from exc
        finally:
            conn.close()
        if resp.status >= 400:
            try:
                message = json.loads(data).get("message", "")
            except ValueError:
                message = data[:200].decode("latin-1")
            if resp.status == 404:
                raise NotFoundError(message or path)
            if resp.status in (400, 411, 413, 415):
                raise PoolValidationError(message)
            raise PoolError(f"HTTP {resp.status}: {message}")
        return resp, data

    def push_blob(self, blob: bytes, metadata: dict) -> str:
        header = json.dumps(metadata, sort_keys=True, ensure_ascii=True)
        _, data = self._request("POST", "/v1/models", body=bytes(blob), headers={
            "Content-Type": BLOB_CONTENT_TYPE, METADATA_HEADER: header})
        eid = json.loads(data)["id"]
        if eid != content_id(blob):
            raise IntegrityError(f"pool returned id {eid} for a blob hashing to {content_id(blob)}")
        return eid

    def push(self, model, metadata: dict) -> str:
        """Serialise and push; ``kind`` defaults to the model's own kind."""
        metadata = dict(metadata)
        metadata.setdefault("kind", model_kind(model))
        return self.push_blob(serialize(model), metadata)

    def meta(self, eid: str) -> dict:
        _, data = self._request("GET", f"/v1/models/{quote(eid)}/meta")
        return json.loads(data)

    def pull_blob(self, eid: str) -> bytes:
        _, blob = self._request("GET", f"/v1/models/{quote(eid)}")
        if content_id(blob) != eid:
            raise IntegrityError(f"blob for {eid} hashes to {content_id(blob)}")
        return blob

    def pull(self, eid: str):
        """``(model, metadata)`` after verifying the content hash."""
        blob = self.pull_blob(eid)
        return deserialize(blob), self.meta(eid)

    def list(self, kind=None, label=None) -> list[dict]:
        query = {k: v for k, v in (("kind", kind), ("label", label)) if v is not None}
        path = "/v1/models" + (f"?{urlencode(query)}" if query else "")
        _, data = self._request("GET", path)
        return json.loads(data)


@dataclass
class PoolAggregate:
    model: object
    metadata: dict
    id: str | None = None


def aggregate_from_pool(client: PoolClient, ids, kind=None, options=None) -> PoolAggregate:
    """Pull ``ids``, aggregate locally (MWMA for detectors, WBA for ERT models).

    ``options``: ``multiplicities`` (detector), ``deviations`` (ert),
    ``dataset_label``, ``metrics`` and ``push`` (upload the result).
    """
    from ..mwma import aggregate_mwma
    from ..wba import aggregate_wba

    options = dict(options or {})
    ids = list(ids)
    if not ids:
        raise ValueError("no ids to aggregate")
    pulled = [client.pull(eid) for eid in ids]
    kinds = {meta["kind"] for _, meta in pulled}
    if len(kinds) != 1:
        raise IncompatibleModelsError(f"mixed kinds {sorted(kinds)}")
    found = kinds.pop()
    if kind is not None and kind != found:
        raise IncompatibleModelsError(f"requested {kind} but entries are {found}")
    models = [m for m, _ in pulled]
    if found == "detector":
        model = aggregate_mwma(models, options.get("multiplicities"))
    elif found == "ert":
        model = aggregate_wba(models, options.get("deviations"))
    else:
        raise IncompatibleModelsError(f"{found} entries cannot be aggregated again")
    labels = [meta.get("dataset_label", "") for _, meta in pulled]
    metadata = {
        "kind": model_kind(model),
        "dataset_label": options.get("dataset_label") or "COM(" + "+".join(labels) + ")",
        "metrics": options.get("metrics"),
        "sources": ids,
    }
    eid = client.push(model, metadata) if options.get("push") else None
    return PoolAggregate(model, metadata, eid)
