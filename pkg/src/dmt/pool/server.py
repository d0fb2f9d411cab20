"""HTTP/1.1 front end for :class:`PoolStore`.

Routes::

    GET  /v1/models?kind=&label=   metadata array (label is a substring match)
    GET  /v1/models/{id}           blob, application/octet-stream
    GET  /v1/models/{id}/meta      metadata object
    POST /v1/models                body = blob, header X-DMT-Metadata = JSON -> {"id": ...}

Only DMTM model blobs are accepted as request bodies.
"""
from __future__ import annotations

import json
import logging
import os
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..errors import NotFoundError, PoolStartupError, PoolValidationError
from .store import ID_RE, PoolStore

log = logging.getLogger(__name__)

ENV_ADDR = "DMT_POOL_ADDR"
DEFAULT_ADDR = "127.0.0.1:8470"
METADATA_HEADER = "X-DMT-Metadata"
BLOB_CONTENT_TYPE = "application/octet-stream"
MAX_BODY = 1 << 30

ROUTES = (
    ("GET", "/v1/models"),
    ("GET", "/v1/models/{id}"),
    ("GET", "/v1/models/{id}/meta"),
    ("POST", "/v1/models"),
)


def parse_address(addr: str | None) -> tuple[str, int]:
    addr = addr or os.environ.get(ENV_ADDR) or DEFAULT_ADDR
    for prefix in ("http://", "https://"):
        if addr.startswith(prefix):
            addr = addr[len(prefix):]
    addr = addr.rstrip("/")
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address {addr!r} is not host:port")
    host = host.strip("[]") or "127.0.0.1"
    return host, int(port)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "dmt-pool/1"

    @property
    def store(self) -> PoolStore:
        return self.server.store

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status, body: bytes, content_type: str):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def _json(self, status, obj):
        self._send(status, json.dumps(obj, sort_keys=True).encode("utf-8"), "application/json; charset=utf-8")

    def _error(self, status, kind, message):
        self._json(status, {"error": kind, "message": message})

    def _drain(self):
        # consume any body so the keep-alive connection stays in sync
        length = self.headers.get("Content-Length")
        if length and length.isdigit() and int(length) <= MAX_BODY:
            self.rfile.read(int(length))
        elif length:
            self.close_connection = True

    def _parts(self):
        url = urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        return parts, parse_qs(url.query)

    def do_GET(self):
        parts, query = self._parts()
        self._drain()
        if parts[:2] != ["v1", "models"] or len(parts) > 4:
            return self._error(HTTPStatus.NOT_FOUND, "not_found", "no such route")
        if len(parts) == 2:
            kind = query.get("kind", [None])[0]
            label = query.get("label", [None])[0]
            return self._json(HTTPStatus.OK, self.store.list(kind=kind, label=label))
        eid = parts[2]
        if not ID_RE.match(eid) or (len(parts) == 4 and parts[3] != "meta"):
            return self._error(HTTPStatus.NOT_FOUND, "not_found", "no such route or id")
        try:
            if len(parts) == 4:
                return self._json(HTTPStatus.OK, self.store.meta(eid))
            return self._send(HTTPStatus.OK, self.store.blob(eid), BLOB_CONTENT_TYPE)
        except NotFoundError:
            return self._error(HTTPStatus.NOT_FOUND, "not_found", f"unknown id {eid}")

    def do_POST(self):
        parts, _ = self._parts()
        if parts != ["v1", "models"]:
            self._drain()
            return self._error(HTTPStatus.METHOD_NOT_ALLOWED if parts[:2] == ["v1", "models"]
                               else HTTPStatus.NOT_FOUND, "not_found", "no such route")
        length = self.headers.get("Content-Length")
        if length is None or not length.isdigit():
            self.close_connection = True
            return self._error(HTTPStatus.LENGTH_REQUIRED, "validation", "Content-Length required")
        if int(length) > MAX_BODY:
            self.close_connection = True
            return self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "validation", "body too large")
        body = self.rfile.read(int(length))
        ctype = (self.headers.get("Content-Type") or BLOB_CONTENT_TYPE).split(";")[0].strip().lower()
        if ctype != BLOB_CONTENT_TYPE:
            return self._error(HTTPStatus.UNSUPPORTED_MEDIA_TYPE, "validation",
                               f"only {BLOB_CONTENT_TYPE} model blobs are accepted")
        try:
            metadata = json.loads(self.headers.get(METADATA_HEADER) or "{}")
        except ValueError:
            return self._error(HTTPStatus.BAD_REQUEST, "validation", f"{METADATA_HEADER} is not JSON")
        try:
            eid, created = self.store.put(body, metadata)
        except PoolValidationError as exc:
            return self._error(HTTPStatus.BAD_REQUEST, "validation", str(exc))
        self._json(HTTPStatus.CREATED if created else HTTPStatus.OK, {"id": eid})

    def _not_allowed(self):
        self._drain()
        self._error(HTTPStatus.METHOD_NOT_ALLOWED, "not_allowed", f"{self.command} not supported")

    do_PUT = do_DELETE = do_PATCH = _not_allowed


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = False


class PoolServer:
    """A running pool service. Use :func:`serve` to create one."""

    def __init__(self, root_dir, bind_address=None):
        self.store = PoolStore(root_dir)
        host, port = parse_address(bind_address)
        try:
            self._httpd = _Server((host, port), _Handler)
        except OSError as exc:
            raise PoolStartupError(f"cannot bind {host}:{port}: {exc}") from exc
        self._httpd.store = self.store
        self._thread = None

    @property
    def address(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def start(self) -> "PoolServer":
        if self._thread is None:
            self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
            self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join()
            self._thread = None
        self._httpd.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(root_dir, bind_address=None) -> PoolServer:
    """Start a pool service in a background thread and return it."""
    return PoolServer(root_dir, bind_address).start()
