"""In-process storage servers used as agentless endpoints.

:class:`ObjectStoreServer` speaks a minimal S3-like dialect::

    PUT    /{bucket}/{key}      body = object, replies ETag = hex sha256
    GET    /{bucket}/{key}      honours Range: bytes=a-b / bytes=a-
    HEAD   /{bucket}/{key}      Content-Length, ETag
    DELETE /{bucket}/{key}
    GET    /{bucket}?prefix=p   {"keys": [...]}

Every request carries ``X-MFT-Access: <access_key_id>:<hex HMAC-SHA256(secret_key,
METHOD "\\n" path)>`` where ``path`` is the request path as sent.

:class:`PlainHttpServer` is a dumb unauthenticated file server (GET with
Range, HEAD, PUT) standing in for a generic HTTP endpoint.
"""

from __future__ import annotations

import hashlib
import hmac
import re
import threading
from collections import defaultdict
from typing import Optional

from . import errors
from .connectors import access_header
from .httpkit import HttpService, Request, Response, Router

_RANGE = re.compile(r"^bytes=(\d*)-(\d*)$")


def parse_range(header: Optional[str], size: int):
    """Return ``(start, end_exclusive)`` for a single-range header, None when
    absent, or raise RangeBeyondEnd when unsatisfiable."""
    if not header:
        return None
    m = _RANGE.match(header.strip())
    if not m or (not m.group(1) and not m.group(2)):
        return None
    first, last = m.groups()
    if first == "":
        n = int(last)
        start, end = max(0, size - n), size
    else:
        start = int(first)
        end = size if last == "" else min(size, int(last) + 1)
    if start >= size or start >= end:
        raise errors.RangeBeyondEnd(f"range {header} unsatisfiable for size {size}")
    return start, end


def serve_bytes(req: Request, data: bytes, extra_headers: Optional[dict] = None) -> Response:
    headers = {"Accept-Ranges": "bytes", "Content-Type": "application/octet-stream"}
    headers.update(extra_headers or {})
    try:
        rng = parse_range(req.headers.get("Range"), len(data))
    except errors.RangeBeyondEnd:
        return Response(416, b"", {"Content-Range": f"bytes */{len(data)}"})
    if req.method == "HEAD":
        headers["Content-Length"] = str(len(data))
        return Response(200, b"", headers)
    if rng is None:
        return Response(200, data, headers)
    start, end = rng
    headers["Content-Range"] = f"bytes {start}-{end - 1}/{len(data)}"
    return Response(206, data[start:end], headers)


class _FaultTable:
    """Counts down injected failures per operation kind."""

    OPS = {"GET": "read", "HEAD": "stat", "PUT": "write", "DELETE": "delete"}

    def __init__(self):
        self._pending = defaultdict(int)
        self._lock = threading.Lock()
        self.fired = defaultdict(int)

    def arm(self, op: str, count: int) -> None:
        if op not in ("read", "stat", "write", "delete", "any"):
            raise errors.UnknownTarget(f"unknown connector op {op!r}")
        with self._lock:
            self._pending[op] += count

    def take(self, method: str) -> bool:
        op = self.OPS.get(method)
        with self._lock:
            for key in (op, "any"):
                if key and self._pending[key] > 0:
                    self._pending[key] -= 1
                    self.fired[key] += 1
                    return True
        return False


class ObjectStoreServer:
    def __init__(self, credentials: Optional[dict] = None, host: str = "127.0.0.1", port: int = 0):
        self.credentials = dict(credentials or {})
        self.objects: dict[str, dict[str, bytes]] = defaultdict(dict)
        self.faults = _FaultTable()
        self._lock = threading.Lock()
        router = Router()
        router.add("GET", "/{bucket}", self._list)
        for method in ("GET", "HEAD", "PUT", "DELETE"):
            router.add(method, "/{bucket}/{key:path}", self._object)
        self.service = HttpService(router, host, port)

    @property
    def url(self) -> str:
        return self.service.url

    def start(self) -> "ObjectStoreServer":
        self.service.start()
        return self

    def stop(self) -> None:
        self.service.stop()

    def put_object(self, bucket: str, key: str, data: bytes) -> None:
        with self._lock:
            self.objects[bucket][key.lstrip("/")] = bytes(data)

    def get_object(self, bucket: str, key: str) -> Optional[bytes]:
        with self._lock:
            return self.objects.get(bucket, {}).get(key.lstrip("/"))

    def _authorize(self, req: Request) -> None:
        header = req.headers.get("X-MFT-Access", "")
        akid, _, mac = header.partition(":")
        secret = self.credentials.get(akid)
        if secret is None:
            raise errors.PermissionDenied("unknown access key")
        expected = access_header(akid, secret, req.method, req.raw_path).partition(":")[2]
        if not hmac.compare_digest(expected, mac):
            raise errors.PermissionDenied("bad request signature")

    def _list(self, req: Request):
        self._authorize(req)
        prefix = req.query.get("prefix", "")
        with self._lock:
            keys = sorted(k for k in self.objects.get(req.params["bucket"], {}) if k.startswith(prefix))
        return {"keys": keys}

    def _object(self, req: Request):
        self._authorize(req)
        if self.faults.take(req.method):
            return Response.json({"code": "Unreachable", "message": "injected fault", "retryable": True}, 503)
        bucket, key = req.params["bucket"], req.params["key"]
        if req.method == "PUT":
            data = req.read()
            with self._lock:
                self.objects[bucket][key] = data
            return Response(200, b"", {"ETag": f'"{hashlib.sha256(data).hexdigest()}"'})
        if req.method == "DELETE":
            with self._lock:
                self.objects.get(bucket, {}).pop(key, None)
            return Response(204)
        data = self.get_object(bucket, key)
        if data is None:
            return Response.json({"code": "NotFound", "message": key, "retryable": False}, 404)
        return serve_bytes(req, data, {"ETag": f'"{hashlib.sha256(data).hexdigest()}"'})


class PlainHttpServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.objects: dict[str, bytes] = {}
        self.faults = _FaultTable()
        self._lock = threading.Lock()
        router = Router()
        for method in ("GET", "HEAD", "PUT"):
            router.add(method, "/{key:path}", self._handle)
        self.service = HttpService(router, host, port)

    @property
    def url(self) -> str:
        return self.service.url

    def start(self) -> "PlainHttpServer":
        self.service.start()
        return self

    def stop(self) -> None:
        self.service.stop()

    def _handle(self, req: Request):
        if self.faults.take(req.method):
            return Response(503, b"injected fault")
        key = "/" + req.params["key"]
        if req.method == "PUT":
            data = req.read()
            with self._lock:
                self.objects[key] = data
            return Response(201)
        with self._lock:
            data = self.objects.get(key)
        if data is None:
            return Response(404, b"not found")
        return serve_bytes(req, data)
