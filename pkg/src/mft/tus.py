"""Resumable agent-to-agent data channel (TUS 1.0.0 core + creation).

Server side (receiving agent)::

    POST  /tus/             Upload-Length, Upload-Metadata  -> 201, Location: /tus/{id}
    HEAD  /tus/{id}                                         -> Upload-Offset, Upload-Length
    PATCH /tus/{id}         Upload-Offset, offset+octet-stream body -> 204 | 409 | 412

Upload-Metadata keys: ``transfer-id``, ``path``, ``endpoint`` and optional
``sha256`` (expected digest of the whole object, checked at finalization).
Every request needs ``Tus-Resumable: 1.0.0`` and a bearer token. Completed
uploads report the committed object digest in ``MFT-Committed-Sha256``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import requests

from . import errors
from .connectors import Connector
from .httpkit import Request, Response, Router
from .model import DEFAULT_CHUNK_BYTES, GiB, new_id
from .tokens import ClusterSecret, TokenRejected, Verb, verify_token

log = logging.getLogger(__name__)

TUS_VERSION = "1.0.0"
OFFSET_CT = "application/offset+octet-stream"
DIGEST_HEADER = "MFT-Committed-Sha256"
TRANSFER_HEADER = "X-MFT-Transfer"
DEFAULT_MAX_LENGTH = 16 * GiB
DEFAULT_SESSION_TTL_S = 3600.0
# 409 losers have their body drained up to this size so the client can read the reply
_DRAIN_LIMIT = 80 << 20


def encode_metadata(pairs: dict) -> str:
    return ", ".join(f"{k} {base64.b64encode(v.encode()).decode()}" for k, v in pairs.items())


def decode_metadata(header: str) -> dict:
    out = {}
    for item in (header or "").split(","):
        item = item.strip()
        if not item:
            continue
        key, _, value = item.partition(" ")
        try:
            out[key] = base64.b64decode(value.strip(), validate=True).decode() if value else ""
        except (ValueError, UnicodeDecodeError):
            raise errors.MalformedRequest(f"bad Upload-Metadata value for {key!r}") from None
    return out


@dataclass
class UploadSession:
    upload_id: str
    transfer_id: str
    endpoint_id: str
    path: str
    declared_length: int
    expected_sha256: Optional[str] = None
    committed_offset: int = 0
    complete: bool = False
    committed_digest: Optional[str] = None
    created_at: float = 0.0
    last_activity: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)
    # covers exactly bytes [0, committed_offset)
    rolling: "hashlib._Hash" = field(default_factory=hashlib.sha256, repr=False, compare=False)

    _PERSISTED = (
        "upload_id", "transfer_id", "endpoint_id", "path", "declared_length", "expected_sha256",
        "committed_offset", "complete", "committed_digest", "created_at", "last_activity",
    )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self._PERSISTED}


class TusServer:
    """Receiving side. ``connector_for(endpoint_id, stage_id)`` must return a
    connector for an endpoint this agent serves (or raise UnknownEndpoint)."""

    def __init__(
        self,
        secret: ClusterSecret,
        connector_for: Callable[[str, str], Connector],
        state_dir: str,
        max_length: int = DEFAULT_MAX_LENGTH,
        session_ttl_s: float = DEFAULT_SESSION_TTL_S,
        on_complete: Optional[Callable[[UploadSession], None]] = None,
    ):
        self.secret = secret
        self.connector_for = connector_for
        self.state_dir = os.path.join(state_dir, "sessions")
        self.max_length = max_length
        self.session_ttl_s = session_ttl_s
        self.on_complete = on_complete
        self.sessions: dict[str, UploadSession] = {}
        self._by_key: dict[tuple, str] = {}
        self._lock = threading.Lock()
        os.makedirs(self.state_dir, exist_ok=True)
        self._load()

    # -- persistence ----------------------------------------------------
    def _meta_path(self, upload_id: str) -> str:
        return os.path.join(self.state_dir, upload_id + ".json")

    def _persist(self, s: UploadSession) -> None:
        tmp = self._meta_path(s.upload_id) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(s.to_dict(), f)
        os.replace(tmp, self._meta_path(s.upload_id))

    def _load(self) -> None:
        for name in sorted(os.listdir(self.state_dir)):
            if not name.endswith(".json"):
                continue
            try:
                with open(os.path.join(self.state_dir, name)) as f:
                    data = json.load(f)
                s = UploadSession(**data)
                conn = self.connector_for(s.endpoint_id, s.transfer_id)
            except (ValueError, TypeError, OSError, errors.MFTError):
                log.warning("dropping unreadable upload session %s", name)
                continue
            if not s.complete:
                # the staged bytes are the only trustworthy offset after a crash
                staged = conn.staged_digest(s.path)
                s.rolling = hashlib.sha256()
                if staged is None:
                    s.committed_offset = 0
                else:
                    s.committed_offset = min(staged[1], s.declared_length)
                    s.rolling = _rehash(conn, s.path, s.committed_offset)
            self.sessions[s.upload_id] = s
            self._by_key[(s.transfer_id, s.endpoint_id, s.path)] = s.upload_id
        if self.sessions:
            log.info("recovered %d upload sessions", len(self.sessions))

    # -- routing --------------------------------------------------------
    def register(self, router: Router) -> None:
        router.add("POST", "/tus", self._tus(self.create))
        router.add("HEAD", "/tus/{upload_id}", self._tus(self.head))
        router.add("PATCH", "/tus/{upload_id}", self._tus(self.patch))

    @staticmethod
    def prefilter(req: Request) -> Optional[Response]:
        """Reject non-TUS traffic under /tus before routing."""
        if not req.path.startswith("/tus"):
            return None
        if req.headers.get("Tus-Resumable") != TUS_VERSION:
            return Response(412, b"", {"Tus-Version": TUS_VERSION, "Tus-Resumable": TUS_VERSION})
        return None

    @staticmethod
    def _tus(func):
        def wrapped(req: Request) -> Response:
            try:
                resp = func(req)
            except TokenRejected as exc:
                resp = Response(401, exc.reason.encode())
            except errors.MFTError as exc:
                resp = Response.json(exc.to_dict(), exc.status)
            resp.headers["Tus-Resumable"] = TUS_VERSION
            return resp

        return wrapped

    def _auth(self, req: Request, verb: Verb, endpoint_id: str, path: str, transfer_id: str) -> None:
        token = req.bearer()
        if not token:
            raise TokenRejected("Malformed", "missing bearer token")
        subject = verify_token(self.secret, token, verb, endpoint_id, path)
        if subject != transfer_id:
            raise TokenRejected("ScopeMismatch")

    def _session(self, upload_id: str) -> UploadSession:
        s = self.sessions.get(upload_id)
        if s is None:
            raise errors.NotFound(f"unknown upload {upload_id}")
        return s

    @staticmethod
    def _offset_headers(s: UploadSession) -> dict:
        h = {"Upload-Offset": str(s.committed_offset), "Upload-Length": str(s.declared_length), "Cache-Control": "no-store"}
        if s.complete and s.committed_digest:
            h[DIGEST_HEADER] = s.committed_digest
        return h

    # -- handlers -------------------------------------------------------
    def create(self, req: Request) -> Response:
        meta = decode_metadata(req.headers.get("Upload-Metadata", ""))
        transfer_id = meta.get("transfer-id", "")
        endpoint_id = meta.get("endpoint", "")
        path = meta.get("path", "")
        if not transfer_id or not endpoint_id or not path:
            raise errors.MalformedRequest("Upload-Metadata needs transfer-id, endpoint and path")
        self._auth(req, Verb.DATA_CREATE, endpoint_id, path, transfer_id)
        length = req.headers.get("Upload-Length")
        if length is None or not length.isdigit():
            return Response(400, b"MissingLength")
        length = int(length)
        if length > self.max_length:
            return Response(413, b"LengthOverLimit")
        expected = meta.get("sha256") or None
        key = (transfer_id, endpoint_id, path)
        with self._lock:
            existing = self.sessions.get(self._by_key.get(key, ""))
            if existing is not None and existing.declared_length == length and existing.expected_sha256 == expected:
                with existing.lock:
                    existing.last_activity = time.time()
                return Response(201, b"", {"Location": f"/tus/{existing.upload_id}", **self._offset_headers(existing)})
            conn = self.connector_for(endpoint_id, transfer_id)
            if existing is not None:
                self._forget(existing)
            now = time.time()
            s = UploadSession(new_id(), transfer_id, endpoint_id, path, length, expected, created_at=now, last_activity=now)
            conn.write_at(path, 0).close()
            self.sessions[s.upload_id] = s
            self._by_key[key] = s.upload_id
            self._persist(s)
        if length == 0:
            with s.lock:
                status = self._finalize(s, conn)
            if status == 412:
                return Response(412, b"DigestMismatch", {"Location": f"/tus/{s.upload_id}", **self._offset_headers(s)})
        return Response(201, b"", {"Location": f"/tus/{s.upload_id}", **self._offset_headers(s)})

    def head(self, req: Request) -> Response:
        s = self._session(req.params["upload_id"])
        self._auth(req, Verb.DATA_PATCH, s.endpoint_id, s.path, s.transfer_id)
        with s.lock:
            return Response(200, b"", self._offset_headers(s))

    def patch(self, req: Request) -> Response:
        s = self._session(req.params["upload_id"])
        self._auth(req, Verb.DATA_PATCH, s.endpoint_id, s.path, s.transfer_id)
        if req.headers.get("Content-Type", "").split(";")[0].strip() != OFFSET_CT:
            return Response(400, b"BadContentType")
        claimed = req.headers.get("Upload-Offset", "")
        if not claimed.isdigit() or req.content_length is None:
            return Response(400, b"Upload-Offset and Content-Length are required")
        claimed = int(claimed)
        with s.lock:
            if claimed != s.committed_offset or s.complete and req.content_length > 0:
                self._drain(req)
                return Response(409, b"OffsetConflict", self._offset_headers(s))
            if claimed + req.content_length > s.declared_length:
                self._drain(req)
                return Response(400, b"ExceedsUploadLength", self._offset_headers(s))
            if s.complete:
                return Response(204, b"", self._offset_headers(s))
            conn = self.connector_for(s.endpoint_id, s.transfer_id)
            received = 0
            sink = conn.write_at(s.path, s.committed_offset)
            try:
                for piece in req.iter_body():
                    sink.write(piece)
                    s.rolling.update(piece)
                    s.committed_offset += len(piece)
                    received += len(piece)
            finally:
                # durable before acknowledging, and also when the peer vanished
                sink.close()
                s.last_activity = time.time()
            if received < req.content_length:
                log.info("upload %s interrupted at offset %d", s.upload_id, s.committed_offset)
                raise ConnectionError("client went away mid-chunk")
            if s.committed_offset == s.declared_length:
                if self._finalize(s, conn) == 412:
                    return Response(412, b"DigestMismatch", self._offset_headers(s))
            return Response(204, b"", self._offset_headers(s))

    @staticmethod
    def _drain(req: Request) -> None:
        if req.remaining > _DRAIN_LIMIT:
            req.handler.close_connection = True
            req.remaining = 0
            return
        for _ in req.iter_body():
            pass

    def _finalize(self, s: UploadSession, conn: Connector) -> int:
        digest = s.rolling.hexdigest()
        if s.expected_sha256 and digest != s.expected_sha256:
            self._reset(s, conn, f"rolling digest {digest} != expected {s.expected_sha256}")
            return 412
        try:
            st = conn.commit(s.path, s.expected_sha256)
        except errors.DigestMismatch as exc:
            self._reset(s, conn, str(exc))
            return 412
        s.complete = True
        s.committed_digest = st.etag_or_digest or digest
        self._persist(s)
        log.info("upload %s committed %s (%d bytes)", s.upload_id, s.path, s.declared_length)
        if self.on_complete:
            self.on_complete(s)
        return 204

    def _reset(self, s: UploadSession, conn: Connector, why: str) -> None:
        log.warning("upload %s failed verification, resetting: %s", s.upload_id, why)
        conn.abort(s.path)
        s.committed_offset = 0
        s.rolling = hashlib.sha256()
        self._persist(s)

    # -- maintenance ----------------------------------------------------
    def _forget(self, s: UploadSession, abort_staging: bool = False) -> None:
        self.sessions.pop(s.upload_id, None)
        self._by_key.pop((s.transfer_id, s.endpoint_id, s.path), None)
        try:
            os.remove(self._meta_path(s.upload_id))
        except FileNotFoundError:
            pass
        if abort_staging and not s.complete:
            try:
                self.connector_for(s.endpoint_id, s.transfer_id).abort(s.path)
            except errors.MFTError:
                log.warning("could not abort staging for upload %s", s.upload_id)

    def drop_transfer(self, transfer_id: str, abort_staging: bool) -> int:
        """Forget every session of ``transfer_id`` (cancel, or mode change)."""
        with self._lock:
            doomed = [s for s in self.sessions.values() if s.transfer_id == transfer_id]
            for s in doomed:
                with s.lock:
                    self._forget(s, abort_staging)
        return len(doomed)

    def gc(self, now: Optional[float] = None) -> int:
        now = time.time() if now is None else now
        with self._lock:
            idle = [s for s in self.sessions.values() if now - s.last_activity > self.session_ttl_s]
            for s in idle:
                if s.lock.acquire(blocking=False):
                    try:
                        self._forget(s, abort_staging=True)
                    finally:
                        s.lock.release()
        return len(idle)


def _rehash(conn: Connector, path: str, upto: int):
    h = hashlib.sha256()
    staged = conn.staging_path(path)
    with open(staged, "rb") as f:
        left = upto
        while left > 0:
            data = f.read(min(1 << 20, left))
            if not data:
                break
            h.update(data)
            left -= len(data)
    return h


# ---------------------------------------------------------------------------
# client side


class TusClient:
    def __init__(self, session: Optional[requests.Session] = None, timeout=(5, 120), transfer_id: str = ""):
        self.http = session or requests.Session()
        self.timeout = timeout
        self.transfer_id = transfer_id

    def _headers(self, token: str, **extra) -> dict:
        h = {"Tus-Resumable": TUS_VERSION, "Authorization": f"Bearer {token}"}
        if self.transfer_id:
            h[TRANSFER_HEADER] = self.transfer_id
        h.update(extra)
        return h

    @staticmethod
    def _reject(resp: requests.Response, what: str):
        err = errors.RemoteRejected(f"{what}: HTTP {resp.status_code} {resp.text[:200]}")
        err.http_status = resp.status_code
        if resp.status_code == 412:
            err.code = "DigestMismatch"
        return err

    def create(self, base_url: str, token: str, transfer_id: str, endpoint_id: str, path: str, length: int, sha256: Optional[str] = None) -> str:
        meta = {"transfer-id": transfer_id, "endpoint": endpoint_id, "path": path}
        if sha256:
            meta["sha256"] = sha256
        resp = self.http.post(
            base_url.rstrip("/") + "/tus/",
            headers=self._headers(token, **{"Upload-Length": str(length), "Upload-Metadata": encode_metadata(meta), "Content-Length": "0"}),
            timeout=self.timeout,
        )
        if resp.status_code != 201:
            raise self._reject(resp, "create upload")
        return base_url.rstrip("/") + resp.headers["Location"]

    def head(self, url: str, token: str) -> tuple[int, int, Optional[str]]:
        resp = self.http.head(url, headers=self._headers(token), timeout=self.timeout)
        if resp.status_code != 200:
            raise self._reject(resp, "offset query")
        return int(resp.headers["Upload-Offset"]), int(resp.headers["Upload-Length"]), resp.headers.get(DIGEST_HEADER)

    def patch(self, url: str, token: str, offset: int, data: bytes) -> tuple[int, Optional[str]]:
        """Send one chunk; returns (new offset, committed digest or None).
        Raises :class:`OffsetConflict` on 409."""
        resp = self.http.patch(
            url,
            data=data,
            headers=self._headers(token, **{"Upload-Offset": str(offset), "Content-Type": OFFSET_CT}),
            timeout=self.timeout,
        )
        if resp.status_code == 409:
            raise OffsetConflict(int(resp.headers.get("Upload-Offset", -1)))
        if resp.status_code != 204:
            raise self._reject(resp, "append")
        return int(resp.headers["Upload-Offset"]), resp.headers.get(DIGEST_HEADER)


class OffsetConflict(Exception):
    def __init__(self, server_offset: int):
        super().__init__(f"server offset is {server_offset}")
        self.server_offset = server_offset


@dataclass
class PushResult:
    digest: str
    committed_digest: Optional[str]
    size: int
    bytes_sent: int


def push_file(
    source: Connector,
    source_path: str,
    upload_url: str,
    token: str,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    progress: Optional[Callable[[int], None]] = None,
    *,
    client: Optional[TusClient] = None,
    max_retries: int = 5,
    retry_base_s: float = 0.5,
    progress_interval_s: float = 1.0,
    cancel: Optional[threading.Event] = None,
) -> PushResult:
    """Stream ``source_path`` into an existing upload, resuming after failures.

    Learns the remote offset with HEAD, then sends sequential PATCHes of
    ``chunk_bytes``. Network failures trigger a re-HEAD and continue from
    the server's offset, up to ``max_retries`` times. The returned digest
    covers the full source object.
    """
    client = client or TusClient()
    hasher = hashlib.sha256()
    hashed = 0
    failures = 0
    conflicts = 0
    sent = 0
    last_progress = 0.0

    def hash_source(upto: int) -> None:
        nonlocal hasher, hashed
        if upto < hashed:
            hasher, hashed = hashlib.sha256(), 0
        if upto == hashed:
            return
        for piece in _read(source, source_path, hashed, upto - hashed):
            hasher.update(piece)
            hashed += len(piece)

    while True:
        if cancel is not None and cancel.is_set():
            raise errors.Canceled("transfer canceled")
        try:
            offset, length, committed = client.head(upload_url, token)
            hash_source(offset)
            if offset == length:
                if committed is None and length > 0:
                    raise errors.RemoteRejected("upload at full length but not committed")
                return PushResult(hasher.hexdigest(), committed, length, sent)
            stream = _read(source, source_path, offset, None)
            try:
                buf = bytearray()
                for piece in stream:
                    buf += piece
                    while len(buf) >= chunk_bytes or (buf and offset + len(buf) >= length):
                        if cancel is not None and cancel.is_set():
                            raise errors.Canceled("transfer canceled")
                        chunk = bytes(buf[:chunk_bytes])
                        del buf[:chunk_bytes]
                        sent += len(chunk)
                        new_offset, committed = client.patch(upload_url, token, offset, chunk)
                        hasher.update(chunk)
                        hashed += len(chunk)
                        offset = new_offset
                        failures = 0
                        now = time.monotonic()
                        if progress is not None and now - last_progress >= progress_interval_s:
                            last_progress = now
                            progress(offset)
                        if offset >= length:
                            break
                    if offset >= length:
                        break
            finally:
                stream.close()
            if offset < length:
                raise errors.SourceVanished(f"source ended at {offset} of {length} bytes")
            return PushResult(hasher.hexdigest(), committed, length, sent)
        except OffsetConflict:
            conflicts += 1
            if conflicts > 16:
                raise errors.RemoteRejected("persistent offset conflicts") from None
            continue
        except errors.NotFound:
            raise errors.SourceVanished(f"{source_path} disappeared") from None
        except (requests.ConnectionError, requests.Timeout, errors.Unreachable) as exc:
            failures += 1
            if failures > max_retries:
                raise errors.RetriesExhausted(f"data channel failed {failures} times: {type(exc).__name__}") from None
            delay = retry_base_s * 2 ** (failures - 1)
            log.info("data channel error (%s); retry %d in %.1fs", type(exc).__name__, failures, delay)
            if cancel is not None:
                if cancel.wait(delay):
                    raise errors.Canceled("transfer canceled") from None
            else:
                time.sleep(delay)


def _read(source: Connector, path: str, offset: int, length: Optional[int]):
    try:
        return source.read_range(path, offset, length)
    except errors.NotFound:
        raise errors.SourceVanished(f"{path} disappeared") from None
    except errors.RangeBeyondEnd:
        raise errors.SourceVanished(f"{path} shrank below offset {offset}") from None
