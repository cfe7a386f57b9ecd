"""Transfer agent: registers with the controller, heartbeats, long-polls for
commands, executes transfers, and serves the TUS receiver (``/tus/``) and
user upload/download links (``/user/``) on one listener.

Run with ``mft-agent --config agent.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import threading
import time
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import requests

from . import errors
from .backends import open_payload
from .connectors import make_connector
from .connectors.base import Capability, Connector
from .httpkit import HttpService, Request, Response, Router
from .model import DEFAULT_CHUNK_BYTES, StorageEndpoint, TransferMode, normalize_path
from .stores import parse_range
from .tokens import ClusterSecret, TokenRejected, Verb, parse_token, verify_token
from .tus import TusClient, TusServer, push_file

log = logging.getLogger(__name__)

DEDUPE_LIMIT = 10000
POLL_WAIT_S = 25
GC_INTERVAL_S = 60.0


@dataclass
class ServedEndpoint:
    endpoint: StorageEndpoint
    # storage access held by the agent itself (it is installed next to the storage)
    credential: Optional[dict] = field(default=None, repr=False)


@dataclass
class AgentConfig:
    agent_id: str
    controller_url: str
    cluster_token: str = field(repr=False)
    cluster_hmac: str = field(repr=False)
    served_endpoints: list = field(default_factory=list)
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    advertise_url: Optional[str] = None
    staging_dir: str = ""
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    slots: int = 4
    heartbeat_interval_s: Optional[float] = None

    @classmethod
    def from_dict(cls, data: dict, environ=None) -> "AgentConfig":
        env = os.environ if environ is None else environ
        data = dict(data)
        for key, var in (("controller_url", "MFT_CONTROLLER_URL"), ("cluster_token", "MFT_CLUSTER_TOKEN"), ("cluster_hmac", "MFT_CLUSTER_HMAC")):
            if env.get(var):
                data[key] = env[var]
        missing = [k for k in ("agent_id", "controller_url", "cluster_token", "cluster_hmac", "staging_dir") if not data.get(k)]
        if missing:
            raise errors.MalformedRequest(f"agent config is missing {missing}")
        served = []
        for item in data.get("served_endpoints") or []:
            item = dict(item)
            cred = item.pop("credential", None)
            served.append(ServedEndpoint(StorageEndpoint.from_dict(item), cred))
        data["served_endpoints"] = served
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise errors.MalformedRequest(f"unknown agent config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str, environ=None) -> "AgentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f), environ)


class _Dedupe:
    """Recently seen command ids and their terminal events, persisted as
    JSON lines so a restarted agent does not execute a command twice."""

    def __init__(self, path: str):
        self.path = path
        self.seen: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    try:
                        doc = json.loads(line)
                    except ValueError:
                        continue
                    self.seen[doc["command_id"]] = doc.get("event")
                    self.seen.move_to_end(doc["command_id"])
            while len(self.seen) > DEDUPE_LIMIT:
                self.seen.popitem(last=False)
            self._rewrite()
        self._file = open(path, "a")
        self._lines = len(self.seen)

    def _rewrite(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            for cid, ev in self.seen.items():
                f.write(json.dumps({"command_id": cid, "event": ev}) + "\n")
        os.replace(tmp, self.path)

    def check(self, command_id: str):
        """Returns (seen, terminal event or None)."""
        with self._lock:
            if command_id in self.seen:
                return True, self.seen[command_id]
            return False, None

    def record(self, command_id: str, event: Optional[dict]) -> None:
        with self._lock:
            self.seen[command_id] = event
            self.seen.move_to_end(command_id)
            while len(self.seen) > DEDUPE_LIMIT:
                self.seen.popitem(last=False)
            self._file.write(json.dumps({"command_id": command_id, "event": event}) + "\n")
            self._file.flush()
            self._lines += 1
            if self._lines > 2 * DEDUPE_LIMIT:
                self._file.close()
                self._rewrite()
                self._file = open(self.path, "a")
                self._lines = len(self.seen)


class _Run:
    def __init__(self, cmd: dict, prev: Optional["_Run"] = None):
        self.cmd = cmd
        self.transfer_id = cmd["transfer_id"]
        self.attempt = cmd["attempt"]
        self.cancel = threading.Event()
        self.abort_staging = False
        self.done = threading.Event()
        self.prev = prev


class _Emitter:
    """Builds events for one (transfer, attempt); PROGRESS limited to 1/s."""

    def __init__(self, agent: "Agent", transfer_id: str, attempt: int, interval_s: float = 1.0):
        self.agent = agent
        self.transfer_id = transfer_id
        self.attempt = attempt
        self.interval_s = interval_s
        self.seq = 0
        self.last = None
        self.bytes = 0

    def event(self, kind: str, **fields) -> dict:
        self.seq += 1
        ev = {
            "agent_id": self.agent.config.agent_id,
            "transfer_id": self.transfer_id,
            "attempt": self.attempt,
            "seq": self.seq,
            "kind": kind,
            "bytes_transferred": self.bytes,
        }
        ev.update(fields)
        return ev

    def progress(self, done: int, total: Optional[int], force: bool = False) -> None:
        self.bytes = max(self.bytes, done)
        now = time.monotonic()
        if not force and self.last is not None and now - self.last < self.interval_s:
            return
        self.last = now
        self.agent.emit(self.event("PROGRESS", total_bytes=total))


class Agent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.secret = ClusterSecret.parse(config.cluster_hmac)
        self.served = {s.endpoint.endpoint_id: s for s in config.served_endpoints}
        os.makedirs(config.staging_dir, exist_ok=True)
        self.remote_staging = os.path.join(config.staging_dir, "remote")
        os.makedirs(self.remote_staging, exist_ok=True)
        # fail fast on a bad endpoint config
        for eid in self.served:
            self.served_connector(eid)

        self.dedupe = _Dedupe(os.path.join(config.staging_dir, "commands.jsonl"))
        self.running: dict[str, _Run] = {}
        self._lock = threading.Lock()
        self._outbox: deque = deque()
        self._outbox_cond = threading.Condition()
        self._stop = threading.Event()
        self._registered = threading.Event()
        self._local = threading.local()
        self.heartbeat_interval_s = config.heartbeat_interval_s or 10.0
        self.pool = ThreadPoolExecutor(max_workers=max(1, config.slots), thread_name_prefix="mft-xfer")

        self.tus = TusServer(self.secret, self.served_connector, os.path.join(config.staging_dir, "tus"))
        router = Router()
        self.tus.register(router)
        router.add("PUT", "/user/files", self.user_upload)
        router.add("GET", "/user/files", self.user_download)
        self.router = router
        self.service = HttpService(router, config.listen_host, config.listen_port, prefilter=TusServer.prefilter)
        self.threads: list[threading.Thread] = []

    @property
    def public_url(self) -> str:
        return (self.config.advertise_url or self.service.url).rstrip("/")

    def served_connector(self, endpoint_id: str, stage_id: str = "0") -> Connector:
        served = self.served.get(endpoint_id)
        if served is None:
            raise errors.UnknownEndpoint(f"agent {self.config.agent_id} does not serve {endpoint_id}")
        return make_connector(served.endpoint, served.credential, stage_id=stage_id, staging_dir=self.remote_staging)

    # -- controller channel ---------------------------------------------
    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = requests.Session()
            # keep control messages small
            s.headers.clear()
            s.headers["Authorization"] = f"Bearer {self.config.cluster_token}"
            self._local.session = s
        return s

    def _call(self, method: str, path: str, body=None, params=None, timeout=(5, 15)):
        try:
            resp = self._session().request(
                method, self.config.controller_url.rstrip("/") + path, json=body, params=params, timeout=timeout
            )
        except requests.RequestException as exc:
            raise errors.Unreachable(f"controller: {type(exc).__name__}") from None
        if resp.status_code >= 400:
            try:
                raise errors.MFTError.from_dict(resp.json())
            except ValueError:
                raise errors.Unreachable(f"controller: HTTP {resp.status_code}") from None
        return resp.json() if resp.content else None

    def register(self) -> None:
        delay = 0.2
        while not self._stop.is_set():
            try:
                with self._lock:
                    running = sorted(self.running)
                reply = self._call("POST", "/v1/agents/register", {
                    "agent_id": self.config.agent_id,
                    "served_endpoint_ids": sorted(self.served),
                    "data_channel_url": self.public_url,
                    "user_http_url": self.public_url,
                    "running_transfer_ids": running,
                })
                if not self.config.heartbeat_interval_s:
                    self.heartbeat_interval_s = float(reply.get("heartbeat_interval_s", 10.0))
                self._registered.set()
                log.info("registered with controller as %s", self.config.agent_id)
                return
            except errors.MFTError as exc:
                log.info("registration failed (%s); retrying in %.1fs", exc.code, delay)
                self._stop.wait(delay)
                delay = min(delay * 2, 5.0)

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval_s):
            with self._lock:
                running = sorted(self.running)
            try:
                self._call("POST", f"/v1/agents/{self.config.agent_id}/heartbeat", {"running_transfer_ids": running})
            except errors.UnknownAgent:
                self.register()
            except errors.MFTError as exc:
                log.debug("heartbeat failed: %s", exc.code)

    def _poll_loop(self) -> None:
        delay = 0.2
        while not self._stop.is_set():
            try:
                cmds = self._call(
                    "GET", f"/v1/agents/{self.config.agent_id}/commands",
                    params={"wait_s": POLL_WAIT_S}, timeout=(5, POLL_WAIT_S + 10),
                )
                delay = 0.2
            except errors.UnknownAgent:
                self.register()
                continue
            except errors.MFTError as exc:
                log.debug("command poll failed: %s", exc.code)
                self._stop.wait(delay)
                delay = min(delay * 2, 5.0)
                continue
            for cmd in cmds or []:
                try:
                    self.handle_command(cmd)
                except Exception:
                    log.exception("bad command %s", cmd.get("command_id"))

    def emit(self, event: dict) -> None:
        with self._outbox_cond:
            self._outbox.append(event)
            self._outbox_cond.notify()

    def _outbox_loop(self) -> None:
        delay = 0.2
        while True:
            with self._outbox_cond:
                while not self._outbox and not self._stop.is_set():
                    self._outbox_cond.wait(1.0)
                if not self._outbox and self._stop.is_set():
                    return
                batch = list(self._outbox)[:100]
            try:
                self._call("POST", f"/v1/agents/{self.config.agent_id}/events", batch)
            except errors.MFTError as exc:
                if isinstance(exc, errors.ValidationError):
                    log.error("controller rejected events: %s", exc.message)
                else:
                    if self._stop.wait(delay):
                        return
                    delay = min(delay * 2, 2.0)
                    continue
            delay = 0.2
            with self._outbox_cond:
                for _ in batch:
                    self._outbox.popleft()

    def _gc_loop(self) -> None:
        while not self._stop.wait(GC_INTERVAL_S):
            try:
                self.tus.gc()
            except Exception:
                log.exception("upload session gc failed")

    # -- command execution ----------------------------------------------
    def handle_command(self, cmd: dict) -> None:
        kind = cmd.get("type")
        tid = cmd.get("transfer_id")
        if kind == "CANCEL":
            with self._lock:
                run = self.running.get(tid)
                if run is not None and (cmd.get("abort_staging") or run.attempt == cmd.get("attempt")):
                    run.abort_staging = run.abort_staging or bool(cmd.get("abort_staging"))
                    run.cancel.set()
            if cmd.get("abort_staging"):
                self.tus.drop_transfer(tid, abort_staging=True)
            log.info("cancel for %s attempt %s", tid, cmd.get("attempt"))
            return
        if kind != "TRANSFER":
            log.warning("ignoring command of type %r", kind)
            return
        seen, terminal = self.dedupe.check(cmd["command_id"])
        if seen:
            if terminal is not None:
                self.emit(terminal)
            return
        self.dedupe.record(cmd["command_id"], None)
        with self._lock:
            prev = self.running.get(tid)
            if prev is not None:
                prev.cancel.set()
            run = _Run(cmd, prev)
            self.running[tid] = run
        self.pool.submit(self._execute, run)

    def _execute(self, run: _Run) -> None:
        cmd = run.cmd
        emitter = _Emitter(self, run.transfer_id, run.attempt)
        event = None
        try:
            if run.prev is not None:
                run.prev.done.wait(60)
            if run.cancel.is_set():
                raise errors.Canceled("canceled before start")
            if cmd["mode"] == TransferMode.AGENT_TO_AGENT.value:
                event = self._run_a2a(cmd, run, emitter)
            else:
                event = self._run_copy(cmd, run, emitter)
        except errors.Canceled:
            log.info("transfer %s attempt %d canceled", run.transfer_id, run.attempt)
        except errors.MFTError as exc:
            log.warning("transfer %s attempt %d failed: %s: %s", run.transfer_id, run.attempt, exc.code, exc.message)
            event = emitter.event("ERROR", error=exc.to_dict())
        except requests.RequestException as exc:
            event = emitter.event("ERROR", error=errors.Unreachable(f"{type(exc).__name__}").to_dict())
        except Exception as exc:
            log.exception("transfer %s crashed", run.transfer_id)
            event = emitter.event("ERROR", error={"code": "InternalError", "message": type(exc).__name__, "retryable": True})
        finally:
            with self._lock:
                if self.running.get(run.transfer_id) is run:
                    del self.running[run.transfer_id]
            run.done.set()
        self.dedupe.record(cmd["command_id"], event)
        if event is not None and not run.cancel.is_set():
            self.emit(event)

    def _redeem(self, grant: dict) -> dict:
        try:
            reply = self._call("POST", f"/v1/grants/{grant['grant_id']}/redeem", {"token": grant["token"], "agent_id": self.config.agent_id})
        except errors.MFTError as exc:
            raise errors.GrantRedemptionFailed(f"grant {grant['grant_id']}: {exc.code}") from None
        return open_payload(self.secret, grant["grant_id"], reply["sealed"])

    def _spec_connector(self, spec: dict, stage_id: str) -> Connector:
        """Served endpoints use the agent's own config; anything else is built
        from the endpoint copy in the command plus a redeemed grant."""
        eid = spec["endpoint_id"]
        if eid in self.served:
            return self.served_connector(eid, stage_id)
        if not spec.get("connector"):
            raise errors.UnknownEndpoint(f"command carries no connector for {eid}")
        credential = self._redeem(spec["grant"]) if spec.get("grant") else None
        return make_connector(StorageEndpoint.from_dict(spec["connector"]), credential, stage_id=stage_id, staging_dir=self.remote_staging)

    @staticmethod
    def _source_size(src: Connector, path: str) -> int:
        try:
            st = src.stat(path)
        except errors.NotFound:
            st = None
        if st is None or not st.exists:
            raise errors.SourceVanished(f"{path} not found on {src.endpoint.endpoint_id}")
        return st.size_bytes

    @staticmethod
    def _hash(src: Connector, path: str, length: int, cancel: threading.Event):
        h = hashlib.sha256()
        if length <= 0:
            return h
        for piece in src.read_range(path, 0, length):
            if cancel.is_set():
                raise errors.Canceled("canceled")
            h.update(piece)
        return h

    def _run_a2a(self, cmd: dict, run: _Run, emitter: _Emitter) -> dict:
        tid = run.transfer_id
        src_spec, dst = cmd["source"], cmd["destination"]
        src = self._spec_connector(src_spec, tid)
        size = self._source_size(src, src_spec["path"])
        emitter.progress(0, size, force=True)
        expected = None
        if cmd.get("verify_digest", True):
            expected = self._hash(src, src_spec["path"], size, run.cancel).hexdigest()
        client = TusClient(transfer_id=tid)
        url = client.create(dst["data_channel_url"], dst["create_token"], tid, dst["endpoint_id"], dst["path"], size, expected)
        result = push_file(
            src, src_spec["path"], url, dst["patch_token"], int(cmd.get("chunk_bytes") or self.config.chunk_bytes),
            progress=lambda off: emitter.progress(off, size), client=client, cancel=run.cancel,
        )
        if expected is not None and result.digest != expected:
            raise errors.DigestMismatch("source changed while it was being sent")
        emitter.bytes = size
        return emitter.event(
            "COMPLETED", total_bytes=size, digest_source=expected or result.digest, digest_destination=result.committed_digest
        )

    def _run_copy(self, cmd: dict, run: _Run, emitter: _Emitter) -> dict:
        tid = run.transfer_id
        src_spec, dst_spec = cmd["source"], cmd["destination"]
        chunk = int(cmd.get("chunk_bytes") or self.config.chunk_bytes)
        src = self._spec_connector(src_spec, tid)
        dst = self._spec_connector(dst_spec, tid)
        spath, dpath = src_spec["path"], dst_spec["path"]
        if cmd["mode"] == TransferMode.AGENT_TO_STORAGE_PULL.value:
            # an earlier agent-to-agent attempt may have left a session; its
            # staged bytes are reused below
            self.tus.drop_transfer(tid, abort_staging=False)
        size = self._source_size(src, spath)
        offset = 0
        if dst.has(Capability.RANDOM_WRITE) and dst.has_staged(dpath):
            offset = dst.staged_size(dpath)
            if offset > size:
                offset = 0
        if offset:
            log.info("resuming %s at offset %d", tid, offset)
        emitter.progress(offset, size, force=True)
        try:
            hasher = self._hash(src, spath, offset, run.cancel)
            done = offset
            pending = 0
            with dst.write_at(dpath, offset) as sink:
                if done < size:
                    for piece in src.read_range(spath, offset):
                        if run.cancel.is_set():
                            raise errors.Canceled("canceled")
                        sink.write(piece)
                        hasher.update(piece)
                        done += len(piece)
                        pending += len(piece)
                        if pending >= chunk:
                            sink.flush()
                            pending = 0
                            emitter.progress(done, size)
            if done != size:
                raise errors.SourceVanished(f"source ended at {done} of {size} bytes")
            digest = hasher.hexdigest()
            st = dst.commit(dpath, digest if cmd.get("verify_digest", True) else None)
        except errors.Canceled:
            if run.abort_staging:
                dst.abort(dpath)
            raise
        emitter.bytes = size
        return emitter.event("COMPLETED", total_bytes=size, digest_source=digest, digest_destination=st.etag_or_digest)

    # -- user links -----------------------------------------------------
    def _user_scope(self, req: Request, verb: Verb) -> tuple[str, str]:
        token = req.query.get("token", "")
        try:
            claimed = parse_token(token)
        except TokenRejected as exc:
            raise errors.Unauthorized(f"token rejected: {exc.reason}") from None
        eid = req.query.get("endpoint", claimed.endpoint_id)
        path = normalize_path(req.query.get("path", claimed.path))
        try:
            subject = verify_token(self.secret, token, verb, eid, path)
        except TokenRejected as exc:
            raise errors.Unauthorized(f"token rejected: {exc.reason}") from None
        log.debug("user %s by %s on %s", verb.value, subject, eid)
        return eid, path

    def user_upload(self, req: Request):
        eid, path = self._user_scope(req, Verb.USER_UPLOAD)
        if req.content_length is None:
            return Response.json({"code": "LengthRequired", "message": "Content-Length is required", "retryable": False}, 411)
        conn = self.served_connector(eid, stage_id=os.urandom(8).hex())
        if req.query.get("overwrite") != "true" and conn.stat(path).exists:
            raise errors.ObjectExists(f"{path} already exists")
        h = hashlib.sha256()
        received = 0
        try:
            with conn.write_at(path, 0) as sink:
                for piece in req.iter_body():
                    sink.write(piece)
                    h.update(piece)
                    received += len(piece)
            if received != req.content_length:
                raise ConnectionError("upload body truncated")
            digest = h.hexdigest()
            conn.commit(path, digest)
        except BaseException:
            conn.abort(path)
            raise
        self.emit({"agent_id": self.config.agent_id, "kind": "USER_UPLOAD", "endpoint_id": eid, "path": path, "size_bytes": received, "sha256": digest})
        return Response.json({"endpoint_id": eid, "path": path, "size_bytes": received, "sha256": digest}, 201)

    def user_download(self, req: Request):
        eid, path = self._user_scope(req, Verb.USER_DOWNLOAD)
        conn = self.served_connector(eid)
        st = conn.stat(path)
        if not st.exists:
            raise errors.NotFound(f"{path} not found")
        headers = {"Content-Type": "application/octet-stream"}
        if st.etag_or_digest:
            headers["ETag"] = f'"{st.etag_or_digest}"'
        rng = None
        if conn.has(Capability.BYTE_RANGE_READ):
            headers["Accept-Ranges"] = "bytes"
            try:
                rng = parse_range(req.headers.get("Range"), st.size_bytes)
            except errors.RangeBeyondEnd:
                return Response(416, b"", {"Content-Range": f"bytes */{st.size_bytes}"})
        if req.method == "HEAD":
            headers["Content-Length"] = str(st.size_bytes)
            return Response(200, b"", headers)
        if req.method == "GET" and req.query.get("audit") != "0":
            self.emit({"agent_id": self.config.agent_id, "kind": "USER_DOWNLOAD", "endpoint_id": eid, "path": path, "size_bytes": st.size_bytes})
        if rng is None:
            if st.size_bytes == 0:
                return Response(200, b"", headers)
            return Response(200, conn.read_range(path, 0, None), headers, content_length=st.size_bytes)
        start, end = rng
        headers["Content-Range"] = f"bytes {start}-{end - 1}/{st.size_bytes}"
        return Response(206, conn.read_range(path, start, end - start), headers, content_length=end - start)

    # -- lifecycle ------------------------------------------------------
    def start(self) -> "Agent":
        self.service.start()
        self.register()
        for target, name in (
            (self._heartbeat_loop, "heartbeat"),
            (self._poll_loop, "poll"),
            (self._outbox_loop, "outbox"),
            (self._gc_loop, "gc"),
        ):
            t = threading.Thread(target=target, name=f"mft-{name}", daemon=True)
            t.start()
            self.threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            for run in self.running.values():
                run.cancel.set()
        with self._outbox_cond:
            self._outbox_cond.notify_all()
        self.pool.shutdown(wait=False, cancel_futures=True)
        self.service.stop()

    def wait(self) -> None:
        self._stop.wait()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mft-agent", description="Run an MFT transfer agent.")
    parser.add_argument("--config", required=True, help="agent config JSON file")
    parser.add_argument("--log-level", default=os.environ.get("MFT_LOG_LEVEL", "INFO"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = AgentConfig.load(args.config)
        agent = Agent(config)
    except (errors.MFTError, OSError, ValueError) as exc:
        log.error("invalid agent config: %s", exc)
        return 3
    signal.signal(signal.SIGTERM, lambda *_: agent._stop.set())
    signal.signal(signal.SIGINT, lambda *_: agent._stop.set())
    agent.start()
    log.info("agent %s listening on %s", config.agent_id, agent.service.url)
    agent.wait()
    agent.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
