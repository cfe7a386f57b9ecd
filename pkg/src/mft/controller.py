"""Transfer orchestration: admission, planning, dispatch, event handling,
stall detection and retries.

All record mutations go through :meth:`Controller._commit` under one lock,
so readers only ever observe states reached by legal transitions. Records
are journaled as JSON lines (one full snapshot per mutation) and the journal
is compacted once it grows well past the live record count.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import replace
from typing import Optional

from . import errors
from .backends import (
    DEFAULT_GRANT_TTL_S,
    InMemoryCredentialBackend,
    InMemoryResourceBackend,
)
from .model import (
    DEFAULT_CHUNK_BYTES,
    DEFAULT_HEARTBEAT_INTERVAL_S,
    DEFAULT_LIVENESS_WINDOW_S,
    AgentDescriptor,
    LifecycleEvent,
    RetryPolicy,
    TransferMode,
    TransferRecord,
    TransferRequest,
    TransferState,
    apply_transition,
    compute_backoff,
    new_id,
    plan_transfer,
    validate_request,
)
from .tokens import ClusterSecret, Verb, mint_token

log = logging.getLogger(__name__)

DEFAULT_STALL_TIMEOUT_S = 120.0
DEFAULT_SCHEDULER_INTERVAL_S = 0.5
DATA_TOKEN_TTL_S = 6 * 3600
ACTIVE = (TransferState.DISPATCHED, TransferState.RUNNING)


class _Extra:
    """Controller-private bookkeeping kept next to each record."""

    __slots__ = ("command", "delivered", "retry_at", "last_event_at", "last_seq", "grants")

    def __init__(self, command=None, delivered=False, retry_at=None, last_event_at=0.0, last_seq=0, grants=()):
        self.command = command
        self.delivered = delivered
        self.retry_at = retry_at
        self.last_event_at = last_event_at
        self.last_seq = last_seq
        self.grants = list(grants)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__slots__}

    @classmethod
    def from_dict(cls, data: dict) -> "_Extra":
        return cls(**{k: data.get(k) for k in cls.__slots__ if k in data})


class Controller:
    def __init__(
        self,
        resources: InMemoryResourceBackend,
        credentials: InMemoryCredentialBackend,
        secret: ClusterSecret,
        state_dir: Optional[str] = None,
        retry: RetryPolicy = RetryPolicy(),
        liveness_window_s: float = DEFAULT_LIVENESS_WINDOW_S,
        heartbeat_interval_s: float = DEFAULT_HEARTBEAT_INTERVAL_S,
        stall_timeout_s: float = DEFAULT_STALL_TIMEOUT_S,
        scheduler_interval_s: float = DEFAULT_SCHEDULER_INTERVAL_S,
        poll_interval_ms: int = 1000,
        clock=time.time,
    ):
        self.resources = resources
        self.credentials = credentials
        self.secret = secret
        self.retry = retry
        self.liveness_window_s = liveness_window_s
        self.heartbeat_interval_s = heartbeat_interval_s
        self.stall_timeout_s = stall_timeout_s
        self.scheduler_interval_s = scheduler_interval_s
        self.poll_interval_ms = poll_interval_ms
        self.clock = clock

        self.records: dict[str, TransferRecord] = {}
        self.extras: dict[str, _Extra] = {}
        self.agents: dict[str, AgentDescriptor] = {}
        self.queues: dict[str, deque] = {}
        self.audit: deque = deque(maxlen=10000)
        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

        now = clock()
        # liveness is judged from max(last heartbeat, resume time) so that a
        # controller outage or restart does not read as every agent dying
        self.resume_time = now
        self.last_contact = now

        self.state_dir = state_dir
        self._journal = None
        self._journal_lines = 0
        if state_dir:
            os.makedirs(state_dir, exist_ok=True)
            self._replay()

    # -- persistence ----------------------------------------------------
    @property
    def journal_path(self) -> Optional[str]:
        return os.path.join(self.state_dir, "transfers.jsonl") if self.state_dir else None

    def _replay(self) -> None:
        path = self.journal_path
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        doc = json.loads(line)
                        rec = TransferRecord.from_dict(doc["record"])
                    except (ValueError, KeyError, errors.MFTError):
                        # a torn final line from a crash mid-append
                        log.warning("skipping unreadable journal line")
                        continue
                    self.records[rec.transfer_id] = rec
                    self.extras[rec.transfer_id] = _Extra.from_dict(doc.get("extra", {}))
        self._compact()
        for tid, rec in self.records.items():
            extra = self.extras[tid]
            if rec.state is TransferState.DISPATCHED and not extra.delivered and extra.command:
                self._queue(rec.executor_agent_id).append(extra.command)
            extra.last_event_at = max(extra.last_event_at or 0.0, self.resume_time)
        if self.records:
            log.info("restored %d transfer records", len(self.records))

    def _compact(self) -> None:
        path = self.journal_path
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            for tid, rec in self.records.items():
                f.write(json.dumps({"record": rec.to_dict(), "extra": self.extras[tid].to_dict()}) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        if self._journal:
            self._journal.close()
        self._journal = open(path, "a")
        self._journal_lines = len(self.records)

    def _write(self, rec: TransferRecord, durable: bool) -> None:
        if not self._journal:
            return
        self._journal.write(json.dumps({"record": rec.to_dict(), "extra": self.extras[rec.transfer_id].to_dict()}) + "\n")
        self._journal.flush()
        if durable:
            os.fsync(self._journal.fileno())
        self._journal_lines += 1
        if self._journal_lines > 1000 + 4 * len(self.records):
            self._compact()

    def _commit(self, rec: TransferRecord, durable: bool = True) -> TransferRecord:
        self.records[rec.transfer_id] = rec
        self._write(rec, durable)
        self._changed.notify_all()
        return rec

    # -- agents ---------------------------------------------------------
    def _queue(self, agent_id: str) -> deque:
        return self.queues.setdefault(agent_id, deque())

    def _touch(self, now: float) -> None:
        if now - self.last_contact > self.liveness_window_s:
            log.info("agent contact resumed after %.1fs of silence", now - self.last_contact)
            self.resume_time = now
        self.last_contact = now

    def _effective_seen(self, agent_id: Optional[str]) -> float:
        agent = self.agents.get(agent_id) if agent_id else None
        return max(agent.last_heartbeat if agent else 0.0, self.resume_time)

    def _is_live(self, agent_id: Optional[str], now: float) -> bool:
        agent = self.agents.get(agent_id) if agent_id else None
        return agent is not None and agent.is_live(now, self.liveness_window_s)

    def register_agent(self, body: dict) -> dict:
        agent_id = body.get("agent_id")
        if not isinstance(agent_id, str) or not agent_id:
            raise errors.MalformedRequest("agent_id is required")
        served = body.get("served_endpoint_ids") or []
        if not isinstance(served, list) or not all(isinstance(e, str) for e in served):
            raise errors.MalformedRequest("served_endpoint_ids must be a list of strings")
        running = frozenset(body.get("running_transfer_ids") or ())
        with self._lock:
            now = self.clock()
            self._touch(now)
            self.agents[agent_id] = AgentDescriptor(
                agent_id=agent_id,
                served_endpoint_ids=frozenset(served),
                data_channel_url=str(body.get("data_channel_url") or ""),
                user_http_url=str(body.get("user_http_url") or ""),
                last_heartbeat=now,
                running_transfer_ids=running,
                registered_at=now,
            )
            self._queue(agent_id)
            # work delivered to an earlier incarnation that it no longer runs is lost
            for tid, rec in list(self.records.items()):
                extra = self.extras[tid]
                if rec.executor_agent_id == agent_id and rec.state in ACTIVE and extra.delivered and tid not in running:
                    self._fail_attempt(rec, {"code": "AgentRestarted", "message": f"agent {agent_id} restarted", "retryable": True}, now)
            log.info("agent %s registered serving %s", agent_id, sorted(served))
        return {
            "poll_interval_ms": self.poll_interval_ms,
            "liveness_window_s": self.liveness_window_s,
            "heartbeat_interval_s": self.heartbeat_interval_s,
        }

    def heartbeat(self, agent_id: str, body: Optional[dict] = None) -> dict:
        with self._lock:
            agent = self.agents.get(agent_id)
            if agent is None:
                raise errors.UnknownAgent(f"agent {agent_id} must register")
            now = self.clock()
            self._touch(now)
            agent.last_heartbeat = now
            if body and isinstance(body.get("running_transfer_ids"), list):
                agent.running_transfer_ids = frozenset(body["running_transfer_ids"])
        return {"ok": True}

    def poll_commands(self, agent_id: str, wait_s: float = 0.0) -> list:
        deadline = time.monotonic() + max(0.0, min(wait_s, 60.0))
        with self._lock:
            if agent_id not in self.agents:
                raise errors.UnknownAgent(f"agent {agent_id} must register")
            # contact counts once, on arrival; a parked poll whose caller
            # died must not keep the agent looking alive
            now = self.clock()
            self._touch(now)
            self.agents[agent_id].last_heartbeat = now
            queue = self._queue(agent_id)
            while True:
                if queue or self._stop.is_set():
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self._changed.wait(min(left, 1.0))
            out = list(queue)
            queue.clear()
            for cmd in out:
                tid = cmd.get("transfer_id")
                extra = self.extras.get(tid)
                if extra is not None and cmd.get("type") == "TRANSFER" and extra.command and extra.command["command_id"] == cmd["command_id"]:
                    extra.delivered = True
                    self._write(self.records[tid], durable=False)
        return out

    def list_agents(self) -> list[dict]:
        with self._lock:
            now = self.clock()
            return [
                {**a.to_dict(), "live": a.is_live(now, self.liveness_window_s)}
                for a in sorted(self.agents.values(), key=lambda a: a.agent_id)
            ]

    def agents_serving(self, endpoint_id: str, now: Optional[float] = None) -> list[AgentDescriptor]:
        """Live agents for ``endpoint_id``; an endpoint's agent_affinity, when
        set, overrides what agents declare."""
        now = self.clock() if now is None else now
        try:
            affinity = self.resources.get_endpoint(endpoint_id).agent_affinity
        except errors.UnknownEndpoint:
            affinity = ()
        with self._lock:
            found = []
            for a in sorted(self.agents.values(), key=lambda a: a.agent_id):
                serves = a.agent_id in affinity if affinity else endpoint_id in a.served_endpoint_ids
                if serves and a.is_live(now, self.liveness_window_s):
                    found.append(a)
            return found

    def _plan(self, request: TransferRequest, now: float):
        src = self.agents_serving(request.source.endpoint_id, now)
        dst = self.agents_serving(request.destination.endpoint_id, now)
        return plan_transfer(request, src[0] if src else None, dst[0] if dst else None)

    # -- admission ------------------------------------------------------
    def admit_transfer(self, request: TransferRequest) -> TransferRecord:
        request = validate_request(request)
        self.resources.get_endpoint(request.source.endpoint_id)
        self.resources.get_endpoint(request.destination.endpoint_id)
        with self._lock:
            now = self.clock()
            rec = TransferRecord.create(request, now)
            self.extras[rec.transfer_id] = _Extra(last_event_at=now)
            try:
                mode, executor = self._plan(request, now)
            except errors.NoAgentPath as exc:
                rec = apply_transition(rec, LifecycleEvent.ATTEMPTS_EXHAUSTED, "NoAgentPath", now, last_error=exc.to_dict())
            else:
                rec = apply_transition(rec, LifecycleEvent.PLANNED, f"{mode.value} via {executor}", now, mode=mode, executor_agent_id=executor)
            self._commit(rec)
            log.info("admitted transfer %s: %s", rec.transfer_id, rec.state.value)
            return rec

    def get(self, transfer_id: str) -> TransferRecord:
        with self._lock:
            try:
                return self.records[transfer_id]
            except KeyError:
                raise errors.UnknownTransfer(f"unknown transfer {transfer_id}") from None

    def wait_for_change(self, transfer_id: str, version: int, wait_s: float) -> TransferRecord:
        """Block until the record's version differs from ``version``."""
        deadline = time.monotonic() + max(0.0, min(wait_s, 60.0))
        with self._lock:
            while True:
                rec = self.get(transfer_id)
                left = deadline - time.monotonic()
                if rec.version != version or left <= 0 or self._stop.is_set():
                    return rec
                self._changed.wait(min(left, 1.0))

    def list_transfers(self, state: Optional[str] = None, limit: int = 100, after: Optional[str] = None) -> list[TransferRecord]:
        """Newest first; ``after`` is the last transfer_id of the previous page."""
        with self._lock:
            recs = sorted(self.records.values(), key=lambda r: (r.created_at, r.transfer_id), reverse=True)
        if state:
            try:
                wanted = TransferState(state)
            except ValueError:
                raise errors.MalformedRequest(f"unknown state {state!r}") from None
            recs = [r for r in recs if r.state is wanted]
        if after:
            ids = [r.transfer_id for r in recs]
            recs = recs[ids.index(after) + 1:] if after in ids else []
        return recs[: max(1, min(limit, 1000))]

    def endpoint_in_use(self, endpoint_id: str) -> bool:
        with self._lock:
            return any(
                not r.state.terminal and endpoint_id in (r.request.source.endpoint_id, r.request.destination.endpoint_id)
                for r in self.records.values()
            )

    # -- dispatch -------------------------------------------------------
    def _spec(self, ref, transfer_id: str, with_connector: bool, now: float) -> dict:
        endpoint = self.resources.get_endpoint(ref.endpoint_id)
        spec = {"endpoint_id": ref.endpoint_id, "path": ref.path}
        if with_connector:
            spec["connector"] = endpoint.to_dict()
            spec["grant"] = None
            if endpoint.credential_ref:
                grant = self.credentials.issue_grant(endpoint.credential_ref, transfer_id, endpoint.endpoint_id, DEFAULT_GRANT_TTL_S, now=now)
                self.extras[transfer_id].grants.append(grant.grant_id)
                spec["grant"] = {"grant_id": grant.grant_id, "token": self.credentials.grant_token(self.secret, grant, now)}
        return spec

    def _build_command(self, rec: TransferRecord, now: float) -> dict:
        req = rec.request
        cmd = {
            "type": "TRANSFER",
            "command_id": new_id(),
            "transfer_id": rec.transfer_id,
            "attempt": rec.attempt,
            "mode": rec.mode.value,
            "chunk_bytes": req.requested_chunk_bytes or DEFAULT_CHUNK_BYTES,
            "verify_digest": req.verify_digest,
        }
        cmd["source"] = self._spec(req.source, rec.transfer_id, True, now)
        if rec.mode is TransferMode.AGENT_TO_AGENT:
            receiver = self.agents_serving(req.destination.endpoint_id, now)[0]
            dest = {"endpoint_id": req.destination.endpoint_id, "path": req.destination.path}
            for key, verb in (("create_token", Verb.DATA_CREATE), ("patch_token", Verb.DATA_PATCH)):
                dest[key] = mint_token(self.secret, rec.transfer_id, verb, req.destination.endpoint_id, req.destination.path, DATA_TOKEN_TTL_S, now=now)
            dest["data_channel_url"] = receiver.data_channel_url
            dest["receiver_agent_id"] = receiver.agent_id
            cmd["destination"] = dest
        else:
            cmd["destination"] = self._spec(req.destination, rec.transfer_id, True, now)
        return cmd

    def dispatch_pending(self) -> int:
        count = 0
        with self._lock:
            now = self.clock()
            for tid, rec in list(self.records.items()):
                if rec.state is not TransferState.PLANNED:
                    continue
                try:
                    mode, executor = self._plan(rec.request, now)
                except errors.NoAgentPath:
                    continue
                if (mode, executor) != (rec.mode, rec.executor_agent_id):
                    log.info("re-planned %s: %s via %s", tid, mode.value, executor)
                rec = replace(rec, mode=mode, executor_agent_id=executor)
                try:
                    cmd = self._build_command(rec, now)
                except errors.MFTError as exc:
                    # e.g. a credential deleted after admission; nothing is dispatched
                    rec = apply_transition(rec, LifecycleEvent.DISPATCHED, "dispatch failed", now)
                    self.extras[tid].command = None
                    self._fail_attempt(rec, exc.to_dict(), now)
                    continue
                extra = self.extras[tid]
                extra.command, extra.delivered, extra.last_event_at, extra.last_seq = cmd, False, now, 0
                rec = apply_transition(rec, LifecycleEvent.DISPATCHED, f"command {cmd['command_id']} to {executor}", now)
                self._commit(rec)
                self._queue(executor).append(cmd)
                count += 1
            if count:
                self._changed.notify_all()
        return count

    # -- events ---------------------------------------------------------
    def _fail_attempt(self, rec: TransferRecord, error: dict, now: float) -> TransferRecord:
        """AttemptFailed, then either schedule the retry or give up."""
        tid = rec.transfer_id
        extra = self.extras[tid]
        old_attempt, old_executor = rec.attempt, rec.executor_agent_id
        rec = apply_transition(rec, LifecycleEvent.ATTEMPT_FAILED, error.get("code", "AttemptFailed"), now, last_error=error)
        if rec.attempt >= self.retry.max_attempts or not error.get("retryable", True):
            why = "AttemptsExhausted" if error.get("retryable", True) else f"non-retryable {error.get('code')}"
            rec = apply_transition(rec, LifecycleEvent.ATTEMPTS_EXHAUSTED, why, now)
            extra.retry_at = None
        else:
            extra.retry_at = now + compute_backoff(self.retry, rec.attempt) / 1000.0
        if extra.command is not None and old_executor:
            self._queue(old_executor).append(
                {"type": "CANCEL", "command_id": new_id(), "transfer_id": tid, "attempt": old_attempt, "abort_staging": rec.state.terminal}
            )
        extra.command = None
        log.info("transfer %s attempt %d failed: %s -> %s", tid, old_attempt, error.get("code"), rec.state.value)
        return self._commit(rec)

    def on_agent_event(self, agent_id: str, event: dict) -> Optional[TransferRecord]:
        kind = event.get("kind")
        if kind in ("USER_UPLOAD", "USER_DOWNLOAD"):
            with self._lock:
                self.audit.append({"agent_id": agent_id, "timestamp": self.clock(), **{k: event.get(k) for k in ("kind", "endpoint_id", "path", "size_bytes", "sha256")}})
            return None
        tid = event.get("transfer_id")
        with self._lock:
            now = self.clock()
            self._touch(now)
            rec = self.get(tid)
            extra = self.extras[tid]
            attempt = event.get("attempt")
            seq = event.get("seq", 0)
            if rec.state not in ACTIVE or attempt != rec.attempt or agent_id != rec.executor_agent_id:
                self.audit.append({"note": "stale event", "transfer_id": tid, "agent_id": agent_id, "attempt": attempt, "kind": kind, "timestamp": now})
                return rec
            if not isinstance(seq, int) or seq <= extra.last_seq:
                return rec
            extra.last_seq = seq
            extra.last_event_at = now
            extra.delivered = True
            changes = {}
            if isinstance(event.get("bytes_transferred"), int):
                changes["bytes_transferred"] = max(0, event["bytes_transferred"])
            if isinstance(event.get("total_bytes"), int):
                changes["total_bytes"] = event["total_bytes"]
            if kind == "PROGRESS":
                if rec.state is TransferState.DISPATCHED:
                    rec = apply_transition(rec, LifecycleEvent.PROGRESS_STARTED, "", now, **changes)
                    return self._commit(rec)
                rec = replace(rec, updated_at=now, version=rec.version + 1, **changes)
                return self._commit(rec, durable=False)
            if kind == "COMPLETED":
                if rec.state is TransferState.DISPATCHED:
                    rec = apply_transition(rec, LifecycleEvent.PROGRESS_STARTED, "", now)
                ds, dd = event.get("digest_source"), event.get("digest_destination")
                rec = replace(rec, digest_source=ds, digest_destination=dd, **changes)
                if rec.request.verify_digest and not self._digests_ok(rec, ds, dd):
                    err = errors.DigestMismatch(f"source {ds} != destination {dd}").to_dict()
                    return self._fail_attempt(rec, err, now)
                extra.command = None
                rec = apply_transition(rec, LifecycleEvent.COMPLETED, "", now)
                log.info("transfer %s completed (%s bytes)", tid, rec.bytes_transferred)
                return self._commit(rec)
            if kind == "ERROR":
                err = event.get("error") or {}
                err = {"code": str(err.get("code", "InternalError")), "message": str(err.get("message", "")), "retryable": bool(err.get("retryable", True))}
                rec = replace(rec, **changes)
                return self._fail_attempt(rec, err, now)
            raise errors.MalformedRequest(f"unknown event kind {kind!r}")

    def _digests_ok(self, rec: TransferRecord, ds: Optional[str], dd: Optional[str]) -> bool:
        if not ds:
            return False
        if dd is None:
            # plain HTTP stores report no digest; the executor verified the staged bytes
            try:
                return self.resources.get_endpoint(rec.request.destination.endpoint_id).kind == "HTTP"
            except errors.UnknownEndpoint:
                return False
        return ds == dd

    # -- liveness -------------------------------------------------------
    def scan_liveness(self) -> list[tuple[str, str]]:
        actions = []
        with self._lock:
            now = self.clock()
            partitioned = now - self.last_contact > self.liveness_window_s
            for tid, rec in list(self.records.items()):
                extra = self.extras[tid]
                if rec.state in ACTIVE and not partitioned:
                    if now - self._effective_seen(rec.executor_agent_id) > self.liveness_window_s:
                        err = {"code": "AgentLost", "message": f"executor {rec.executor_agent_id} missed its liveness window", "retryable": True}
                    elif now - max(extra.last_event_at or 0.0, self.resume_time) > self.stall_timeout_s:
                        err = {"code": "Stalled", "message": f"no progress for {self.stall_timeout_s:.0f}s", "retryable": True}
                    else:
                        continue
                    self._fail_attempt(rec, err, now)
                    actions.append((tid, err["code"]))
                elif rec.state is TransferState.RETRY_WAIT and extra.retry_at is not None and now >= extra.retry_at:
                    extra.retry_at = None
                    self._commit(apply_transition(rec, LifecycleEvent.BACKOFF_ELAPSED, "", now))
                    actions.append((tid, "BackoffElapsed"))
        return actions

    # -- cancel ---------------------------------------------------------
    def cancel_transfer(self, transfer_id: str) -> TransferRecord:
        with self._lock:
            rec = self.get(transfer_id)
            if rec.state.terminal:
                raise errors.AlreadyTerminal(f"transfer {transfer_id} is already {rec.state.value}")
            now = self.clock()
            extra = self.extras[transfer_id]
            targets = set()
            if rec.executor_agent_id and (rec.state in ACTIVE or extra.command):
                targets.add(rec.executor_agent_id)
            cmd = extra.command or {}
            receiver = (cmd.get("destination") or {}).get("receiver_agent_id")
            if receiver:
                targets.add(receiver)
            # a command still sitting in the queue is simply withdrawn
            for q in self.queues.values():
                for c in list(q):
                    if c.get("transfer_id") == transfer_id:
                        q.remove(c)
            for agent_id in sorted(targets):
                self._queue(agent_id).append(
                    {"type": "CANCEL", "command_id": new_id(), "transfer_id": transfer_id, "attempt": rec.attempt, "abort_staging": True}
                )
            extra.command, extra.retry_at = None, None
            rec = apply_transition(rec, LifecycleEvent.CANCEL, "canceled by user", now)
            return self._commit(rec)

    # -- scheduler ------------------------------------------------------
    def tick(self) -> None:
        self.scan_liveness()
        self.dispatch_pending()

    def start(self) -> "Controller":
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="mft-scheduler", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.wait(self.scheduler_interval_s):
            try:
                self.tick()
            except Exception:
                log.exception("scheduler tick failed")

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            self._changed.notify_all()
        if self._thread:
            self._thread.join(timeout=5)
        with self._lock:
            if self._journal:
                self._journal.close()
                self._journal = None
