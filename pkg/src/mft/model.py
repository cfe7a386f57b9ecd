"""Domain types, the transfer lifecycle, planning and retry policy."""

from __future__ import annotations

import secrets
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from . import errors

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

MIN_CHUNK_BYTES = 64 * KiB
MAX_CHUNK_BYTES = 64 * MiB
DEFAULT_CHUNK_BYTES = 8 * MiB

DEFAULT_LIVENESS_WINDOW_S = 30.0
DEFAULT_HEARTBEAT_INTERVAL_S = 10.0


def new_id() -> str:
    """128-bit random id as 32 lowercase hex chars."""
    return secrets.token_hex(16)


def normalize_path(path: str) -> str:
    """Normalize a storage-relative path to ``/a/b`` form.

    Empty and ``.`` segments are dropped; ``..`` anywhere is rejected rather
    than resolved, since a request must never name a location outside its
    endpoint root.
    """
    if not isinstance(path, str) or not path.strip():
        raise errors.EmptyPath("path is empty")
    if "\x00" in path or "\\" in path or "\n" in path:
        raise errors.PathEscapesRoot(f"illegal character in path {path!r}")
    parts = []
    for seg in path.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            raise errors.PathEscapesRoot(f"path {path!r} contains a parent segment")
        parts.append(seg)
    if not parts:
        raise errors.EmptyPath(f"path {path!r} names the endpoint root")
    return "/" + "/".join(parts)


@dataclass(frozen=True)
class EndpointRef:
    endpoint_id: str
    path: str

    @classmethod
    def parse(cls, text: str) -> "EndpointRef":
        """Parse the CLI form ``endpoint_id:/path``."""
        endpoint_id, sep, path = text.partition(":")
        if not sep:
            raise errors.MalformedRequest(f"expected ENDPOINT:PATH, got {text!r}")
        return cls(endpoint_id, path)

    def to_dict(self) -> dict:
        return {"endpoint_id": self.endpoint_id, "path": self.path}

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointRef":
        try:
            return cls(str(data["endpoint_id"]), str(data["path"]))
        except (KeyError, TypeError) as exc:
            raise errors.MalformedRequest(f"bad endpoint reference: {exc}") from None

    def __str__(self) -> str:
        return f"{self.endpoint_id}:{self.path}"


@dataclass(frozen=True)
class TransferRequest:
    source: EndpointRef
    destination: EndpointRef
    verify_digest: bool = True
    requested_chunk_bytes: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "destination": self.destination.to_dict(),
            "verify_digest": self.verify_digest,
            "requested_chunk_bytes": self.requested_chunk_bytes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TransferRequest":
        if not isinstance(data, dict):
            raise errors.MalformedRequest("transfer request must be a JSON object")
        try:
            chunk = data.get("requested_chunk_bytes")
            if chunk is not None and (isinstance(chunk, bool) or not isinstance(chunk, int)):
                raise errors.MalformedRequest("requested_chunk_bytes must be an integer")
            verify = data.get("verify_digest", True)
            if not isinstance(verify, bool):
                raise errors.MalformedRequest("verify_digest must be a boolean")
            return cls(
                EndpointRef.from_dict(data["source"]),
                EndpointRef.from_dict(data["destination"]),
                verify,
                chunk,
            )
        except KeyError as exc:
            raise errors.MalformedRequest(f"missing field {exc}") from None


def validate_request(request: TransferRequest) -> TransferRequest:
    """Return ``request`` with normalized paths, or raise the first violation."""
    for ref in (request.source, request.destination):
        if not ref.endpoint_id:
            raise errors.EmptyPath("endpoint_id is empty")
    src = EndpointRef(request.source.endpoint_id, normalize_path(request.source.path))
    dst = EndpointRef(request.destination.endpoint_id, normalize_path(request.destination.path))
    if src == dst:
        raise errors.SameSourceAndDestination(f"source and destination are both {src}")
    chunk = request.requested_chunk_bytes
    if chunk is not None and not (MIN_CHUNK_BYTES <= chunk <= MAX_CHUNK_BYTES):
        raise errors.ChunkSizeOutOfRange(
            f"requested_chunk_bytes {chunk} outside [{MIN_CHUNK_BYTES}, {MAX_CHUNK_BYTES}]"
        )
    return replace(request, source=src, destination=dst)


class TransferState(str, Enum):
    CREATED = "CREATED"
    PLANNED = "PLANNED"
    DISPATCHED = "DISPATCHED"
    RUNNING = "RUNNING"
    RETRY_WAIT = "RETRY_WAIT"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset(
    {TransferState.COMPLETED, TransferState.FAILED, TransferState.CANCELED}
)


class TransferMode(str, Enum):
    AGENT_TO_AGENT = "AGENT_TO_AGENT"
    AGENT_TO_STORAGE_PUSH = "AGENT_TO_STORAGE_PUSH"
    AGENT_TO_STORAGE_PULL = "AGENT_TO_STORAGE_PULL"


class LifecycleEvent(str, Enum):
    PLANNED = "Planned"
    DISPATCHED = "Dispatched"
    PROGRESS_STARTED = "ProgressStarted"
    COMPLETED = "Completed"
    ATTEMPT_FAILED = "AttemptFailed"
    BACKOFF_ELAPSED = "BackoffElapsed"
    ATTEMPTS_EXHAUSTED = "AttemptsExhausted"
    CANCEL = "Cancel"


_S = TransferState
_E = LifecycleEvent

TRANSITIONS: dict[tuple[TransferState, LifecycleEvent], TransferState] = {
    (_S.CREATED, _E.PLANNED): _S.PLANNED,
    (_S.CREATED, _E.ATTEMPTS_EXHAUSTED): _S.FAILED,
    (_S.PLANNED, _E.DISPATCHED): _S.DISPATCHED,
    (_S.DISPATCHED, _E.PROGRESS_STARTED): _S.RUNNING,
    (_S.DISPATCHED, _E.ATTEMPT_FAILED): _S.RETRY_WAIT,
    (_S.RUNNING, _E.COMPLETED): _S.COMPLETED,
    (_S.RUNNING, _E.ATTEMPT_FAILED): _S.RETRY_WAIT,
    (_S.RETRY_WAIT, _E.BACKOFF_ELAPSED): _S.PLANNED,
    (_S.RETRY_WAIT, _E.ATTEMPTS_EXHAUSTED): _S.FAILED,
}
for _state in _S:
    if not _state.terminal:
        TRANSITIONS[(_state, _E.CANCEL)] = _S.CANCELED

LEGAL_STATE_PAIRS = frozenset((src, dst) for (src, _), dst in TRANSITIONS.items())


@dataclass(frozen=True)
class HistoryEntry:
    timestamp: float
    state: TransferState
    reason: str = ""

    def to_dict(self) -> dict:
        return {"timestamp": self.timestamp, "state": self.state.value, "reason": self.reason}

    @classmethod
    def from_dict(cls, data: dict) -> "HistoryEntry":
        return cls(float(data["timestamp"]), TransferState(data["state"]), data.get("reason", ""))


@dataclass(frozen=True)
class TransferRecord:
    transfer_id: str
    request: TransferRequest
    state: TransferState = TransferState.CREATED
    mode: Optional[TransferMode] = None
    executor_agent_id: Optional[str] = None
    attempt: int = 0
    bytes_transferred: int = 0
    total_bytes: Optional[int] = None
    digest_source: Optional[str] = None
    digest_destination: Optional[str] = None
    history: tuple = ()
    last_error: Optional[dict] = None
    created_at: float = 0.0
    updated_at: float = 0.0
    # bumped on every mutation; lets clients long-poll for changes
    version: int = 0

    @classmethod
    def create(cls, request: TransferRequest, now: Optional[float] = None) -> "TransferRecord":
        now = time.time() if now is None else now
        return cls(
            transfer_id=new_id(),
            request=request,
            history=(HistoryEntry(now, TransferState.CREATED, "admitted"),),
            created_at=now,
            updated_at=now,
        )

    def to_dict(self) -> dict:
        return {
            "transfer_id": self.transfer_id,
            "request": self.request.to_dict(),
            "state": self.state.value,
            "mode": self.mode.value if self.mode else None,
            "executor_agent_id": self.executor_agent_id,
            "attempt": self.attempt,
            "bytes_transferred": self.bytes_transferred,
            "total_bytes": self.total_bytes,
            "digest_source": self.digest_source,
            "digest_destination": self.digest_destination,
            "history": [h.to_dict() for h in self.history],
            "last_error": self.last_error,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "version": self.version,
        }

    def summary(self) -> dict:
        return {
            "transfer_id": self.transfer_id,
            "state": self.state.value,
            "mode": self.mode.value if self.mode else None,
            "attempt": self.attempt,
            "bytes_transferred": self.bytes_transferred,
            "total_bytes": self.total_bytes,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TransferRecord":
        return cls(
            transfer_id=data["transfer_id"],
            request=TransferRequest.from_dict(data["request"]),
            state=TransferState(data["state"]),
            mode=TransferMode(data["mode"]) if data.get("mode") else None,
            executor_agent_id=data.get("executor_agent_id"),
            attempt=int(data.get("attempt", 0)),
            bytes_transferred=int(data.get("bytes_transferred", 0)),
            total_bytes=data.get("total_bytes"),
            digest_source=data.get("digest_source"),
            digest_destination=data.get("digest_destination"),
            history=tuple(HistoryEntry.from_dict(h) for h in data.get("history", [])),
            last_error=data.get("last_error"),
            created_at=float(data.get("created_at", 0.0)),
            updated_at=float(data.get("updated_at", 0.0)),
            version=int(data.get("version", 0)),
        )


def apply_transition(
    record: TransferRecord,
    event: LifecycleEvent,
    reason: str = "",
    now: Optional[float] = None,
    **changes,
) -> TransferRecord:
    """Apply one lifecycle event and return the updated record.

    ``changes`` are extra field updates applied together with the transition
    (mode, digests, last_error...). ``AttemptFailed`` increments ``attempt``.
    The input record is never modified.
    """
    event = LifecycleEvent(event)
    if record.state.terminal:
        raise errors.TerminalStateImmutable(
            f"transfer {record.transfer_id} is {record.state.value}; {event.value} ignored"
        )
    target = TRANSITIONS.get((record.state, event))
    if target is None:
        raise errors.IllegalTransition(f"{event.value} is not legal in state {record.state.value}")
    now = time.time() if now is None else now
    attempt = record.attempt + 1 if event is LifecycleEvent.ATTEMPT_FAILED else record.attempt
    return replace(
        record,
        state=target,
        attempt=attempt,
        history=record.history + (HistoryEntry(now, target, reason or event.value),),
        updated_at=now,
        version=record.version + 1,
        **changes,
    )


def history_is_legal(history) -> bool:
    """True when every adjacent pair of states in ``history`` is a table edge."""
    states = [h.state for h in history]
    if not states or states[0] is not TransferState.CREATED:
        return False
    return all((a, b) in LEGAL_STATE_PAIRS for a, b in zip(states, states[1:]))


@dataclass
class AgentDescriptor:
    agent_id: str
    served_endpoint_ids: frozenset = frozenset()
    data_channel_url: str = ""
    user_http_url: str = ""
    last_heartbeat: float = 0.0
    running_transfer_ids: frozenset = frozenset()
    registered_at: float = 0.0

    def is_live(self, now: float, liveness_window_s: float = DEFAULT_LIVENESS_WINDOW_S) -> bool:
        return now - self.last_heartbeat <= liveness_window_s

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "served_endpoint_ids": sorted(self.served_endpoint_ids),
            "data_channel_url": self.data_channel_url,
            "user_http_url": self.user_http_url,
            "last_heartbeat": self.last_heartbeat,
            "running_transfer_ids": sorted(self.running_transfer_ids),
        }


def plan_transfer(
    request: TransferRequest,
    source_agent: Optional[AgentDescriptor],
    dest_agent: Optional[AgentDescriptor],
) -> tuple[TransferMode, str]:
    """Choose the transfer mode and executing agent.

    Callers pass only agents already judged live. When both ends have an
    agent the sender pushes over the data channel.
    """
    if source_agent is not None and dest_agent is not None:
        return TransferMode.AGENT_TO_AGENT, source_agent.agent_id
    if source_agent is not None:
        return TransferMode.AGENT_TO_STORAGE_PUSH, source_agent.agent_id
    if dest_agent is not None:
        return TransferMode.AGENT_TO_STORAGE_PULL, dest_agent.agent_id
    raise errors.NoAgentPath(
        f"no live agent serves {request.source.endpoint_id} or {request.destination.endpoint_id}"
    )


@dataclass(frozen=True)
class RetryPolicy:
    base_delay_ms: int = 1000
    multiplier: int = 2
    max_delay_ms: int = 60000
    max_attempts: int = 3

    def __post_init__(self):
        if self.base_delay_ms <= 0 or self.max_delay_ms <= 0:
            raise ValueError("delays must be positive")
        if self.base_delay_ms > self.max_delay_ms:
            raise ValueError("base_delay_ms must not exceed max_delay_ms")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


def compute_backoff(policy: RetryPolicy, attempt: int) -> int:
    """Delay in ms before retry number ``attempt`` (1-based), capped, no jitter."""
    if attempt < 1:
        raise ValueError("attempt must be >= 1")
    # cap the exponent first so huge attempts stay cheap
    exponent = min(attempt - 1, 64)
    return min(policy.base_delay_ms * policy.multiplier**exponent, policy.max_delay_ms)


@dataclass
class StorageEndpoint:
    """Registered storage metadata, as kept by the resource backend."""

    endpoint_id: str
    kind: str
    base_locator: str
    capabilities: frozenset = field(default_factory=frozenset)
    credential_ref: Optional[str] = None
    agent_affinity: tuple = ()

    def to_dict(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "kind": self.kind,
            "base_locator": self.base_locator,
            "capabilities": sorted(self.capabilities),
            "credential_ref": self.credential_ref,
            "agent_affinity": list(self.agent_affinity),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StorageEndpoint":
        if not isinstance(data, dict):
            raise errors.MalformedRequest("endpoint must be a JSON object")
        try:
            return cls(
                endpoint_id=str(data["endpoint_id"]),
                kind=str(data["kind"]),
                base_locator=str(data["base_locator"]),
                capabilities=frozenset(data.get("capabilities") or ()),
                credential_ref=data.get("credential_ref"),
                agent_affinity=tuple(data.get("agent_affinity") or ()),
            )
        except KeyError as exc:
            raise errors.MalformedRequest(f"endpoint missing field {exc}") from None
