"""Resource backend (endpoint registry) and credential backend (sealed secret
store with transfer-scoped grants).

Two implementations ship: in-memory, and :class:`EncryptedFileBackend`, which
keeps both registries in one JSON document with credential payloads sealed
under AES-256-GCM. The document layout is::

    {"version": 1, "key_check": ..., "endpoints": [...],
     "credentials": [{"credential_id", "kind", "created_at", "sealed": "b64(nonce||ct||tag)"}],
     "grants": [...], "audit": [...]}
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import errors
from .connectors import check_endpoint
from .model import StorageEndpoint, new_id
from .tokens import ClusterSecret, TokenRejected, Verb, mint_token, parse_token, verify_token

STORE_VERSION = 1
MASTER_KEY_ENV = "MFT_MASTER_KEY"
DEFAULT_GRANT_TTL_S = 15 * 60
CREDENTIAL_KINDS = ("ACCESS_KEY_PAIR", "BEARER_TOKEN", "NONE")
# grants are not path-scoped; their tokens carry this placeholder path
GRANT_PATH = "*"

_PAYLOAD_FIELDS = {
    "ACCESS_KEY_PAIR": ("access_key_id", "secret_key"),
    "BEARER_TOKEN": ("token",),
    "NONE": (),
}


@dataclass
class CredentialRecord:
    credential_id: str
    kind: str
    secret_payload: dict = field(repr=False)
    created_at: float = 0.0

    def summary(self) -> dict:
        return {"credential_id": self.credential_id, "kind": self.kind, "created_at": self.created_at}

    @classmethod
    def from_request(cls, data: dict) -> "CredentialRecord":
        if not isinstance(data, dict):
            raise errors.MalformedRequest("credential must be a JSON object")
        kind = data.get("kind")
        if kind not in CREDENTIAL_KINDS:
            raise errors.MalformedRequest(f"credential kind must be one of {CREDENTIAL_KINDS}")
        payload = data.get("secret_payload") or {}
        if not isinstance(payload, dict):
            raise errors.MalformedRequest("secret_payload must be an object")
        missing = [f for f in _PAYLOAD_FIELDS[kind] if not isinstance(payload.get(f), str) or not payload.get(f)]
        if missing:
            raise errors.MalformedRequest(f"{kind} payload needs {missing}")
        return cls(
            credential_id=data.get("credential_id") or new_id(),
            kind=kind,
            secret_payload={f: payload[f] for f in _PAYLOAD_FIELDS[kind]},
            created_at=time.time(),
        )


@dataclass
class CredentialGrant:
    grant_id: str
    credential_id: str
    transfer_id: str
    endpoint_id: str
    expires_at: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ResourceBackend(ABC):
    @abstractmethod
    def register_endpoint(self, endpoint: StorageEndpoint) -> str: ...

    @abstractmethod
    def get_endpoint(self, endpoint_id: str) -> StorageEndpoint: ...

    @abstractmethod
    def list_endpoints(self) -> list[StorageEndpoint]: ...

    @abstractmethod
    def delete_endpoint(self, endpoint_id: str) -> None: ...


class CredentialBackend(ABC):
    @abstractmethod
    def store_credential(self, record: CredentialRecord) -> str: ...

    @abstractmethod
    def get_credential(self, credential_id: str) -> CredentialRecord: ...

    @abstractmethod
    def issue_grant(self, credential_id: str, transfer_id: str, endpoint_id: str, ttl_s: int = DEFAULT_GRANT_TTL_S) -> CredentialGrant: ...

    @abstractmethod
    def redeem_grant(self, secret: ClusterSecret, grant_id: str, wire_token: str, agent_id: str, now: Optional[float] = None) -> dict: ...


class InMemoryResourceBackend(ResourceBackend):
    def __init__(self):
        self._endpoints: dict[str, StorageEndpoint] = {}
        self._lock = threading.RLock()

    def register_endpoint(self, endpoint: StorageEndpoint) -> str:
        endpoint = check_endpoint(endpoint)
        if not endpoint.endpoint_id:
            raise errors.MalformedRequest("endpoint_id is empty")
        with self._lock:
            if endpoint.endpoint_id in self._endpoints:
                raise errors.DuplicateEndpointId(f"endpoint {endpoint.endpoint_id} already registered")
            self._endpoints[endpoint.endpoint_id] = endpoint
            self._changed()
        return endpoint.endpoint_id

    def get_endpoint(self, endpoint_id: str) -> StorageEndpoint:
        with self._lock:
            try:
                return self._endpoints[endpoint_id]
            except KeyError:
                raise errors.UnknownEndpoint(f"unknown endpoint {endpoint_id}") from None

    def list_endpoints(self) -> list[StorageEndpoint]:
        with self._lock:
            return sorted(self._endpoints.values(), key=lambda e: e.endpoint_id)

    def delete_endpoint(self, endpoint_id: str) -> None:
        with self._lock:
            if self._endpoints.pop(endpoint_id, None) is None:
                raise errors.UnknownEndpoint(f"unknown endpoint {endpoint_id}")
            self._changed()

    def _changed(self) -> None:
        pass


class InMemoryCredentialBackend(CredentialBackend):
    def __init__(self):
        self._credentials: dict[str, CredentialRecord] = {}
        self._grants: dict[str, CredentialGrant] = {}
        self.audit: list[dict] = []
        self._lock = threading.RLock()

    def store_credential(self, record: CredentialRecord) -> str:
        with self._lock:
            if record.credential_id in self._credentials:
                raise errors.DuplicateCredentialId(f"credential {record.credential_id} already exists")
            self._credentials[record.credential_id] = record
            self._changed()
        return record.credential_id

    def get_credential(self, credential_id: str) -> CredentialRecord:
        with self._lock:
            try:
                return self._credentials[credential_id]
            except KeyError:
                raise errors.UnknownCredential(f"unknown credential {credential_id}") from None

    def list_credentials(self) -> list[dict]:
        with self._lock:
            return [c.summary() for c in self._credentials.values()]

    def issue_grant(self, credential_id, transfer_id, endpoint_id, ttl_s=DEFAULT_GRANT_TTL_S, now=None) -> CredentialGrant:
        now = time.time() if now is None else now
        with self._lock:
            self.get_credential(credential_id)
            grant = CredentialGrant(new_id(), credential_id, transfer_id, endpoint_id, now + ttl_s)
            self._grants[grant.grant_id] = grant
            self._prune(now)
            self._changed()
        return grant

    def get_grant(self, grant_id: str) -> CredentialGrant:
        with self._lock:
            try:
                return self._grants[grant_id]
            except KeyError:
                raise errors.UnknownGrant(f"unknown grant {grant_id}") from None

    def grant_token(self, secret: ClusterSecret, grant: CredentialGrant, now: Optional[float] = None) -> str:
        """Wire token an agent presents to redeem ``grant``."""
        now = time.time() if now is None else now
        ttl = max(1, min(86400, int(grant.expires_at - now)))
        return mint_token(secret, grant.grant_id, Verb.CRED_REDEEM, grant.endpoint_id, GRANT_PATH, ttl, now=now)

    def redeem_grant(self, secret, grant_id, wire_token, agent_id, now=None) -> dict:
        now = time.time() if now is None else now
        try:
            claimed = parse_token(wire_token)
        except TokenRejected:
            raise errors.Unauthorized("malformed grant token") from None
        if claimed.subject != grant_id:
            raise errors.Unauthorized("token is for a different grant")
        grant = self.get_grant(grant_id)
        try:
            verify_token(secret, wire_token, Verb.CRED_REDEEM, grant.endpoint_id, GRANT_PATH, now=now, skew_s=0)
        except TokenRejected as exc:
            if exc.reason == "Expired":
                raise errors.GrantExpired(f"grant {grant_id} expired") from None
            raise errors.Unauthorized(f"grant token rejected: {exc.reason}") from None
        if now > grant.expires_at:
            raise errors.GrantExpired(f"grant {grant_id} expired")
        record = self.get_credential(grant.credential_id)
        with self._lock:
            self.audit.append({"grant_id": grant_id, "agent_id": agent_id, "timestamp": now})
            self._changed()
        return dict(record.secret_payload)

    def _prune(self, now: float) -> None:
        for gid in [g.grant_id for g in self._grants.values() if g.expires_at < now - 3600]:
            del self._grants[gid]

    def _changed(self) -> None:
        pass


# ---------------------------------------------------------------------------
# persistence


def master_key_from_env(environ=None) -> bytes:
    env = os.environ if environ is None else environ
    raw = env.get(MASTER_KEY_ENV)
    if not raw:
        raise errors.WrongMasterKey(f"{MASTER_KEY_ENV} is not set")
    try:
        key = base64.b64decode(raw, validate=True)
    except ValueError:
        raise errors.WrongMasterKey(f"{MASTER_KEY_ENV} is not valid base64") from None
    if len(key) != 32:
        raise errors.WrongMasterKey(f"{MASTER_KEY_ENV} must decode to 32 bytes")
    return key


def _seal(key: bytes, plaintext: bytes, aad: bytes) -> str:
    nonce = os.urandom(12)
    return base64.b64encode(nonce + AESGCM(key).encrypt(nonce, plaintext, aad)).decode()


def _unseal(key: bytes, sealed: str, aad: bytes) -> bytes:
    try:
        raw = base64.b64decode(sealed, validate=True)
    except ValueError:
        raise errors.CorruptStore("sealed field is not base64") from None
    if len(raw) < 12 + 16:
        raise errors.CorruptStore("sealed field too short")
    try:
        return AESGCM(key).decrypt(raw[:12], raw[12:], aad)
    except InvalidTag:
        raise errors.WrongMasterKey("credential payload failed authentication") from None


_KEY_CHECK = b"mft-store-key-check"


def save_state(path: str, resources: InMemoryResourceBackend, credentials: InMemoryCredentialBackend, master_key: bytes) -> None:
    with resources._lock, credentials._lock:
        doc = {
            "version": STORE_VERSION,
            "key_check": _seal(master_key, _KEY_CHECK, b"key_check"),
            "endpoints": [e.to_dict() for e in resources._endpoints.values()],
            "credentials": [
                {**c.summary(), "sealed": _seal(master_key, json.dumps(c.secret_payload).encode(), c.credential_id.encode())}
                for c in credentials._credentials.values()
            ],
            "grants": [g.to_dict() for g in credentials._grants.values()],
            "audit": list(credentials.audit),
        }
    tmp = f"{path}.tmp-{os.getpid()}-{threading.get_ident()}"
    with open(tmp, "w") as f:
        json.dump(doc, f)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_state(path: str, master_key: bytes):
    """Read a store document; returns fresh ``(resources, credentials)``.
    Nothing is returned unless the whole document decodes and authenticates."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except ValueError:
        raise errors.CorruptStore(f"{path} is not a valid store document") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise errors.CorruptStore(f"{path} lacks a version")
    if doc["version"] != STORE_VERSION:
        raise errors.UnsupportedVersion(f"store version {doc['version']} unsupported")
    try:
        if _unseal(master_key, doc["key_check"], b"key_check") != _KEY_CHECK:
            raise errors.WrongMasterKey("key check mismatch")
        resources = InMemoryResourceBackend()
        for e in doc["endpoints"]:
            ep = StorageEndpoint.from_dict(e)
            resources._endpoints[ep.endpoint_id] = ep
        credentials = InMemoryCredentialBackend()
        for c in doc["credentials"]:
            payload = json.loads(_unseal(master_key, c["sealed"], c["credential_id"].encode()))
            credentials._credentials[c["credential_id"]] = CredentialRecord(c["credential_id"], c["kind"], payload, c["created_at"])
        for g in doc.get("grants", []):
            credentials._grants[g["grant_id"]] = CredentialGrant(**g)
        credentials.audit = list(doc.get("audit", []))
    except (KeyError, TypeError, errors.MalformedRequest) as exc:
        raise errors.CorruptStore(f"{path}: {exc}") from None
    return resources, credentials


class EncryptedFileBackend(InMemoryResourceBackend, InMemoryCredentialBackend):
    """Both registries, persisted to one sealed JSON file after every change."""

    def __init__(self, path: str, master_key: bytes):
        InMemoryResourceBackend.__init__(self)
        InMemoryCredentialBackend.__init__(self)
        self.path = path
        self.master_key = master_key
        self._write_lock = threading.Lock()
        self._loading = False
        if os.path.exists(path):
            resources, credentials = load_state(path, master_key)
            self._endpoints = resources._endpoints
            self._credentials = credentials._credentials
            self._grants = credentials._grants
            self.audit = credentials.audit

    def _changed(self) -> None:
        with self._write_lock:
            save_state(self.path, self, self, self.master_key)


# ---------------------------------------------------------------------------
# redemption envelope: the payload crosses the wire sealed for cluster members


def _grant_key(secret: ClusterSecret, grant_id: str) -> bytes:
    return hmac.new(secret.key_bytes, b"mft-grant-seal\n" + grant_id.encode(), hashlib.sha256).digest()


def seal_payload(secret: ClusterSecret, grant_id: str, payload: dict) -> str:
    return _seal(_grant_key(secret, grant_id), json.dumps(payload).encode(), grant_id.encode())


def open_payload(secret: ClusterSecret, grant_id: str, sealed: str) -> dict:
    try:
        return json.loads(_unseal(_grant_key(secret, grant_id), sealed, grant_id.encode()))
    except (errors.WrongMasterKey, errors.CorruptStore, ValueError):
        raise errors.GrantRedemptionFailed("sealed credential did not open") from None
