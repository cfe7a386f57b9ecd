"""HMAC-scoped capability tokens.

Wire form::

    base64url(canonical) "." base64url(hmac_sha256(key, canonical))

with ``canonical = key_id \\n subject \\n verb \\n endpoint_id \\n path \\n expires_at``
and unpadded base64url. Decoding is strict: any string that does not
re-encode to itself is rejected as malformed.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import secrets
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from . import errors

MIN_TTL_S = 1
MAX_TTL_S = 86400
DEFAULT_SKEW_S = 30


class Verb(str, Enum):
    DATA_PATCH = "DATA_PATCH"
    DATA_CREATE = "DATA_CREATE"
    USER_UPLOAD = "USER_UPLOAD"
    USER_DOWNLOAD = "USER_DOWNLOAD"
    CRED_REDEEM = "CRED_REDEEM"


class TokenRejected(errors.Unauthorized):
    """Raised by :func:`verify_token`; ``reason`` is one of
    BadSignature, Expired, ScopeMismatch, Malformed."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or f"token rejected: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class ClusterSecret:
    key_id: str
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) < 32:
            raise ValueError("cluster secret needs at least 32 key bytes")
        if not self.key_id or any(c in self.key_id for c in "\n:"):
            raise ValueError("key_id must be non-empty without newlines or colons")

    def __repr__(self) -> str:
        return f"ClusterSecret(key_id={self.key_id!r}, key_bytes=<redacted>)"

    @classmethod
    def generate(cls, key_id: str = "k1") -> "ClusterSecret":
        return cls(key_id, secrets.token_bytes(32))

    @classmethod
    def parse(cls, text: str) -> "ClusterSecret":
        """Parse ``key_id:base64key`` (the MFT_CLUSTER_HMAC format)."""
        key_id, sep, b64 = text.strip().partition(":")
        if not sep:
            raise ValueError("expected KEY_ID:BASE64KEY")
        return cls(key_id, base64.b64decode(b64))

    def dump(self) -> str:
        return f"{self.key_id}:{base64.b64encode(self.key_bytes).decode()}"


@dataclass(frozen=True)
class ScopedToken:
    key_id: str
    subject: str
    verb: str
    endpoint_id: str
    path: str
    expires_at: int
    signature: bytes

    def canonical(self) -> str:
        return canonical_string(
            self.key_id, self.subject, self.verb, self.endpoint_id, self.path, self.expires_at
        )


def canonical_string(key_id, subject, verb, endpoint_id, path, expires_at) -> str:
    return "\n".join([key_id, subject, verb, endpoint_id, path, str(int(expires_at))])


def _b64e(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def _b64d(text: str) -> bytes:
    padded = text + "=" * (-len(text) % 4)
    try:
        raw = base64.b64decode(padded, altchars=b"-_", validate=True)
    except (binascii.Error, ValueError):
        raise TokenRejected("Malformed") from None
    # reject non-canonical encodings (stray pad bits would otherwise alias)
    if _b64e(raw) != text:
        raise TokenRejected("Malformed")
    return raw


def sign(secret: ClusterSecret, canonical: str) -> bytes:
    return hmac.new(secret.key_bytes, canonical.encode("utf-8"), hashlib.sha256).digest()


def mint_token(
    secret: ClusterSecret,
    subject: str,
    verb: Verb | str,
    endpoint_id: str,
    path: str,
    ttl_seconds: int,
    now: Optional[float] = None,
) -> str:
    if not (MIN_TTL_S <= int(ttl_seconds) <= MAX_TTL_S) or isinstance(ttl_seconds, bool):
        raise errors.TtlOutOfRange(f"ttl {ttl_seconds} outside [{MIN_TTL_S}, {MAX_TTL_S}]")
    verb = Verb(verb).value
    for name, value in (("subject", subject), ("endpoint_id", endpoint_id), ("path", path)):
        if "\n" in value:
            raise ValueError(f"{name} may not contain a newline")
    now = time.time() if now is None else now
    expires_at = int(now) + int(ttl_seconds)
    canonical = canonical_string(secret.key_id, subject, verb, endpoint_id, path, expires_at)
    return _b64e(canonical.encode("utf-8")) + "." + _b64e(sign(secret, canonical))


def parse_token(wire: str) -> ScopedToken:
    """Decode a wire token without checking its signature."""
    if not isinstance(wire, str) or wire.count(".") != 1:
        raise TokenRejected("Malformed")
    body, sig = wire.split(".")
    try:
        canonical = _b64d(body).decode("utf-8")
    except UnicodeDecodeError:
        raise TokenRejected("Malformed") from None
    signature = _b64d(sig)
    fields = canonical.split("\n")
    if len(fields) != 6 or len(signature) != hashlib.sha256().digest_size:
        raise TokenRejected("Malformed")
    key_id, subject, verb, endpoint_id, path, expires = fields
    if not expires.isdigit() or str(int(expires)) != expires:
        raise TokenRejected("Malformed")
    return ScopedToken(key_id, subject, verb, endpoint_id, path, int(expires), signature)


def verify_token(
    secret: ClusterSecret,
    wire_token: str,
    expected_verb: Verb | str,
    expected_endpoint_id: str,
    expected_path: str,
    now: Optional[float] = None,
    skew_s: int = DEFAULT_SKEW_S,
) -> str:
    """Check a token against the guarded action and return its subject.

    Raises :class:`TokenRejected` otherwise. Expiry honours ``skew_s`` of
    clock-skew grace: a token is accepted while ``now <= expires_at + skew_s``.
    """
    token = parse_token(wire_token)
    expected_sig = sign(secret, token.canonical())
    if token.key_id != secret.key_id or not hmac.compare_digest(expected_sig, token.signature):
        raise TokenRejected("BadSignature")
    now = time.time() if now is None else now
    if now > token.expires_at + skew_s:
        raise TokenRejected("Expired")
    if (
        token.verb != Verb(expected_verb).value
        or token.endpoint_id != expected_endpoint_id
        or token.path != expected_path
    ):
        raise TokenRejected("ScopeMismatch")
    return token.subject
