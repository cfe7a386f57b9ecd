from __future__ import annotations

import hashlib
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

from .. import errors
from ..model import StorageEndpoint, normalize_path

PIECE = 1 << 20


class Capability(str, Enum):
    RANDOM_WRITE = "RANDOM_WRITE"
    BYTE_RANGE_READ = "BYTE_RANGE_READ"
    RESUMABLE_WRITE = "RESUMABLE_WRITE"
    LIST = "LIST"


ALL_CAPABILITIES = frozenset(c.value for c in Capability)


@dataclass(frozen=True)
class ObjectStat:
    exists: bool
    size_bytes: Optional[int] = None
    etag_or_digest: Optional[str] = None

    def __post_init__(self):
        if self.size_bytes is not None and not self.exists:
            raise ValueError("a missing object has no size")

    def to_dict(self) -> dict:
        return {"exists": self.exists, "size_bytes": self.size_bytes, "etag_or_digest": self.etag_or_digest}


_STAGE_ID = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


def sha256_file(path: str, limit: Optional[int] = None) -> tuple[str, int]:
    """Hex digest and byte count of a file (or its first ``limit`` bytes)."""
    h = hashlib.sha256()
    n = 0
    with open(path, "rb") as f:
        while limit is None or n < limit:
            want = PIECE if limit is None else min(PIECE, limit - n)
            data = f.read(want)
            if not data:
                break
            h.update(data)
            n += len(data)
    return h.hexdigest(), n


class StagingSink:
    """Append-only writer into a staging file. Nothing is visible at the
    final path until the owning connector commits."""

    def __init__(self, fileobj, offset: int):
        self._f = fileobj
        self.offset = offset
        self.closed = False

    def write(self, data: bytes) -> int:
        try:
            self._f.write(data)
        except OSError as exc:
            raise _os_error(exc) from exc
        self.offset += len(data)
        return len(data)

    def flush(self) -> None:
        """Make written bytes durable."""
        try:
            self._f.flush()
            os.fsync(self._f.fileno())
        except OSError as exc:
            raise _os_error(exc) from exc

    def close(self) -> None:
        if self.closed:
            return
        try:
            self.flush()
        finally:
            self._f.close()
            self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _os_error(exc: OSError) -> errors.MFTError:
    import errno

    if exc.errno in (errno.ENOSPC, errno.EDQUOT):
        return errors.StorageFull(str(exc))
    if exc.errno in (errno.EACCES, errno.EPERM):
        return errors.PermissionDenied(str(exc))
    return errors.Unreachable(str(exc))


class Connector(ABC):
    """Uniform read/write surface over one storage endpoint.

    Writes go to a staging area named after ``stage_id`` (normally the
    transfer id) and only become visible at the target path on
    :meth:`commit`. A connector instance belongs to one transfer attempt.
    """

    kind: str = ""
    default_capabilities: frozenset = frozenset()

    def __init__(self, endpoint: StorageEndpoint, credential: Optional[dict] = None, *, stage_id: str = "0", staging_dir: Optional[str] = None):
        if not endpoint.base_locator:
            raise errors.BadBaseLocator(f"endpoint {endpoint.endpoint_id} has no base locator")
        if not _STAGE_ID.match(stage_id):
            raise ValueError(f"bad stage id {stage_id!r}")
        self.endpoint = endpoint
        self.stage_id = stage_id
        self.staging_dir = staging_dir
        caps = frozenset(endpoint.capabilities) or self.default_capabilities
        # never advertise more than the implementation can honour
        self.capabilities = caps & self.default_capabilities
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.endpoint.endpoint_id!r})"

    def has(self, cap: Capability) -> bool:
        return cap.value in self.capabilities

    def require(self, cap: Capability) -> None:
        if not self.has(cap):
            raise errors.CapabilityMissing(f"{self.kind} endpoint {self.endpoint.endpoint_id} lacks {cap.value}")

    @staticmethod
    def _norm(path: str) -> str:
        return normalize_path(path)

    @abstractmethod
    def stat(self, path: str) -> ObjectStat: ...

    @abstractmethod
    def read_range(self, path: str, offset: int = 0, length: Optional[int] = None) -> Iterator[bytes]: ...

    def list(self, prefix: str = "/") -> list[str]:
        self.require(Capability.LIST)
        return self._list(prefix)

    def _list(self, prefix: str) -> list[str]:
        raise errors.CapabilityMissing("listing not supported")

    # -- staging --------------------------------------------------------
    @abstractmethod
    def staging_path(self, path: str) -> str:
        """Local file holding staged bytes for ``path``."""

    @abstractmethod
    def _publish(self, path: str, staged_file: str, digest: str, size: int) -> ObjectStat:
        """Make the staged bytes visible at ``path``."""

    def staged_size(self, path: str) -> int:
        try:
            return os.path.getsize(self.staging_path(self._norm(path)))
        except FileNotFoundError:
            return 0

    def has_staged(self, path: str) -> bool:
        return os.path.exists(self.staging_path(self._norm(path)))

    def write_at(self, path: str, offset: int = 0) -> StagingSink:
        path = self._norm(path)
        if offset < 0:
            raise errors.OffsetMismatch("negative offset")
        if offset > 0:
            self.require(Capability.RANDOM_WRITE)
        staged = self.staging_path(path)
        os.makedirs(os.path.dirname(staged), exist_ok=True)
        if offset == 0:
            f = open(staged, "wb")
        else:
            current = self.staged_size(path)
            if offset != current:
                raise errors.OffsetMismatch(f"offset {offset} != staged size {current}")
            f = open(staged, "r+b")
            f.seek(offset)
        return StagingSink(f, offset)

    def staged_digest(self, path: str, limit: Optional[int] = None):
        """``(sha256 hex, size)`` of the staged bytes, or None when nothing is staged."""
        staged = self.staging_path(self._norm(path))
        try:
            return sha256_file(staged, limit)
        except FileNotFoundError:
            return None

    def commit(self, path: str, expected_sha256: Optional[str] = None) -> ObjectStat:
        path = self._norm(path)
        staged = self.staging_path(path)
        if not os.path.exists(staged):
            raise errors.NoStagedData(f"nothing staged for {path}")
        digest, size = sha256_file(staged)
        if expected_sha256 is not None and digest != expected_sha256.lower():
            self._discard(staged)
            raise errors.DigestMismatch(f"staged digest {digest} != expected {expected_sha256}")
        result = self._publish(path, staged, digest, size)
        self._discard(staged)
        return result

    def abort(self, path: str) -> None:
        self._discard(self.staging_path(self._norm(path)))

    @staticmethod
    def _discard(staged: str) -> None:
        try:
            os.remove(staged)
        except FileNotFoundError:
            pass

    @staticmethod
    def _check_range(size: int, offset: int, length: Optional[int]) -> int:
        if offset < 0 or (length is not None and length < 0):
            raise errors.RangeBeyondEnd("negative range")
        if offset > size:
            raise errors.RangeBeyondEnd(f"offset {offset} beyond object size {size}")
        end = size if length is None else min(size, offset + length)
        return end
