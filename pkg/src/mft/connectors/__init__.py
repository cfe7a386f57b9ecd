"""Storage connectors: one capability-tagged read/write surface per storage kind.

Shipped kinds are LOCAL_POSIX, OBJECT_STORE and HTTP. SCP, SFTP and FTP are
reserved names: registering an implementation under them is the extension
point, and until then :func:`make_connector` reports ``UnknownKind``.
"""

from __future__ import annotations

from typing import Optional

from .. import errors
from ..model import StorageEndpoint
from .base import ALL_CAPABILITIES, Capability, Connector, ObjectStat, StagingSink, sha256_file
from .local import LocalConnector
from .remote import HttpConnector, ObjectStoreConnector, access_header

REGISTRY: dict[str, type] = {
    "LOCAL_POSIX": LocalConnector,
    "OBJECT_STORE": ObjectStoreConnector,
    "HTTP": HttpConnector,
}

# named as protocol plugins; no implementation ships
RESERVED_KINDS = ("SCP", "SFTP", "FTP")

KNOWN_KINDS = tuple(REGISTRY) + RESERVED_KINDS


def default_capabilities(kind: str) -> frozenset:
    cls = REGISTRY.get(kind)
    if cls is None:
        raise errors.UnknownKind(f"no connector registered for kind {kind!r}")
    return cls.default_capabilities


def check_endpoint(endpoint: StorageEndpoint) -> StorageEndpoint:
    """Fill default capabilities and enforce the per-kind invariants."""
    if endpoint.kind not in KNOWN_KINDS:
        raise errors.UnknownKind(f"unknown storage kind {endpoint.kind!r}")
    if not endpoint.base_locator:
        raise errors.BadBaseLocator("base_locator is empty")
    unknown = set(endpoint.capabilities) - ALL_CAPABILITIES
    if unknown:
        raise errors.MalformedRequest(f"unknown capabilities {sorted(unknown)}")
    if not endpoint.capabilities and endpoint.kind in REGISTRY:
        endpoint.capabilities = default_capabilities(endpoint.kind)
    if endpoint.kind == "LOCAL_POSIX" and not ALL_CAPABILITIES <= set(endpoint.capabilities):
        raise errors.MalformedRequest("LOCAL_POSIX endpoints carry every capability")
    if endpoint.kind == "HTTP" and Capability.RANDOM_WRITE.value in endpoint.capabilities:
        raise errors.MalformedRequest("HTTP endpoints cannot advertise RANDOM_WRITE")
    return endpoint


def make_connector(
    endpoint: StorageEndpoint,
    credential: Optional[dict] = None,
    *,
    stage_id: str = "0",
    staging_dir: Optional[str] = None,
) -> Connector:
    """Build a connector for ``endpoint`` using an already-resolved credential payload."""
    cls = REGISTRY.get(endpoint.kind)
    if cls is None:
        raise errors.UnknownKind(f"no connector registered for kind {endpoint.kind!r}")
    return cls(endpoint, credential, stage_id=stage_id, staging_dir=staging_dir)


__all__ = [
    "ALL_CAPABILITIES",
    "Capability",
    "Connector",
    "HttpConnector",
    "LocalConnector",
    "ObjectStat",
    "ObjectStoreConnector",
    "StagingSink",
    "access_header",
    "check_endpoint",
    "default_capabilities",
    "make_connector",
    "sha256_file",
]
