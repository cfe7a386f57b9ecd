"""Connectors that reach storage over HTTP: the S3-like object store and
plain HTTP endpoints. Both stage writes in a local file and upload it on
commit."""

from __future__ import annotations

import hashlib
import hmac
import os
import tempfile
from typing import Iterator, Optional
from urllib.parse import quote, urlsplit

import requests

from .. import errors
from .base import PIECE, Capability, Connector, ObjectStat

TIMEOUT = (5, 60)


def access_header(access_key_id: str, secret_key: str, method: str, url_path: str) -> str:
    """Value of the ``X-MFT-Access`` request header."""
    mac = hmac.new(secret_key.encode(), f"{method}\n{url_path}".encode(), hashlib.sha256).hexdigest()
    return f"{access_key_id}:{mac}"


def _raise_for(resp: requests.Response, what: str) -> None:
    if resp.status_code < 400:
        return
    code = resp.status_code
    if code in (401, 403):
        raise errors.PermissionDenied(f"{what}: HTTP {code}")
    if code == 404:
        raise errors.NotFound(f"{what}: not found")
    if code == 416:
        raise errors.RangeBeyondEnd(f"{what}: range not satisfiable")
    if code == 507:
        raise errors.StorageFull(f"{what}: storage full")
    if code >= 500:
        raise errors.Unreachable(f"{what}: HTTP {code}")
    raise errors.ConnectorError(f"{what}: HTTP {code}")


def _empty() -> Iterator[bytes]:
    return
    yield


class _HttpBacked(Connector):
    def __init__(self, endpoint, credential=None, **kw):
        super().__init__(endpoint, credential, **kw)
        self.staging_dir = self.staging_dir or os.path.join(tempfile.gettempdir(), "mft-staging")
        self.session = requests.Session()

    def _url_path(self, path: str) -> str:
        raise NotImplementedError

    def _headers(self, method: str, url_path: str) -> dict:
        return {}

    def _request(self, method: str, path: str, what: str, **kw) -> requests.Response:
        url_path = self._url_path(path)
        headers = kw.pop("headers", {})
        headers.update(self._headers(method, url_path))
        try:
            return self.session.request(method, self.origin + url_path, headers=headers, timeout=TIMEOUT, **kw)
        except requests.RequestException as exc:
            raise errors.Unreachable(f"{what}: {type(exc).__name__}") from None

    def staging_path(self, path: str) -> str:
        tag = hashlib.sha256(f"{self.endpoint.endpoint_id}\0{self._norm(path)}".encode()).hexdigest()[:24]
        return os.path.join(self.staging_dir, f"{tag}.part-{self.stage_id}")

    def stat(self, path: str) -> ObjectStat:
        path = self._norm(path)
        resp = self._request("HEAD", path, f"stat {path}")
        if resp.status_code == 404:
            return ObjectStat(False)
        _raise_for(resp, f"stat {path}")
        etag = resp.headers.get("ETag")
        return ObjectStat(True, int(resp.headers.get("Content-Length", 0)), etag.strip('"') if etag else None)

    def read_range(self, path: str, offset: int = 0, length: Optional[int] = None) -> Iterator[bytes]:
        path = self._norm(path)
        if offset > 0:
            self.require(Capability.BYTE_RANGE_READ)
        st = self.stat(path)
        if not st.exists:
            raise errors.NotFound(f"{path} not found on {self.endpoint.endpoint_id}")
        end = self._check_range(st.size_bytes, offset, length)
        if end == offset:
            return _empty()
        headers = {}
        ranged = offset > 0 or end < st.size_bytes
        if ranged:
            headers["Range"] = f"bytes={offset}-{end - 1}"
        resp = self._request("GET", path, f"read {path}", headers=headers, stream=True)
        try:
            _raise_for(resp, f"read {path}")
        except Exception:
            resp.close()
            raise
        if ranged and resp.status_code != 206:
            resp.close()
            raise errors.ConnectorError(f"read {path}: server ignored Range")
        return self._iter(resp, end - offset, path)

    @staticmethod
    def _iter(resp, expected: int, path: str) -> Iterator[bytes]:
        got = 0
        try:
            for data in resp.iter_content(PIECE):
                got += len(data)
                yield data
        except requests.RequestException as exc:
            raise errors.Unreachable(f"read {path}: {type(exc).__name__}") from None
        finally:
            resp.close()
        if got != expected:
            raise errors.Unreachable(f"read {path}: short body ({got} of {expected} bytes)")

    def _put(self, path: str, staged_file: str, size: int) -> requests.Response:
        with open(staged_file, "rb") as body:
            resp = self._request("PUT", path, f"write {path}", data=body, headers={"Content-Length": str(size)})
        _raise_for(resp, f"write {path}")
        return resp


class ObjectStoreConnector(_HttpBacked):
    """Client for the S3-like REST dialect served by :mod:`mft.stores`.

    ``base_locator`` is ``<store url>/<bucket>``; the credential is an
    ACCESS_KEY_PAIR payload ``{access_key_id, secret_key}``.
    """

    kind = "OBJECT_STORE"
    # staging is local, so appends at the staged size are cheap
    default_capabilities = frozenset(c.value for c in Capability)

    def __init__(self, endpoint, credential=None, **kw):
        if not credential or not credential.get("access_key_id") or not credential.get("secret_key"):
            raise errors.MissingCredential(f"OBJECT_STORE endpoint {endpoint.endpoint_id} needs an ACCESS_KEY_PAIR")
        super().__init__(endpoint, credential, **kw)
        parts = urlsplit(endpoint.base_locator)
        bucket = parts.path.strip("/")
        if parts.scheme not in ("http", "https") or not parts.netloc or not bucket or "/" in bucket:
            raise errors.BadBaseLocator(f"expected http(s)://host[:port]/bucket, got {endpoint.base_locator!r}")
        self.origin = f"{parts.scheme}://{parts.netloc}"
        self.bucket = bucket
        self._akid = credential["access_key_id"]
        self._secret = credential["secret_key"]

    def __repr__(self) -> str:
        return f"ObjectStoreConnector({self.endpoint.endpoint_id!r}, bucket={self.bucket!r})"

    def _url_path(self, path: str) -> str:
        return "/" + quote(self.bucket) + "/" + quote(path.lstrip("/"))

    def _headers(self, method: str, url_path: str) -> dict:
        return {"X-MFT-Access": access_header(self._akid, self._secret, method, url_path)}

    def _publish(self, path, staged_file, digest, size) -> ObjectStat:
        resp = self._put(path, staged_file, size)
        etag = (resp.headers.get("ETag") or "").strip('"') or None
        if etag is not None and etag != digest:
            raise errors.DigestMismatch(f"store reported {etag}, staged {digest}")
        return ObjectStat(True, size, etag)

    def _list(self, prefix: str) -> list[str]:
        url_path = "/" + quote(self.bucket)
        try:
            resp = self.session.get(
                self.origin + url_path,
                params={"prefix": prefix.lstrip("/")},
                headers=self._headers("GET", url_path),
                timeout=TIMEOUT,
            )
        except requests.RequestException as exc:
            raise errors.Unreachable(f"list: {type(exc).__name__}") from None
        _raise_for(resp, "list")
        return ["/" + k for k in resp.json()["keys"]]


class HttpConnector(_HttpBacked):
    """Plain HTTP endpoint: ranged GET for reads, one whole-object PUT per
    commit. No resume on the write side, and the server reports no digest."""

    kind = "HTTP"
    default_capabilities = frozenset({Capability.BYTE_RANGE_READ.value})

    def __init__(self, endpoint, credential=None, **kw):
        super().__init__(endpoint, credential, **kw)
        parts = urlsplit(endpoint.base_locator)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise errors.BadBaseLocator(f"expected an http(s) URL, got {endpoint.base_locator!r}")
        self.origin = f"{parts.scheme}://{parts.netloc}"
        self.prefix = parts.path.rstrip("/")
        self._bearer = (credential or {}).get("token")

    def _url_path(self, path: str) -> str:
        return self.prefix + quote(path)

    def _headers(self, method: str, url_path: str) -> dict:
        return {"Authorization": f"Bearer {self._bearer}"} if self._bearer else {}

    def _publish(self, path, staged_file, digest, size) -> ObjectStat:
        self._put(path, staged_file, size)
        return ObjectStat(True, size, None)
