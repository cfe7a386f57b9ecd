from __future__ import annotations

import os
from typing import Iterator, Optional

from .. import errors
from .base import PIECE, ALL_CAPABILITIES, Capability, Connector, ObjectStat, _os_error


class LocalConnector(Connector):
    """POSIX directory tree rooted at ``base_locator``.

    Staging is a ``<path>.part-<stage_id>`` sibling file; commit is a rename,
    so readers see either the old object or the complete new one.
    """

    kind = "LOCAL_POSIX"
    default_capabilities = ALL_CAPABILITIES

    def __init__(self, endpoint, credential=None, **kw):
        super().__init__(endpoint, credential, **kw)
        root = endpoint.base_locator
        if not os.path.isabs(root):
            raise errors.BadBaseLocator(f"LOCAL_POSIX base locator must be absolute: {root!r}")
        os.makedirs(root, exist_ok=True)
        self.root = os.path.realpath(root)

    def _resolve(self, path: str) -> str:
        rel = self._norm(path).lstrip("/")
        full = os.path.realpath(os.path.join(self.root, rel))
        if os.path.commonpath([full, self.root]) != self.root or full == self.root:
            raise errors.PermissionDenied(f"{path!r} resolves outside the endpoint root")
        return full

    def staging_path(self, path: str) -> str:
        return self._resolve(path) + ".part-" + self.stage_id

    def stat(self, path: str) -> ObjectStat:
        full = self._resolve(path)
        try:
            st = os.stat(full)
        except FileNotFoundError:
            return ObjectStat(False)
        except OSError as exc:
            raise _os_error(exc) from exc
        if not os.path.isfile(full):
            return ObjectStat(False)
        return ObjectStat(True, st.st_size)

    def read_range(self, path: str, offset: int = 0, length: Optional[int] = None) -> Iterator[bytes]:
        if offset > 0:
            self.require(Capability.BYTE_RANGE_READ)
        full = self._resolve(path)
        try:
            f = open(full, "rb")
        except (FileNotFoundError, IsADirectoryError):
            raise errors.NotFound(f"{path} not found on {self.endpoint.endpoint_id}") from None
        except OSError as exc:
            raise _os_error(exc) from exc
        try:
            size = os.fstat(f.fileno()).st_size
            end = self._check_range(size, offset, length)
        except Exception:
            f.close()
            raise
        return self._iter(f, offset, end)

    @staticmethod
    def _iter(f, offset: int, end: int) -> Iterator[bytes]:
        with f:
            f.seek(offset)
            pos = offset
            while pos < end:
                data = f.read(min(PIECE, end - pos))
                if not data:
                    break
                pos += len(data)
                yield data

    def _publish(self, path, staged_file, digest, size) -> ObjectStat:
        full = self._resolve(path)
        try:
            os.replace(staged_file, full)
            dir_fd = os.open(os.path.dirname(full), os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
        except OSError as exc:
            raise _os_error(exc) from exc
        return ObjectStat(True, size, digest)

    def _list(self, prefix: str) -> list[str]:
        out = []
        for dirpath, _, files in os.walk(self.root):
            for name in files:
                if ".part-" in name:
                    continue
                rel = "/" + os.path.relpath(os.path.join(dirpath, name), self.root).replace(os.sep, "/")
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)
