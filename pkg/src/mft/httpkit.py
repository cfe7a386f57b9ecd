"""Minimal routing layer over ``http.server`` used by every MFT service.

Services register handlers on a :class:`Router`; handlers receive a
:class:`Request` and return a :class:`Response` (or a plain dict, sent as
JSON). An :class:`~mft.errors.MFTError` escaping a handler becomes a JSON
ApiError body with the error's status.
"""

from __future__ import annotations

import json
import logging
import re
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable, Optional, Union
from urllib.parse import parse_qs, unquote, urlsplit

from . import errors

log = logging.getLogger(__name__)

READ_PIECE = 1 << 20
MAX_JSON_BODY = 4 << 20


class Request:
    def __init__(self, handler: "_Handler", method: str, params: dict):
        self.handler = handler
        self.method = method
        split = urlsplit(handler.path)
        self.raw_path = split.path
        self.path = unquote(split.path)
        self.query = {k: v[-1] for k, v in parse_qs(split.query, keep_blank_values=True).items()}
        self.headers = handler.headers
        self.params = params
        length = self.headers.get("Content-Length")
        self.content_length: Optional[int] = int(length) if length and length.isdigit() else None
        self.remaining = self.content_length or 0
        self.client_address = handler.client_address

    def read(self, n: int = -1) -> bytes:
        if self.remaining <= 0:
            return b""
        n = self.remaining if n < 0 else min(n, self.remaining)
        data = self.handler.rfile.read(n)
        self.remaining -= len(data)
        if len(data) < n:
            # peer went away mid-body
            self.remaining = 0
            self.handler.close_connection = True
            raise ConnectionError("request body truncated")
        return data

    def iter_body(self, piece: int = READ_PIECE):
        """Yield the body in pieces; stops early if the peer disconnects."""
        while self.remaining > 0:
            want = min(piece, self.remaining)
            data = self.handler.rfile.read(want)
            if not data:
                self.remaining = 0
                self.handler.close_connection = True
                return
            self.remaining -= len(data)
            yield data
            if len(data) < want:
                # short read on a blocking socket means EOF
                self.remaining = 0
                self.handler.close_connection = True
                return

    def body(self) -> bytes:
        if self.content_length and self.content_length > MAX_JSON_BODY:
            raise errors.MalformedRequest("request body too large")
        return self.read()

    def json(self):
        raw = self.body()
        if not raw:
            raise errors.MalformedRequest("empty request body")
        try:
            return json.loads(raw)
        except ValueError:
            raise errors.MalformedRequest("request body is not valid JSON") from None

    def bearer(self) -> Optional[str]:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):].strip()
        return None


class Response:
    def __init__(
        self,
        status: int = 200,
        body: Union[bytes, Iterable[bytes], None] = b"",
        headers: Optional[dict] = None,
        content_length: Optional[int] = None,
    ):
        self.status = status
        self.body = body if body is not None else b""
        self.headers = dict(headers or {})
        self.content_length = content_length

    @classmethod
    def json(cls, payload, status: int = 200, headers: Optional[dict] = None) -> "Response":
        raw = json.dumps(payload, separators=(",", ":")).encode()
        h = {"Content-Type": "application/json"}
        h.update(headers or {})
        return cls(status, raw, h)


def error_response(err: errors.MFTError) -> Response:
    return Response.json(err.to_dict(), status=err.status)


Handler = Callable[[Request], Union[Response, dict, list, None]]


class Router:
    def __init__(self):
        self.routes: list[tuple[str, str, re.Pattern, Handler]] = []

    def add(self, method: str, pattern: str, func: Handler) -> None:
        body = re.sub(r"\{(\w+):path\}", r"(?P<\1>.+)", pattern.rstrip("/") or "/")
        body = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", body)
        regex = re.compile("^" + body + "/?$")
        self.routes.append((method.upper(), pattern, regex, func))

    def route(self, method: str, pattern: str):
        def deco(func):
            self.add(method, pattern, func)
            return func

        return deco

    def table(self) -> list[tuple[str, str]]:
        return [(m, p) for m, p, _, _ in self.routes]

    def match(self, method: str, path: str):
        path_matched = False
        for m, _, regex, func in self.routes:
            found = regex.match(path)
            if not found:
                continue
            path_matched = True
            if m == method or (method == "HEAD" and m == "GET" and not self._has(path, "HEAD")):
                return func, {k: unquote(v) for k, v in found.groupdict().items()}
        if path_matched:
            raise _MethodNotAllowed()
        raise _NoRoute()

    def _has(self, path: str, method: str) -> bool:
        return any(m == method and r.match(path) for m, _, r, _ in self.routes)


class _NoRoute(Exception):
    pass


class _MethodNotAllowed(Exception):
    pass


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server_version = "mft"
    sys_version = ""
    # set per service subclass
    router: Router = None
    # optional hook(request) -> Optional[Response], runs before routing
    prefilter = None

    def log_message(self, fmt, *args):  # query strings may carry tokens
        log.debug("%s %s", self.command, urlsplit(self.path).path)

    def _dispatch(self):
        method = self.command
        req = None
        try:
            path = urlsplit(self.path).path
            try:
                func, params = self.router.match(method, path)
            except _NoRoute:
                req = Request(self, method, {})
                resp = (self.prefilter and self.prefilter(req)) or error_response(
                    errors.NotFound(f"no route for {method} {path}")
                )
                self._send(resp, req)
                return
            except _MethodNotAllowed:
                req = Request(self, method, {})
                err = errors.MFTError(f"{method} not allowed on {path}")
                err.code, err.status = "MethodNotAllowed", 405
                resp = (self.prefilter and self.prefilter(req)) or error_response(err)
                self._send(resp, req)
                return
            req = Request(self, method, params)
            resp = self.prefilter(req) if self.prefilter else None
            if resp is None:
                resp = func(req)
        except errors.MFTError as err:
            resp = error_response(err)
        except (ConnectionError, socket.timeout, BrokenPipeError):
            self.close_connection = True
            return
        except Exception:
            log.exception("unhandled error in %s %s", method, urlsplit(self.path).path)
            resp = error_response(errors.MFTError("internal server error"))
        if resp is None:
            resp = Response(204)
        elif isinstance(resp, (dict, list)):
            resp = Response.json(resp)
        self._send(resp, req)

    def _send(self, resp: Response, req: Optional[Request]):
        # leftover body bytes would be parsed as the next request
        if req is not None and req.remaining > 0:
            if req.remaining <= MAX_JSON_BODY:
                try:
                    for _ in req.iter_body():
                        pass
                except OSError:
                    self.close_connection = True
                    return
            else:
                self.close_connection = True
        body = resp.body
        if isinstance(body, (bytes, bytearray)):
            length = len(body)
            chunks = [bytes(body)] if body else []
        else:
            length = resp.content_length
            chunks = body
        try:
            self.send_response(resp.status)
            for k, v in resp.headers.items():
                self.send_header(k, str(v))
            if resp.status not in (204, 304) and (self.command != "HEAD" or "Content-Length" not in resp.headers):
                if length is None:
                    self.close_connection = True
                else:
                    self.send_header("Content-Length", str(length))
            if self.close_connection:
                self.send_header("Connection", "close")
            self.end_headers()
            if self.command == "HEAD":
                if not isinstance(chunks, list) and hasattr(chunks, "close"):
                    chunks.close()
                return
            for chunk in chunks:
                if chunk:
                    self.wfile.write(chunk)
        except (ConnectionError, BrokenPipeError, socket.timeout):
            self.close_connection = True
        except errors.MFTError:
            # failure while streaming a body; the status line is already out
            log.warning("aborting response body for %s", urlsplit(self.path).path)
            self.close_connection = True

    do_GET = do_PUT = do_POST = do_PATCH = do_DELETE = do_HEAD = do_OPTIONS = _dispatch


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 64

    def handle_error(self, request, client_address):
        # peers vanishing mid-request (killed agents, severed relays) are routine
        log.debug("connection from %s ended abnormally", client_address, exc_info=True)


class HttpService:
    """A router served on its own thread."""

    def __init__(self, router: Router, host: str = "127.0.0.1", port: int = 0, prefilter=None):
        self.router = router
        handler = type("Handler", (_Handler,), {"router": router, "prefilter": staticmethod(prefilter) if prefilter else None})
        self.server = _Server((host, port), handler)
        self.thread: Optional[threading.Thread] = None
        self._serving = False

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "HttpService":
        self._serving = True
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.2}, daemon=True)
        self.thread.start()
        return self

    def serve_forever(self) -> None:
        self._serving = True
        self.server.serve_forever(poll_interval=0.2)

    def stop(self) -> None:
        # shutdown() would wait forever on a loop that never started
        if self._serving:
            self.server.shutdown()
        self.server.server_close()
