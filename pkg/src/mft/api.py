"""HTTP front door: the admin API and the agent control channel, served
together with the controller in one process.

Admin routes require ``Authorization: Bearer <admin token>``; agent routes
require the cluster bearer token. Every non-2xx body is an ApiError
``{code, message, retryable}``.
"""

from __future__ import annotations

import hmac
import logging
import time
from typing import Optional

from . import errors
from .backends import CredentialRecord, seal_payload
from .controller import Controller
from .httpkit import HttpService, Request, Response, Router
from .model import StorageEndpoint, TransferRequest, normalize_path
from .tokens import MAX_TTL_S, MIN_TTL_S, Verb, mint_token

log = logging.getLogger(__name__)

DEFAULT_LINK_TTL_S = 3600


def _check_bearer(req: Request, expected: str) -> None:
    presented = req.bearer() or ""
    if not expected or not hmac.compare_digest(presented.encode(), expected.encode()):
        raise errors.Unauthorized("missing or invalid bearer token")


def _int_param(req: Request, name: str, default: int) -> int:
    raw = req.query.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise errors.MalformedRequest(f"{name} must be an integer") from None


def _float_param(req: Request, name: str, default: float) -> float:
    raw = req.query.get(name)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise errors.MalformedRequest(f"{name} must be a number") from None


class ApiService:
    def __init__(self, controller: Controller, admin_token: str, cluster_token: str, host: str = "127.0.0.1", port: int = 0):
        self.controller = controller
        self.admin_token = admin_token
        self.cluster_token = cluster_token
        self.router = Router()
        self._routes()
        self.service = HttpService(self.router, host, port)

    @property
    def url(self) -> str:
        return self.service.url

    def start(self) -> "ApiService":
        self.controller.start()
        self.service.start()
        return self

    def stop(self) -> None:
        self.service.stop()
        self.controller.stop()

    def _admin(self, func):
        def wrapped(req: Request):
            _check_bearer(req, self.admin_token)
            return func(req)

        return wrapped

    def _cluster(self, func):
        def wrapped(req: Request):
            _check_bearer(req, self.cluster_token)
            return func(req)

        return wrapped

    def _routes(self) -> None:
        r, a, c = self.router, self._admin, self._cluster
        r.add("POST", "/v1/transfers", a(self.submit))
        r.add("GET", "/v1/transfers", a(self.list_transfers))
        r.add("GET", "/v1/transfers/{transfer_id}", a(self.get_transfer))
        r.add("POST", "/v1/transfers/{transfer_id}/cancel", a(self.cancel))
        r.add("POST", "/v1/endpoints", a(self.add_endpoint))
        r.add("GET", "/v1/endpoints", a(self.list_endpoints))
        r.add("GET", "/v1/endpoints/{endpoint_id}", a(self.get_endpoint))
        r.add("DELETE", "/v1/endpoints/{endpoint_id}", a(self.delete_endpoint))
        r.add("POST", "/v1/credentials", a(self.add_credential))
        r.add("GET", "/v1/credentials", a(self.list_credentials))
        r.add("GET", "/v1/credentials/{credential_id}", a(self.get_credential))
        r.add("POST", "/v1/uploads", a(self.upload_link))
        r.add("POST", "/v1/downloads", a(self.download_link))
        r.add("GET", "/v1/agents", a(self.list_agents))
        r.add("GET", "/v1/audit", a(self.audit))
        r.add("POST", "/v1/agents/register", c(self.register))
        r.add("POST", "/v1/agents/{agent_id}/heartbeat", c(self.heartbeat))
        r.add("GET", "/v1/agents/{agent_id}/commands", c(self.commands))
        r.add("POST", "/v1/agents/{agent_id}/events", c(self.events))
        r.add("POST", "/v1/grants/{grant_id}/redeem", c(self.redeem))

    # -- transfers ------------------------------------------------------
    def submit(self, req: Request):
        request = TransferRequest.from_dict(req.json())
        rec = self.controller.admit_transfer(request)
        return Response.json({"transfer_id": rec.transfer_id, "state": rec.state.value}, 201)

    def list_transfers(self, req: Request):
        recs = self.controller.list_transfers(
            state=req.query.get("state") or None,
            limit=_int_param(req, "limit", 100),
            after=req.query.get("after") or None,
        )
        return {"transfers": [r.summary() for r in recs], "next_after": recs[-1].transfer_id if recs else None}

    def get_transfer(self, req: Request):
        tid = req.params["transfer_id"]
        wait_s = _float_param(req, "wait_s", 0.0)
        if wait_s > 0 and "version" in req.query:
            rec = self.controller.wait_for_change(tid, _int_param(req, "version", -1), wait_s)
        else:
            rec = self.controller.get(tid)
        return rec.to_dict()

    def cancel(self, req: Request):
        return self.controller.cancel_transfer(req.params["transfer_id"]).to_dict()

    # -- endpoints & credentials ----------------------------------------
    def add_endpoint(self, req: Request):
        endpoint = StorageEndpoint.from_dict(req.json())
        if endpoint.credential_ref:
            self.controller.credentials.get_credential(endpoint.credential_ref)
        self.controller.resources.register_endpoint(endpoint)
        return Response.json(self.controller.resources.get_endpoint(endpoint.endpoint_id).to_dict(), 201)

    def list_endpoints(self, req: Request):
        return {"endpoints": [e.to_dict() for e in self.controller.resources.list_endpoints()]}

    def get_endpoint(self, req: Request):
        return self.controller.resources.get_endpoint(req.params["endpoint_id"]).to_dict()

    def delete_endpoint(self, req: Request):
        eid = req.params["endpoint_id"]
        self.controller.resources.get_endpoint(eid)
        if self.controller.endpoint_in_use(eid):
            raise errors.InUse(f"endpoint {eid} is used by an unfinished transfer")
        self.controller.resources.delete_endpoint(eid)
        return Response(204)

    def add_credential(self, req: Request):
        record = CredentialRecord.from_request(req.json())
        return Response.json({"credential_id": self.controller.credentials.store_credential(record)}, 201)

    def list_credentials(self, req: Request):
        return {"credentials": self.controller.credentials.list_credentials()}

    def get_credential(self, req: Request):
        return self.controller.credentials.get_credential(req.params["credential_id"]).summary()

    # -- user links -----------------------------------------------------
    def _link(self, req: Request, verb: Verb):
        body = req.json()
        if not isinstance(body, dict):
            raise errors.MalformedRequest("body must be a JSON object")
        eid = body.get("endpoint_id")
        if not isinstance(eid, str) or not eid:
            raise errors.MalformedRequest("endpoint_id is required")
        path = normalize_path(body.get("path", ""))
        ttl = body.get("ttl_s", DEFAULT_LINK_TTL_S)
        if isinstance(ttl, bool) or not isinstance(ttl, int):
            raise errors.MalformedRequest("ttl_s must be an integer")
        if not MIN_TTL_S <= ttl <= MAX_TTL_S:
            raise errors.TtlOutOfRange(f"ttl_s must be within [{MIN_TTL_S}, {MAX_TTL_S}]")
        self.controller.resources.get_endpoint(eid)
        agents = [a for a in self.controller.agents_serving(eid) if a.user_http_url]
        if not agents:
            raise errors.NoLiveAgent(f"no live agent serves {eid}")
        now = time.time()
        subject = str(body.get("subject") or "portal")
        token = mint_token(self.controller.secret, subject, verb, eid, path, ttl, now=now)
        return Response.json({"url": f"{agents[0].user_http_url.rstrip('/')}/user/files?token={token}", "expires_at": int(now) + ttl}, 201)

    def upload_link(self, req: Request):
        return self._link(req, Verb.USER_UPLOAD)

    def download_link(self, req: Request):
        return self._link(req, Verb.USER_DOWNLOAD)

    def list_agents(self, req: Request):
        return {"agents": self.controller.list_agents()}

    def audit(self, req: Request):
        return {"audit": list(self.controller.audit)[-_int_param(req, "limit", 100):]}

    # -- agent channel --------------------------------------------------
    def register(self, req: Request):
        return self.controller.register_agent(req.json())

    def heartbeat(self, req: Request):
        body = req.json() if req.content_length else None
        return self.controller.heartbeat(req.params["agent_id"], body)

    def commands(self, req: Request):
        return Response.json(self.controller.poll_commands(req.params["agent_id"], _float_param(req, "wait_s", 0.0)))

    def events(self, req: Request):
        batch = req.json()
        if isinstance(batch, dict):
            batch = [batch]
        if not isinstance(batch, list):
            raise errors.MalformedRequest("events must be a JSON array")
        agent_id = req.params["agent_id"]
        accepted = 0
        for event in batch:
            if not isinstance(event, dict):
                raise errors.MalformedRequest("each event must be an object")
            try:
                self.controller.on_agent_event(agent_id, event)
                accepted += 1
            except errors.UnknownTransfer:
                log.warning("event for unknown transfer %s from %s", event.get("transfer_id"), agent_id)
        return {"accepted": accepted}

    def redeem(self, req: Request):
        body = req.json()
        grant_id = req.params["grant_id"]
        token = body.get("token") if isinstance(body, dict) else None
        agent_id = body.get("agent_id", "") if isinstance(body, dict) else ""
        if not isinstance(token, str):
            raise errors.MalformedRequest("token is required")
        creds = self.controller.credentials
        payload = creds.redeem_grant(self.controller.secret, grant_id, token, str(agent_id))
        return {"grant_id": grant_id, "sealed": seal_payload(self.controller.secret, grant_id, payload)}


def route_table(service: Optional[ApiService] = None) -> list[tuple[str, str]]:
    if service is None:
        service = ApiService.__new__(ApiService)
        service.router = Router()
        service.admin_token = service.cluster_token = ""
        service._routes()
    return service.router.table()
