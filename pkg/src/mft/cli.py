"""``mft`` operator command line.

Every client verb talks to the documented HTTP API and nothing else. The
controller URL and admin token come from ``--url``/``--token`` or
``MFT_API_URL``/``MFT_ADMIN_TOKEN``.

Exit codes: 0 success or COMPLETED, 1 FAILED or an API error, 2 CANCELED,
3 usage.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import secrets
import signal
import sys
import threading
import time
from typing import Optional

import requests

from . import errors

DEFAULT_URL = "http://127.0.0.1:8080"
EXIT_OK, EXIT_FAILED, EXIT_CANCELED, EXIT_USAGE = 0, 1, 2, 3
WATCH_WAIT_S = 25


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Client:
    def __init__(self, url: str, token: str, timeout: float = 60.0):
        self.url = url.rstrip("/")
        self.session = requests.Session()
        self.session.headers["Authorization"] = f"Bearer {token}"
        self.timeout = timeout

    def call(self, method: str, path: str, body=None, params=None, timeout: Optional[float] = None):
        try:
            resp = self.session.request(method, self.url + path, json=body, params=params, timeout=timeout or self.timeout)
        except requests.RequestException as exc:
            raise errors.Unreachable(f"{self.url}: {type(exc).__name__}") from None
        if resp.status_code >= 400:
            try:
                raise errors.MFTError.from_dict(resp.json())
            except ValueError:
                raise errors.MFTError(f"HTTP {resp.status_code}") from None
        if resp.status_code == 204 or not resp.content:
            return None
        return resp.json()


def _emit(args, data, text: Optional[str] = None) -> None:
    if args.json or text is None:
        print(json.dumps(data, indent=None if args.json else 2, sort_keys=True))
    else:
        print(text)


def _client(args) -> Client:
    if not args.token:
        raise UsageError("admin token required: pass --token or set MFT_ADMIN_TOKEN")
    return Client(args.url, args.token)


def _exit_for(state: str) -> int:
    return {"COMPLETED": EXIT_OK, "CANCELED": EXIT_CANCELED}.get(state, EXIT_FAILED)


def _progress_line(rec: dict) -> str:
    done, total = rec.get("bytes_transferred", 0), rec.get("total_bytes")
    pct = f"{100.0 * done / total:5.1f}%" if total else "    -"
    line = f"{rec['transfer_id']}  {rec['state']:<11} {pct}  {done} / {total if total is not None else '?'} bytes"
    if rec.get("mode"):
        line += f"  {rec['mode']}"
    if rec.get("attempt"):
        line += f"  attempt {rec['attempt']}"
    err = rec.get("last_error")
    if err and rec["state"] in ("RETRY_WAIT", "FAILED"):
        line += f"  [{err.get('code')}: {err.get('message')}]"
    return line


def _watch(args, client: Client, tid: str) -> int:
    rec = client.call("GET", f"/v1/transfers/{tid}")
    last = None
    while True:
        line = _progress_line(rec)
        if line != last:
            if args.json:
                print(json.dumps(rec, sort_keys=True), flush=True)
            else:
                print(line, flush=True)
            last = line
        if rec["state"] in ("COMPLETED", "FAILED", "CANCELED"):
            return _exit_for(rec["state"])
        rec = client.call(
            "GET", f"/v1/transfers/{tid}",
            params={"wait_s": WATCH_WAIT_S, "version": rec["version"]}, timeout=WATCH_WAIT_S + 30,
        )


# -- verbs ----------------------------------------------------------------
def cmd_submit(args) -> int:
    client = _client(args)
    body = {
        "source": _ref(args.source),
        "destination": _ref(args.dest),
        "verify_digest": not args.no_verify,
        "requested_chunk_bytes": args.chunk_bytes,
    }
    out = client.call("POST", "/v1/transfers", body)
    if args.watch:
        if not args.json:
            print(f"submitted {out['transfer_id']}", flush=True)
        return _watch(args, client, out["transfer_id"])
    _emit(args, out, out["transfer_id"])
    return EXIT_FAILED if out["state"] == "FAILED" else EXIT_OK


def _ref(text: str) -> dict:
    eid, sep, path = text.partition(":")
    if not sep or not eid or not path:
        raise UsageError(f"expected ENDPOINT:/path, got {text!r}")
    return {"endpoint_id": eid, "path": path}


def cmd_status(args) -> int:
    rec = _client(args).call("GET", f"/v1/transfers/{args.transfer_id}")
    if args.json:
        _emit(args, rec)
        return EXIT_OK
    print(_progress_line(rec))
    req = rec["request"]
    print(f"  {req['source']['endpoint_id']}:{req['source']['path']} -> {req['destination']['endpoint_id']}:{req['destination']['path']}")
    for h in rec["history"]:
        print(f"  {time.strftime('%H:%M:%S', time.localtime(h['timestamp']))}  {h['state']:<11} {h.get('reason', '')}")
    if rec.get("digest_destination"):
        print(f"  sha256 {rec['digest_destination']}")
    return EXIT_OK


def cmd_watch(args) -> int:
    return _watch(args, _client(args), args.transfer_id)


def cmd_list(args) -> int:
    client = _client(args)
    params = {"limit": args.limit}
    if args.state:
        params["state"] = args.state
    rows = []
    while True:
        page = client.call("GET", "/v1/transfers", params=params)
        rows += page["transfers"]
        if not args.all or len(page["transfers"]) < args.limit or not page.get("next_after"):
            break
        params["after"] = page["next_after"]
    _emit(args, {"transfers": rows}, "\n".join(_progress_line(r) for r in rows) or "no transfers")
    return EXIT_OK


def cmd_cancel(args) -> int:
    rec = _client(args).call("POST", f"/v1/transfers/{args.transfer_id}/cancel")
    _emit(args, rec, _progress_line(rec))
    return EXIT_OK


def cmd_agents(args) -> int:
    out = _client(args).call("GET", "/v1/agents")
    lines = [
        f"{a['agent_id']:<20} {'live' if a['live'] else 'lost':<5} {','.join(a['served_endpoint_ids'])}  {a.get('data_channel_url', '')}"
        for a in out["agents"]
    ]
    _emit(args, out, "\n".join(lines) or "no agents")
    return EXIT_OK


def cmd_endpoint_add(args) -> int:
    body = {
        "endpoint_id": args.endpoint_id,
        "kind": args.kind,
        "base_locator": args.base_locator,
        "credential_ref": args.credential_ref,
        "capabilities": args.capability or [],
        "agent_affinity": args.agent or [],
    }
    out = _client(args).call("POST", "/v1/endpoints", body)
    _emit(args, out, f"registered {out['endpoint_id']}")
    return EXIT_OK


def cmd_endpoint_list(args) -> int:
    out = _client(args).call("GET", "/v1/endpoints")
    lines = [f"{e['endpoint_id']:<20} {e['kind']:<13} {e['base_locator']}" for e in out["endpoints"]]
    _emit(args, out, "\n".join(lines) or "no endpoints")
    return EXIT_OK


def cmd_endpoint_delete(args) -> int:
    _client(args).call("DELETE", f"/v1/endpoints/{args.endpoint_id}")
    _emit(args, {"deleted": args.endpoint_id}, f"deleted {args.endpoint_id}")
    return EXIT_OK


def cmd_credential_add(args) -> int:
    payload = {}
    if args.payload_file:
        with (sys.stdin if args.payload_file == "-" else open(args.payload_file)) as f:
            payload = json.load(f)
    for item in args.field or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--field expects NAME=VALUE, got {item!r}")
        payload[k] = v
    body = {"kind": args.kind, "secret_payload": payload}
    if args.credential_id:
        body["credential_id"] = args.credential_id
    out = _client(args).call("POST", "/v1/credentials", body)
    _emit(args, out, out["credential_id"])
    return EXIT_OK


def _link(args, route: str) -> int:
    body = {"endpoint_id": args.endpoint, "path": args.path, "ttl_s": args.ttl}
    out = _client(args).call("POST", route, body)
    _emit(args, out, out["url"])
    return EXIT_OK


def cmd_upload_url(args) -> int:
    return _link(args, "/v1/uploads")


def cmd_download_url(args) -> int:
    return _link(args, "/v1/downloads")


def cmd_keygen(args) -> int:
    from .tokens import ClusterSecret

    values = {
        "MFT_ADMIN_TOKEN": secrets.token_urlsafe(24),
        "MFT_CLUSTER_TOKEN": secrets.token_urlsafe(24),
        "MFT_CLUSTER_HMAC": ClusterSecret.generate().dump(),
        "MFT_MASTER_KEY": base64.b64encode(os.urandom(32)).decode(),
    }
    _emit(args, values, "\n".join(f"export {k}={v}" for k, v in values.items()))
    return EXIT_OK


def cmd_serve_controller(args) -> int:
    from .api import ApiService
    from .backends import EncryptedFileBackend, master_key_from_env
    from .controller import Controller
    from .model import RetryPolicy
    from .tokens import ClusterSecret

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    env = os.environ
    missing = [k for k in ("MFT_ADMIN_TOKEN", "MFT_CLUSTER_TOKEN", "MFT_CLUSTER_HMAC", "MFT_MASTER_KEY") if not env.get(k)]
    if missing:
        raise UsageError(f"missing environment: {', '.join(missing)} (see `mft keygen`)")
    try:
        secret = ClusterSecret.parse(env["MFT_CLUSTER_HMAC"])
    except ValueError as exc:
        raise UsageError(f"MFT_CLUSTER_HMAC: {exc}") from None
    os.makedirs(args.state_dir, exist_ok=True)
    backend = EncryptedFileBackend(os.path.join(args.state_dir, "store.json"), master_key_from_env())
    controller = Controller(
        backend, backend, secret,
        state_dir=args.state_dir,
        retry=RetryPolicy(max_attempts=args.max_attempts),
        liveness_window_s=args.liveness_window_s,
        heartbeat_interval_s=args.heartbeat_interval_s,
        stall_timeout_s=args.stall_timeout_s,
    )
    api = ApiService(controller, env["MFT_ADMIN_TOKEN"], env["MFT_CLUSTER_TOKEN"], args.host, args.port).start()
    logging.getLogger("mft").info("controller listening on %s (state in %s)", api.url, args.state_dir)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    api.stop()
    return EXIT_OK


def cmd_serve_agent(args) -> int:
    from .agent import main as agent_main

    return agent_main(["--config", args.config, "--log-level", args.log_level])


def cmd_run_scenario(args) -> int:
    from .harness import load_scenario, run_scenario

    try:
        scenario = load_scenario(args.file, args.seed)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if args.log_level:
        logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    report = run_scenario(scenario, workdir=args.workdir)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"scenario {report['scenario']} seed {report['seed']}: {'PASS' if report['passed'] else 'FAIL'} in {report.get('elapsed_s', 0)}s")
        if report.get("error"):
            print(f"  error {report['error']['code']}: {report['error']['message']}")
        for t in report.get("transfers", []):
            print(f"  [{t['index']}] {t['state']:<9} {t['mode'] or '-':<22} {t['size_bytes']} bytes  {t['source']} -> {t['destination']}")
        for a in report.get("assertions", []):
            print(f"  {'ok  ' if a['passed'] else 'FAIL'} {a['check']}: {a['detail']}")
    return EXIT_OK if report["passed"] else EXIT_FAILED


# -- parser ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--url", default=os.environ.get("MFT_API_URL", DEFAULT_URL), help="API base URL (env MFT_API_URL)")
    common.add_argument("--token", default=os.environ.get("MFT_ADMIN_TOKEN"), help="admin bearer token (env MFT_ADMIN_TOKEN)")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    p = _Parser(prog="mft", description="Managed file transfer: operator CLI.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("submit", parents=[common], help="submit a transfer")
    s.add_argument("--source", required=True, metavar="ENDPOINT:/PATH")
    s.add_argument("--dest", required=True, metavar="ENDPOINT:/PATH")
    s.add_argument("--chunk-bytes", type=int)
    s.add_argument("--no-verify", action="store_true", help="skip end-to-end digest verification")
    s.add_argument("--watch", action="store_true", help="follow progress until a terminal state")
    s.set_defaults(func=cmd_submit)

    for verb, func, text in (("status", cmd_status, "show one transfer"), ("watch", cmd_watch, "follow a transfer"), ("cancel", cmd_cancel, "cancel a transfer")):
        s = sub.add_parser(verb, parents=[common], help=text)
        s.add_argument("transfer_id")
        s.set_defaults(func=func)

    s = sub.add_parser("list", parents=[common], help="list transfers, newest first")
    s.add_argument("--state")
    s.add_argument("--limit", type=int, default=100)
    s.add_argument("--all", action="store_true", help="follow pagination to the end")
    s.set_defaults(func=cmd_list)

    s = sub.add_parser("agents", parents=[common], help="list registered agents")
    s.set_defaults(func=cmd_agents)

    ep = sub.add_parser("endpoint", help="manage storage endpoints")
    eps = ep.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    eps.required = True
    s = eps.add_parser("add", parents=[common], help="register an endpoint")
    s.add_argument("endpoint_id")
    s.add_argument("--kind", required=True, choices=["LOCAL_POSIX", "OBJECT_STORE", "HTTP"])
    s.add_argument("--base-locator", required=True)
    s.add_argument("--credential-ref")
    s.add_argument("--capability", action="append")
    s.add_argument("--agent", action="append", help="restrict to this agent (repeatable)")
    s.set_defaults(func=cmd_endpoint_add)
    s = eps.add_parser("list", parents=[common], help="list endpoints")
    s.set_defaults(func=cmd_endpoint_list)
    s = eps.add_parser("delete", parents=[common], help="remove an endpoint")
    s.add_argument("endpoint_id")
    s.set_defaults(func=cmd_endpoint_delete)

    cr = sub.add_parser("credential", help="manage credentials")
    crs = cr.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    crs.required = True
    s = crs.add_parser("add", parents=[common], help="store a credential; prints its id")
    s.add_argument("--id", dest="credential_id")
    s.add_argument("--kind", required=True, choices=["ACCESS_KEY_PAIR", "BEARER_TOKEN", "NONE"])
    s.add_argument("--payload-file", help="JSON object with the secret fields ('-' for stdin)")
    s.add_argument("--field", action="append", metavar="NAME=VALUE")
    s.set_defaults(func=cmd_credential_add)

    for verb, func, text in (("upload-url", cmd_upload_url, "mint a user upload link"), ("download-url", cmd_download_url, "mint a user download link")):
        s = sub.add_parser(verb, parents=[common], help=text)
        s.add_argument("--endpoint", required=True)
        s.add_argument("--path", required=True)
        s.add_argument("--ttl", type=int, default=3600)
        s.set_defaults(func=func)

    s = sub.add_parser("keygen", parents=[common], help="print fresh secrets for a deployment")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("serve-controller", parents=[common], help="run the API and controller")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--state-dir", default=os.environ.get("MFT_STATE_DIR", "./mft-state"))
    s.add_argument("--max-attempts", type=int, default=5)
    s.add_argument("--liveness-window-s", type=float, default=30.0)
    s.add_argument("--heartbeat-interval-s", type=float, default=10.0)
    s.add_argument("--stall-timeout-s", type=float, default=120.0)
    s.add_argument("--log-level", default=os.environ.get("MFT_LOG_LEVEL", "INFO"))
    s.set_defaults(func=cmd_serve_controller)

    s = sub.add_parser("serve-agent", parents=[common], help="run an agent")
    s.add_argument("--config", required=True)
    s.add_argument("--log-level", default=os.environ.get("MFT_LOG_LEVEL", "INFO"))
    s.set_defaults(func=cmd_serve_agent)

    s = sub.add_parser("run-scenario", parents=[common], help="run a harness scenario")
    s.add_argument("file")
    s.add_argument("--seed", type=int)
    s.add_argument("--report", help="write the JSON report here")
    s.add_argument("--workdir", help="keep the run's files in this directory")
    s.add_argument("--log-level")
    s.set_defaults(func=cmd_run_scenario)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mft: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except errors.MFTError as exc:
        if getattr(args, "json", False):
            print(json.dumps({"error": exc.to_dict()}, sort_keys=True))
        else:
            print(f"error {exc.code}: {exc.message}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
