"""Scenario runner: boots a loopback topology, drives the workload, injects
faults and evaluates assertions.

The controller, API, object store and plain HTTP server run in this
process; agents are subprocesses so a kill is a real crash. Every agent's
data listener sits behind a :class:`~mft.harness.relay.DataRelay` and the
controller behind a recording :class:`~mft.harness.relay.TcpRelay`, which
gives exact byte counts for the control path.
"""

from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
import secrets
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from typing import Optional

import requests

from .. import errors
from ..api import ApiService
from ..backends import CredentialRecord, EncryptedFileBackend
from ..connectors.local import LocalConnector
from ..controller import Controller
from ..model import (
    KiB,
    RetryPolicy,
    StorageEndpoint,
    TransferRequest,
    TransferState,
    history_is_legal,
)
from ..stores import ObjectStoreServer, PlainHttpServer
from ..tokens import ClusterSecret, Verb, mint_token
from ..tus import TUS_VERSION
from .payload import iter_payload
from .relay import DataRelay, TcpRelay, Trigger
from .scenario import Scenario

log = logging.getLogger(__name__)

ACCESS_KEY_ID = "harness-key"
CONTROL_BOUND_BASE = 64 * KiB
CONTROL_BOUND_PER_S = 1 * KiB


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class AgentProcess:
    def __init__(self, agent_id: str, config_path: str, log_path: str, port: int):
        self.agent_id = agent_id
        self.config_path = config_path
        self.log_path = log_path
        self.port = port
        self.proc: Optional[subprocess.Popen] = None
        self.started_at = 0.0

    def start(self) -> None:
        logf = open(self.log_path, "ab")
        env = dict(os.environ)
        env.pop("MFT_CONTROLLER_URL", None)
        env.pop("MFT_CLUSTER_TOKEN", None)
        env.pop("MFT_CLUSTER_HMAC", None)
        self.started_at = time.time()
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "mft.agent", "--config", self.config_path],
            stdout=logf, stderr=subprocess.STDOUT, env=env, start_new_session=True,
        )
        logf.close()

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def kill(self) -> None:
        if self.alive:
            self.proc.kill()
            self.proc.wait(timeout=10)

    def stop(self) -> None:
        if self.alive:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.kill()


class Harness:
    def __init__(self, scenario: Scenario, workdir: Optional[str] = None, keep: bool = False):
        self.sc = scenario
        self.keep = keep or workdir is not None
        self.work = workdir or tempfile.mkdtemp(prefix="mft-harness-")
        os.makedirs(self.work, exist_ok=True)
        self.logs = os.path.join(self.work, "logs")
        os.makedirs(self.logs, exist_ok=True)
        self.sentinel = "mft-sentinel-" + secrets.token_hex(16)
        self.secret = ClusterSecret.generate()
        self.admin_token = secrets.token_hex(16)
        self.cluster_token = secrets.token_hex(16)
        self.objstore: Optional[ObjectStoreServer] = None
        self.plainhttp: Optional[PlainHttpServer] = None
        self.agents: dict[str, AgentProcess] = {}
        self.data_relays: dict[str, DataRelay] = {}
        self.agent_dirs: dict[str, str] = {}
        self.transfer_ids: list[Optional[str]] = []
        self.oracle: list[str] = []
        self.fault_log: list[dict] = []
        self.head_checks: list[dict] = []
        self.data_done_at: dict[int, float] = {}
        self.timers: list[threading.Timer] = []
        self.blackholes: list[tuple[float, float]] = []
        self._bg: list[threading.Thread] = []
        self._log_handler: Optional[logging.Handler] = None
        self.t0 = 0.0

    # -- topology -------------------------------------------------------
    def _endpoint_record(self, e: dict) -> StorageEndpoint:
        eid, kind = e["endpoint_id"], e["kind"]
        if kind == "LOCAL_POSIX":
            root = os.path.join(self.work, "storage", eid)
            os.makedirs(root, exist_ok=True)
            return StorageEndpoint(eid, kind, root)
        if kind == "OBJECT_STORE":
            return StorageEndpoint(eid, kind, f"{self.objstore.url}/{eid}", credential_ref="objstore")
        return StorageEndpoint(eid, kind, f"{self.plainhttp.url}/{eid}")

    def setup(self) -> None:
        mft_log = logging.getLogger("mft")
        self._saved_level = mft_log.level
        mft_log.setLevel(logging.INFO)
        self._log_handler = logging.FileHandler(os.path.join(self.logs, "controller.log"))
        self._log_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        mft_log.addHandler(self._log_handler)

        kinds = {e["kind"] for e in self.sc.endpoints}
        if "OBJECT_STORE" in kinds:
            self.objstore = ObjectStoreServer({ACCESS_KEY_ID: self.sentinel}).start()
        if "HTTP" in kinds:
            self.plainhttp = PlainHttpServer().start()

        self.backend = EncryptedFileBackend(os.path.join(self.work, "store.json"), os.urandom(32))
        self.backend.store_credential(CredentialRecord("objstore", "ACCESS_KEY_PAIR", {"access_key_id": ACCESS_KEY_ID, "secret_key": self.sentinel}))
        # planted only so the leak check has a second secret shape to look for
        self.backend.store_credential(CredentialRecord("planted", "BEARER_TOKEN", {"token": self.sentinel + "-bearer"}))
        self.endpoints = {}
        for e in self.sc.endpoints:
            rec = self._endpoint_record(e)
            self.backend.register_endpoint(rec)
            self.endpoints[rec.endpoint_id] = rec

        st = self.sc.settings
        self.controller = Controller(
            self.backend, self.backend, self.secret,
            state_dir=os.path.join(self.work, "controller"),
            retry=RetryPolicy(**st["retry"]),
            liveness_window_s=st["liveness_window_s"],
            heartbeat_interval_s=st["heartbeat_interval_s"],
            stall_timeout_s=st["stall_timeout_s"],
            scheduler_interval_s=st["scheduler_interval_s"],
        )
        self.api = ApiService(self.controller, self.admin_token, self.cluster_token).start()
        self.control_relay = TcpRelay(self.api.service.address, record=True).start()

        for a in self.sc.agents:
            aid = a["agent_id"]
            port = free_port()
            relay = DataRelay(("127.0.0.1", port)).start()
            self.data_relays[aid] = relay
            adir = os.path.join(self.work, "agents", aid)
            os.makedirs(adir, exist_ok=True)
            self.agent_dirs[aid] = adir
            served = []
            for eid in a["serves"]:
                ep = self.endpoints[eid].to_dict()
                if self.endpoints[eid].credential_ref:
                    ep["credential"] = {"access_key_id": ACCESS_KEY_ID, "secret_key": self.sentinel}
                served.append(ep)
            config = {
                "agent_id": aid,
                "controller_url": self.control_relay.url,
                "cluster_token": self.cluster_token,
                "cluster_hmac": self.secret.dump(),
                "served_endpoints": served,
                "listen_port": port,
                "advertise_url": relay.url,
                "staging_dir": os.path.join(adir, "staging"),
                "chunk_bytes": st["chunk_bytes"],
                "heartbeat_interval_s": st["heartbeat_interval_s"],
            }
            cfg_path = os.path.join(adir, "config.json")
            with open(cfg_path, "w") as f:
                json.dump(config, f)
            self.agents[aid] = AgentProcess(aid, cfg_path, os.path.join(self.logs, f"agent-{aid}.log"), port)
        for a in self.sc.agents:
            if a["live"]:
                self.agents[a["agent_id"]].start()
        for a in self.sc.agents:
            if a["live"]:
                self._await_registration(a["agent_id"], 0.0)

    def _await_registration(self, agent_id: str, after: float, timeout: float = 30.0) -> None:
        deadline = time.time() + timeout
        while time.time() < deadline:
            desc = self.controller.agents.get(agent_id)
            if desc is not None and desc.registered_at > after:
                return
            if not self.agents[agent_id].alive:
                raise errors.HarnessTimeout(f"agent {agent_id} exited during startup; see {self.agents[agent_id].log_path}")
            time.sleep(0.05)
        raise errors.HarnessTimeout(f"agent {agent_id} did not register within {timeout:.0f}s")

    # -- payloads -------------------------------------------------------
    def _put_source(self, t) -> str:
        seed, eid, path = self.sc.seed, t.source.endpoint_id, t.source.path
        ep = self.endpoints[eid]
        h = hashlib.sha256()
        if ep.kind == "LOCAL_POSIX":
            full = os.path.join(ep.base_locator, path.lstrip("/"))
            os.makedirs(os.path.dirname(full), exist_ok=True)
            with open(full, "wb") as f:
                for piece in iter_payload(seed, t.index, t.size_bytes):
                    f.write(piece)
                    h.update(piece)
        else:
            data = bytearray()
            for piece in iter_payload(seed, t.index, t.size_bytes):
                data += piece
                h.update(piece)
            if ep.kind == "OBJECT_STORE":
                self.objstore.put_object(eid, path, bytes(data))
            else:
                with self.plainhttp._lock:
                    self.plainhttp.objects[f"/{eid}{path}"] = bytes(data)
        return h.hexdigest()

    def _read_destination(self, t) -> Optional[bytes]:
        eid, path = t.destination.endpoint_id, t.destination.path
        ep = self.endpoints[eid]
        if ep.kind == "LOCAL_POSIX":
            full = os.path.join(ep.base_locator, path.lstrip("/"))
            if not os.path.isfile(full):
                return None
            with open(full, "rb") as f:
                return f.read()
        if ep.kind == "OBJECT_STORE":
            return self.objstore.get_object(eid, path)
        with self.plainhttp._lock:
            return self.plainhttp.objects.get(f"/{eid}{path}")

    def _destination_size(self, t) -> Optional[int]:
        eid, path = t.destination.endpoint_id, t.destination.path
        ep = self.endpoints[eid]
        if ep.kind == "LOCAL_POSIX":
            full = os.path.join(ep.base_locator, path.lstrip("/"))
            return os.path.getsize(full) if os.path.isfile(full) else None
        data = self._read_destination(t)
        return None if data is None else len(data)

    # -- faults ---------------------------------------------------------
    def _receiver_relay(self, t) -> Optional[DataRelay]:
        agent = self.sc.agent_for(t.destination.endpoint_id)
        return self.data_relays.get(agent["agent_id"]) if agent else None

    def _note(self, fault, **fields) -> None:
        entry = {"kind": fault.kind, "target": fault.target, "at_bytes": fault.at_bytes, "at_seconds": fault.at_seconds,
                 "elapsed_s": round(time.monotonic() - self.t0, 3), **fields}
        self.fault_log.append(entry)
        log.info("fault fired: %s", entry)

    def _fire(self, fault) -> None:
        kind, p = fault.kind, fault.params
        if kind == "KILL_AGENT":
            proc = self.agents[fault.target]
            proc.kill()
            self._note(fault, pid_killed=True)
            if p.get("restart_after_s") is not None:
                th = threading.Thread(target=self._restart, args=(fault.target, float(p["restart_after_s"]), time.time()), daemon=True)
                th.start()
                self._bg.append(th)
        elif kind == "DELAY_CONTROLLER":
            d = float(p["duration_s"])
            start = time.monotonic()
            self.timers.append(self.control_relay.blackhole(d))
            self.blackholes.append((start, start + d))
            self._note(fault, duration_s=d)
        elif kind == "CONNECTOR_ERROR":
            store = self.objstore if self.endpoints[fault.target].kind == "OBJECT_STORE" else self.plainhttp
            store.faults.arm(p.get("op", "any"), int(p.get("count", 1)))
            self._note(fault, op=p.get("op", "any"), count=int(p.get("count", 1)))
        elif kind == "SEVER_DATA_CHANNEL":
            self._note(fault)

    def _restart(self, agent_id: str, delay: float, killed_at: float) -> None:
        relay = self.data_relays[agent_id]
        relay.hold()
        try:
            time.sleep(delay)
            self.agents[agent_id].start()
            self._await_registration(agent_id, killed_at)
            self._check_heads(agent_id)
        except Exception as exc:
            log.error("restart of %s failed: %s", agent_id, exc)
            self.head_checks.append({"agent_id": agent_id, "error": str(exc), "ok": False})
        finally:
            relay.release()

    def _check_heads(self, agent_id: str) -> None:
        """With the data relay held, ask the restarted agent for every upload
        offset directly and compare it with what is durably staged."""
        port = self.agents[agent_id].port
        for path in sorted(glob.glob(os.path.join(self.agent_dirs[agent_id], "staging", "tus", "sessions", "*.json"))):
            with open(path) as f:
                s = json.load(f)
            token = mint_token(self.secret, s["transfer_id"], Verb.DATA_PATCH, s["endpoint_id"], s["path"], 60)
            resp = requests.head(
                f"http://127.0.0.1:{port}/tus/{s['upload_id']}",
                headers={"Tus-Resumable": TUS_VERSION, "Authorization": f"Bearer {token}"}, timeout=10,
            )
            ep = self.endpoints[s["endpoint_id"]]
            staged = 0
            if ep.kind == "LOCAL_POSIX":
                conn = LocalConnector(ep, stage_id=s["transfer_id"])
                sp = conn.staging_path(s["path"])
                staged = os.path.getsize(sp) if os.path.exists(sp) else 0
            if resp.status_code != 200:
                self.head_checks.append({"agent_id": agent_id, "upload_id": s["upload_id"], "status": resp.status_code, "ok": False})
                continue
            offset = int(resp.headers["Upload-Offset"])
            complete = s.get("complete", False)
            self.head_checks.append({
                "agent_id": agent_id, "transfer_id": s["transfer_id"], "upload_id": s["upload_id"],
                "head_offset": offset, "staged_bytes": staged, "complete": complete,
                "ok": complete or offset <= staged,
            })

    def _arm(self, fault) -> None:
        p = fault.params
        if fault.kind == "SEVER_DATA_CHANNEL":
            t = self.sc.workload[fault.target]
            relay = self._receiver_relay(t)
            if relay is None:
                raise errors.ScenarioInvalid("SEVER_DATA_CHANNEL needs an agent serving the destination")
            fault.trigger = relay.arm(Trigger(fault.at_bytes, lambda f=fault: self._fire(f), self.transfer_ids[t.index], sever=True, name="sever"))
            return
        if fault.at_bytes is not None:
            t = self.sc.workload[int(p.get("transfer", 0))]
            relay = self._receiver_relay(t)
            if relay is None:
                raise errors.ScenarioInvalid(f"{fault.kind}: byte trigger needs an agent serving the destination")
            sever = fault.kind == "KILL_AGENT"
            fault.trigger = relay.arm(Trigger(fault.at_bytes, lambda f=fault: self._fire(f), self.transfer_ids[t.index], sever=sever, name=fault.kind))
            return
        delay = float(fault.at_seconds or 0.0)
        timer = threading.Timer(delay, self._fire, args=(fault,))
        timer.daemon = True
        timer.start()
        self.timers.append(timer)

    # -- run ------------------------------------------------------------
    def run(self) -> dict:
        report = {"scenario": self.sc.name, "seed": self.sc.seed, "workdir": self.work}
        try:
            self.setup()
            for t in self.sc.workload:
                self.oracle.append(self._put_source(t))
            control_start = self.control_relay.total
            self.t0 = time.monotonic()
            for fault in self.sc.faults:
                fault.trigger = None
            for t in self.sc.workload:
                req = TransferRequest(t.source, t.destination, t.verify_digest, t.chunk_bytes)
                rec = self.controller.admit_transfer(req)
                self.transfer_ids.append(rec.transfer_id)
            for fault in self.sc.faults:
                self._arm(fault)
            timed_out = not self._wait_all(float(self.sc.settings["timeout_s"]))
            elapsed = time.monotonic() - self.t0
            control_bytes = self.control_relay.total - control_start
            for th in self._bg:
                th.join(timeout=30)
            # let queued cancels and staging cleanup land
            time.sleep(0.3)
            report.update(self._collect(elapsed, control_bytes))
            if timed_out:
                report["error"] = errors.HarnessTimeout(f"transfers not terminal after {self.sc.settings['timeout_s']}s").to_dict()
            report["assertions"] = self._evaluate(report)
            report["passed"] = not timed_out and all(a["passed"] for a in report["assertions"])
        except errors.MFTError as exc:
            report["error"] = exc.to_dict()
            report["passed"] = False
        finally:
            self.teardown()
        return report

    def _wait_all(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        watch_data = any(f.kind == "DELAY_CONTROLLER" for f in self.sc.faults)
        while time.monotonic() < deadline:
            if watch_data:
                for t in self.sc.workload:
                    if t.index not in self.data_done_at and self._destination_size(t) == t.size_bytes:
                        self.data_done_at[t.index] = time.monotonic()
            states = [self.controller.get(tid).state for tid in self.transfer_ids]
            if all(s.terminal for s in states):
                return True
            time.sleep(0.05)
        return False

    def _collect(self, elapsed: float, control_bytes: int) -> dict:
        transfers = []
        for t, tid, want in zip(self.sc.workload, self.transfer_ids, self.oracle):
            rec = self.controller.get(tid)
            data = self._read_destination(t)
            got = hashlib.sha256(data).hexdigest() if data is not None else None
            relay = self._receiver_relay(t)
            transfers.append({
                "index": t.index,
                "transfer_id": tid,
                "source": str(t.source),
                "destination": str(t.destination),
                "size_bytes": t.size_bytes,
                "payload_sha256": want,
                "destination_sha256": got,
                "state": rec.state.value,
                "mode": rec.mode.value if rec.mode else None,
                "attempt": rec.attempt,
                "history": [h.state.value for h in rec.history],
                "history_legal": history_is_legal(rec.history),
                "digest_source": rec.digest_source,
                "digest_destination": rec.digest_destination,
                "last_error": rec.last_error,
                "data_bytes_received": relay.payload_received.get(tid, 0) if relay else 0,
                "data_bytes_forwarded": relay.payload_forwarded.get(tid, 0) if relay else 0,
            })
        faults = []
        for f in self.sc.faults:
            trig = getattr(f, "trigger", None)
            entry = {"kind": f.kind, "target": f.target, "at_bytes": f.at_bytes, "at_seconds": f.at_seconds}
            if trig is not None:
                entry.update(fired=trig.fired, fired_offset=trig.fired_offset, received_at_fire=trig.received_at_fire)
            else:
                entry["fired"] = any(x["kind"] == f.kind and x["target"] == f.target for x in self.fault_log)
            faults.append(entry)
        return {
            "elapsed_s": round(elapsed, 3),
            "transfers": transfers,
            "byte_counters": {
                "control": {"during_transfers": control_bytes, "total": self.control_relay.total,
                            "up": self.control_relay.bytes_up, "down": self.control_relay.bytes_down},
                "data": {aid: {"up": r.bytes_up, "down": r.bytes_down, "payload_forwarded": sum(r.payload_forwarded.values())}
                         for aid, r in self.data_relays.items()},
            },
            "faults": faults,
            "fault_log": self.fault_log,
            "head_checks": self.head_checks,
            "data_done_at_s": {str(i): round(v - self.t0, 3) for i, v in self.data_done_at.items()},
            "blackholes_s": [[round(a - self.t0, 3), round(b - self.t0, 3)] for a, b in self.blackholes],
        }

    # -- assertions -----------------------------------------------------
    def _pick(self, report: dict, params: dict) -> list:
        if "transfer" in params:
            return [report["transfers"][int(params["transfer"])]]
        return report["transfers"]

    def _evaluate(self, report: dict) -> list[dict]:
        out = []
        for a in self.sc.assertions:
            check, params = a["check"], a["params"]
            try:
                passed, detail = getattr(self, f"_check_{check}")(report, params)
            except Exception as exc:
                passed, detail = False, f"check raised {type(exc).__name__}: {exc}"
            out.append({"check": check, "params": params, "passed": bool(passed), "detail": detail})
        return out

    def _check_all_completed(self, report, params):
        bad = [t["index"] for t in self._pick(report, params) if t["state"] != "COMPLETED"]
        return not bad, f"not completed: {bad}" if bad else "all completed"

    def _check_digest_match(self, report, params):
        bad = []
        for t in self._pick(report, params):
            if t["state"] != "COMPLETED":
                continue
            ok = t["destination_sha256"] == t["payload_sha256"]
            if t["digest_source"] is not None:
                ok = ok and t["digest_source"] == t["payload_sha256"]
            if not ok:
                bad.append(t["index"])
        done = sum(t["state"] == "COMPLETED" for t in self._pick(report, params))
        return not bad and done > 0, f"{done - len(bad)}/{done} completed transfers match the payload oracle"

    def _check_state(self, report, params):
        want, code = params.get("state"), params.get("error_code")
        bad = []
        for t in self._pick(report, params):
            if t["state"] != want or (code and (t["last_error"] or {}).get("code") != code):
                bad.append((t["index"], t["state"], (t["last_error"] or {}).get("code")))
        return not bad, f"mismatches: {bad}" if bad else f"all {want}"

    def _check_mode(self, report, params):
        bad = [(t["index"], t["mode"]) for t in self._pick(report, params) if t["mode"] != params.get("mode")]
        return not bad, f"mismatches: {bad}" if bad else f"all {params.get('mode')}"

    def _check_control_bytes_bound(self, report, params):
        used = report["byte_counters"]["control"]["during_transfers"]
        bound = CONTROL_BOUND_BASE + CONTROL_BOUND_PER_S * report["elapsed_s"]
        return used <= bound, f"{used} bytes on controller sockets, bound {bound:.0f}"

    def _check_retransmit_bound(self, report, params):
        chunk = self.sc.settings["chunk_bytes"]
        lines, ok = [], True
        for f, entry in zip(self.sc.faults, report["faults"]):
            if f.kind != "SEVER_DATA_CHANNEL":
                continue
            t = report["transfers"][f.target]
            trig = f.trigger
            if trig is None or not trig.fired:
                ok = False
                lines.append(f"transfer {f.target}: sever never fired")
                continue
            size = t["size_bytes"]
            before = trig.received_at_fire
            after = t["data_bytes_received"] - before
            remaining = size - f.at_bytes
            limit = remaining + (self.sc.workload[f.target].chunk_bytes or chunk)
            ok = ok and after <= limit
            lines.append(f"transfer {f.target}: {after} bytes after sever at {f.at_bytes}, limit {limit}")
        return ok and bool(lines), "; ".join(lines) or "no sever faults"

    def _check_no_stray_staging(self, report, params):
        done = {t["transfer_id"] for t in report["transfers"] if t["state"] in ("COMPLETED", "CANCELED")}
        stray = []
        for root, _, files in os.walk(self.work):
            for name in files:
                if ".part-" in name and name.rsplit(".part-", 1)[1] in done:
                    stray.append(os.path.relpath(os.path.join(root, name), self.work))
        return not stray, f"stray staging files: {stray}" if stray else "no stray staging"

    def _check_no_secret_leak(self, report, params):
        responses = self._admin_sweep()
        needles = [self.sentinel.encode()]
        hits = []
        if any(n in self.control_relay.transcript for n in needles):
            hits.append("controller socket traffic")
        for i, body in enumerate(responses):
            if any(n in body for n in needles):
                hits.append(f"api response {i}")
        for path in self._leak_files():
            with open(path, "rb") as f:
                blob = f.read()
            if any(n in blob for n in needles):
                hits.append(os.path.relpath(path, self.work))
        blob = json.dumps(report, default=str).encode()
        if any(n in blob for n in needles):
            hits.append("scenario report")
        scanned = len(responses)
        return not hits, f"sentinel found in {hits}" if hits else f"sentinel absent from {scanned} API responses, control traffic, logs, journal and report"

    def _leak_files(self) -> list[str]:
        files = glob.glob(os.path.join(self.logs, "*"))
        files += glob.glob(os.path.join(self.work, "controller", "*"))
        for adir in self.agent_dirs.values():
            files += glob.glob(os.path.join(adir, "staging", "*.jsonl"))
            files += glob.glob(os.path.join(adir, "staging", "tus", "sessions", "*.json"))
        files.append(os.path.join(self.work, "store.json"))
        return [f for f in files if os.path.isfile(f)]

    def _admin_sweep(self) -> list[bytes]:
        """GET every admin resource through the recording relay."""
        base = self.control_relay.url
        h = {"Authorization": f"Bearer {self.admin_token}"}
        paths = ["/v1/endpoints", "/v1/credentials", "/v1/agents", "/v1/audit", "/v1/transfers"]
        paths += [f"/v1/credentials/{c['credential_id']}" for c in self.backend.list_credentials()]
        paths += [f"/v1/endpoints/{eid}" for eid in self.endpoints]
        paths += [f"/v1/transfers/{tid}" for tid in self.transfer_ids]
        out = []
        with requests.Session() as s:
            for p in paths:
                out.append(s.get(base + p, headers=h, timeout=10).content)
            # error bodies too
            out.append(s.get(base + "/v1/credentials/nope", headers=h, timeout=10).content)
            out.append(s.post(base + "/v1/credentials", json={"kind": "BEARER_TOKEN", "secret_payload": {}}, headers=h, timeout=10).content)
        return out

    def _check_data_path_unaffected(self, report, params):
        if not self.blackholes:
            return False, "no controller blackhole was applied"
        start, end = self.blackholes[0]
        lines, ok = [], True
        for t in self._pick(report, params):
            done = self.data_done_at.get(t["index"])
            good = done is not None and done < end
            ok = ok and good
            lines.append(f"transfer {t['index']}: data complete at {None if done is None else round(done - self.t0, 2)}s, blackhole {round(start - self.t0, 2)}-{round(end - self.t0, 2)}s")
        return ok, "; ".join(lines)

    def _check_head_offset_le_staged(self, report, params):
        checks = report["head_checks"]
        bad = [c for c in checks if not c.get("ok")]
        need = int(params.get("min_checks", 1))
        return not bad and len(checks) >= need, f"{len(checks) - len(bad)}/{len(checks)} HEAD offsets within staged bytes"

    def _check_legal_histories(self, report, params):
        bad = [t["index"] for t in report["transfers"] if not t["history_legal"]]
        return not bad, f"illegal histories: {bad}" if bad else "all histories legal"

    def _check_attempts_at_most(self, report, params):
        limit = int(params.get("max", self.sc.settings["retry"]["max_attempts"]))
        bad = [(t["index"], t["attempt"]) for t in self._pick(report, params) if t["attempt"] > limit]
        return not bad, f"over limit: {bad}" if bad else f"attempt counters <= {limit}"

    def _check_max_duration(self, report, params):
        limit = float(params.get("seconds", 120))
        return report["elapsed_s"] <= limit, f"{report['elapsed_s']}s (limit {limit}s)"

    def _check_faults_fired(self, report, params):
        bad = [f["kind"] for f in report["faults"] if not f.get("fired")]
        return not bad, f"did not fire: {bad}" if bad else "all faults fired"

    # -- teardown -------------------------------------------------------
    def teardown(self) -> None:
        for t in self.timers:
            t.cancel()
        for proc in self.agents.values():
            try:
                proc.stop()
            except Exception:
                proc.kill()
        for relay in list(self.data_relays.values()):
            relay.stop()
        if hasattr(self, "control_relay"):
            self.control_relay.stop()
        if hasattr(self, "api"):
            self.api.stop()
        for store in (self.objstore, self.plainhttp):
            if store is not None:
                store.stop()
        if self._log_handler is not None:
            mft_log = logging.getLogger("mft")
            mft_log.removeHandler(self._log_handler)
            mft_log.setLevel(self._saved_level)
            self._log_handler.close()
        if not self.keep:
            shutil.rmtree(self.work, ignore_errors=True)


def run_scenario(scenario: Scenario, workdir: Optional[str] = None, keep: bool = False) -> dict:
    return Harness(scenario, workdir, keep).run()
