"""Scenario documents: parsing, validation and workload expansion."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .. import errors
from ..model import DEFAULT_CHUNK_BYTES, EndpointRef, normalize_path

FAULT_KINDS = ("KILL_AGENT", "SEVER_DATA_CHANNEL", "CONNECTOR_ERROR", "DELAY_CONTROLLER")
ENDPOINT_KINDS = ("LOCAL_POSIX", "OBJECT_STORE", "HTTP")
CHECKS = (
    "all_completed",
    "digest_match",
    "state",
    "mode",
    "control_bytes_bound",
    "retransmit_bound",
    "no_stray_staging",
    "no_secret_leak",
    "data_path_unaffected",
    "head_offset_le_staged",
    "legal_histories",
    "attempts_at_most",
    "max_duration",
    "faults_fired",
)

DEFAULT_SETTINGS = {
    "chunk_bytes": DEFAULT_CHUNK_BYTES,
    "liveness_window_s": 3.0,
    "heartbeat_interval_s": 1.0,
    "stall_timeout_s": 30.0,
    "scheduler_interval_s": 0.2,
    "timeout_s": 300.0,
    "retry": {"base_delay_ms": 200, "multiplier": 2, "max_delay_ms": 2000, "max_attempts": 3},
}


@dataclass
class Transfer:
    index: int
    source: EndpointRef
    destination: EndpointRef
    size_bytes: int
    verify_digest: bool = True
    chunk_bytes: Optional[int] = None


@dataclass
class Fault:
    kind: str
    target: object
    at_bytes: Optional[int] = None
    at_seconds: Optional[float] = None
    params: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    seed: int
    settings: dict
    endpoints: list
    agents: list
    workload: list
    faults: list
    assertions: list

    def endpoint(self, endpoint_id: str) -> dict:
        for e in self.endpoints:
            if e["endpoint_id"] == endpoint_id:
                return e
        raise errors.ScenarioInvalid(f"unknown endpoint {endpoint_id}")

    def agent_for(self, endpoint_id: str) -> Optional[dict]:
        for a in self.agents:
            if endpoint_id in a["serves"]:
                return a
        return None


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise errors.ScenarioInvalid(message)


def _size(value, where: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool) and value >= 0, f"{where}: size must be a non-negative integer")
    return value


def parse_scenario(doc: dict, seed: Optional[int] = None) -> Scenario:
    """Validate a scenario document and expand its workload."""
    _require(isinstance(doc, dict), "scenario must be a JSON object")
    seed = int(doc.get("seed", 0) if seed is None else seed) & (2**64 - 1)
    settings = json.loads(json.dumps(DEFAULT_SETTINGS))
    for k, v in (doc.get("settings") or {}).items():
        _require(k in DEFAULT_SETTINGS, f"unknown setting {k!r}")
        if k == "retry":
            settings["retry"].update(v)
        else:
            settings[k] = v
    chunk = settings["chunk_bytes"]

    endpoints = []
    for e in doc.get("endpoints") or []:
        _require(isinstance(e, dict) and e.get("endpoint_id"), "every endpoint needs an endpoint_id")
        _require(e.get("kind") in ENDPOINT_KINDS, f"endpoint {e.get('endpoint_id')}: kind must be one of {ENDPOINT_KINDS}")
        endpoints.append(dict(e))
    ids = [e["endpoint_id"] for e in endpoints]
    _require(len(ids) == len(set(ids)), "duplicate endpoint ids")

    agents = []
    for a in doc.get("agents") or []:
        _require(isinstance(a, dict) and a.get("agent_id"), "every agent needs an agent_id")
        serves = list(a.get("serves") or [])
        for eid in serves:
            _require(eid in ids, f"agent {a['agent_id']} serves unknown endpoint {eid}")
        agents.append({"agent_id": a["agent_id"], "serves": serves, "live": bool(a.get("live", True))})
    aids = [a["agent_id"] for a in agents]
    _require(len(aids) == len(set(aids)), "duplicate agent ids")

    workload: list[Transfer] = []

    def add(src: str, dst: str, size: int, verify=True, chunk_bytes=None) -> None:
        try:
            s, d = EndpointRef.parse(src), EndpointRef.parse(dst)
            for ref in (s, d):
                normalize_path(ref.path)
        except errors.ValidationError as exc:
            raise errors.ScenarioInvalid(f"workload item {src} -> {dst}: {exc.message}") from None
        for ref in (s, d):
            _require(ref.endpoint_id in ids, f"workload references unknown endpoint {ref.endpoint_id}")
        workload.append(Transfer(len(workload), s, d, size, verify, chunk_bytes))

    for i, w in enumerate(doc.get("workload") or []):
        _require(isinstance(w, dict), "workload items must be objects")
        sizes = w.get("sizes")
        if sizes is not None:
            # one transfer per size; names get an index suffix
            for j, size in enumerate(sizes):
                size = _resolve_size(size, chunk)
                add(f"{w['source']}-{j}", f"{w['destination']}-{j}", _size(size, f"workload[{i}]"), w.get("verify_digest", True), w.get("chunk_bytes"))
        else:
            add(w["source"], w["destination"], _size(_resolve_size(w.get("size_bytes"), chunk), f"workload[{i}]"), w.get("verify_digest", True), w.get("chunk_bytes"))
    rnd = doc.get("random_workload")
    if rnd:
        rng = random.Random(seed)
        for j in range(int(rnd["count"])):
            size = rng.randint(int(rnd.get("min_bytes", 0)), int(rnd["max_bytes"]))
            add(f"{rnd['source']}:/random-{j}.bin", f"{rnd['destination']}:/random-{j}.bin", size)
    _require(workload or doc.get("allow_empty"), "workload is empty")

    faults = []
    for f in doc.get("faults") or []:
        _require(f.get("kind") in FAULT_KINDS, f"fault kind must be one of {FAULT_KINDS}")
        trig = f.get("trigger") or {}
        params = dict(f.get("params") or {})
        fault = Fault(f["kind"], f.get("target"), trig.get("at_bytes"), trig.get("at_seconds"), params)
        if "at_fraction" in trig:
            idx = int(params.get("transfer", 0))
            _require(0 <= idx < len(workload), "at_fraction needs params.transfer to name a workload index")
            fault.at_bytes = int(workload[idx].size_bytes * float(trig["at_fraction"]))
        _require((fault.at_bytes is None) != (fault.at_seconds is None) or fault.kind == "CONNECTOR_ERROR", f"{fault.kind}: exactly one of at_bytes / at_seconds")
        if fault.kind == "SEVER_DATA_CHANNEL":
            _require(isinstance(fault.target, int) and 0 <= fault.target < len(workload), "SEVER_DATA_CHANNEL target must be a workload index")
            _require(fault.at_bytes is not None, "SEVER_DATA_CHANNEL needs at_bytes")
            _require(fault.at_bytes < max(1, workload[fault.target].size_bytes), "sever point lies beyond the payload")
        elif fault.kind == "KILL_AGENT":
            _require(fault.target in aids, f"KILL_AGENT target {fault.target!r} is not an agent")
        elif fault.kind == "CONNECTOR_ERROR":
            _require(fault.target in ids, f"CONNECTOR_ERROR target {fault.target!r} is not an endpoint")
            _require(next(e for e in endpoints if e["endpoint_id"] == fault.target)["kind"] != "LOCAL_POSIX", "CONNECTOR_ERROR needs an OBJECT_STORE or HTTP endpoint")
            _require(params.get("op", "any") in ("read", "stat", "write", "delete", "any"), "CONNECTOR_ERROR op must be read/stat/write/delete/any")
        elif fault.kind == "DELAY_CONTROLLER":
            _require(float(params.get("duration_s", 0)) > 0, "DELAY_CONTROLLER needs params.duration_s")
        if fault.at_bytes is not None and fault.kind != "SEVER_DATA_CHANNEL":
            idx = int(params.get("transfer", 0))
            _require(0 <= idx < len(workload), "byte triggers need params.transfer to be a workload index")
            _require(fault.at_bytes < max(1, workload[idx].size_bytes), "trigger point lies beyond the payload")
        faults.append(fault)

    assertions = []
    for a in doc.get("assertions") or []:
        if isinstance(a, str):
            a = {"check": a}
        _require(a.get("check") in CHECKS, f"unknown assertion {a.get('check')!r}")
        assertions.append({"check": a["check"], "params": dict(a.get("params") or {})})

    return Scenario(str(doc.get("name", "scenario")), seed, settings, endpoints, agents, workload, faults, assertions)


def _resolve_size(size, chunk: int):
    """Sizes may be written relative to the chunk size: "chunk", "chunk-1", "chunk+1"."""
    if isinstance(size, str):
        s = size.replace(" ", "")
        table = {"chunk": chunk, "chunk-1": chunk - 1, "chunk+1": chunk + 1}
        _require(s in table, f"unknown symbolic size {size!r}")
        return table[s]
    return size


def load_scenario(path: str, seed: Optional[int] = None) -> Scenario:
    try:
        with open(path) as f:
            doc = json.load(f)
    except ValueError as exc:
        raise errors.ScenarioInvalid(f"{path}: {exc}") from None
    return parse_scenario(doc, seed)
