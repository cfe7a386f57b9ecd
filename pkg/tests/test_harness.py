import glob
import hashlib
import json
import os
import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mft import errors
from mft.harness import iter_payload, load_scenario, parse_scenario, payload_bytes, payload_digest, run_scenario
from mft.harness.relay import DataRelay, TcpRelay, Trigger

from conftest import SCENARIO_DIR


def reference_payload(seed, stream, size):
    """Straight-line restatement of the block construction."""
    out = bytearray()
    i = 0
    while len(out) < size:
        out += hashlib.sha256(struct.pack(">QQQ", seed, stream, i)).digest()
        i += 1
    return bytes(out[:size])


@pytest.mark.parametrize("size", [0, 1, 31, 32, 33, 1000, (1 << 20) + 7])
def test_payload_matches_reference(size):
    assert payload_bytes(3, 1, size) == reference_payload(3, 1, size)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 5), st.integers(0, 70_000), st.data())
def test_payload_any_offset(seed, stream, size, data):
    offset = data.draw(st.integers(0, size))
    full = payload_bytes(seed, stream, size)
    assert b"".join(iter_payload(seed, stream, size, offset)) == full[offset:]


def test_payload_streams_and_seeds_differ():
    a, b, c = payload_bytes(1, 0, 4096), payload_bytes(1, 1, 4096), payload_bytes(2, 0, 4096)
    assert len({a, b, c}) == 3
    assert payload_digest(1, 0, 4096) == hashlib.sha256(a).hexdigest()


def test_payload_is_incompressible():
    import zlib

    data = payload_bytes(9, 0, 1 << 20)
    assert len(zlib.compress(data)) > 0.99 * len(data)


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(SCENARIO_DIR, "*.json"))))
def test_shipped_scenarios_parse(path, validate):
    with open(path) as f:
        validate(json.load(f), "scenario.json")
    sc = load_scenario(path)
    assert sc.workload and sc.assertions


def test_integrity_scenario_expansion():
    sc = load_scenario(os.path.join(SCENARIO_DIR, "integrity-a2a.json"))
    chunk = sc.settings["chunk_bytes"]
    sizes = [t.size_bytes for t in sc.workload]
    assert len(sizes) == 50
    assert sizes[:5] == [0, 1, chunk - 1, chunk, chunk + 1]
    # the random part depends on the seed, and only on the seed
    again = load_scenario(os.path.join(SCENARIO_DIR, "integrity-a2a.json"))
    other = load_scenario(os.path.join(SCENARIO_DIR, "integrity-a2a.json"), seed=99)
    assert sizes == [t.size_bytes for t in again.workload]
    assert sizes[8:] != [t.size_bytes for t in other.workload][8:]


BASE = {
    "endpoints": [{"endpoint_id": "a", "kind": "LOCAL_POSIX"}, {"endpoint_id": "b", "kind": "OBJECT_STORE"}],
    "agents": [{"agent_id": "x", "serves": ["a"]}],
    "workload": [{"source": "a:/f", "destination": "b:/f", "size_bytes": 100}],
}


@pytest.mark.parametrize("patch", [
    {"endpoints": [{"endpoint_id": "a", "kind": "NFS"}]},
    {"agents": [{"agent_id": "x", "serves": ["zzz"]}]},
    {"workload": []},
    {"workload": [{"source": "a:/f", "destination": "q:/f", "size_bytes": 1}]},
    {"workload": [{"source": "a:/../f", "destination": "b:/f", "size_bytes": 1}]},
    {"workload": [{"source": "a:/f", "destination": "b:/f", "size_bytes": -1}]},
    {"settings": {"bogus": 1}},
    {"faults": [{"kind": "METEOR", "target": 0}]},
    {"faults": [{"kind": "SEVER_DATA_CHANNEL", "target": 0, "trigger": {"at_bytes": 100}}]},
    {"faults": [{"kind": "SEVER_DATA_CHANNEL", "target": 5, "trigger": {"at_bytes": 1}}]},
    {"faults": [{"kind": "KILL_AGENT", "target": "nobody", "trigger": {"at_seconds": 1}}]},
    {"faults": [{"kind": "KILL_AGENT", "target": "x", "trigger": {"at_seconds": 1, "at_bytes": 2}}]},
    {"faults": [{"kind": "CONNECTOR_ERROR", "target": "a", "params": {"op": "write"}}]},
    {"faults": [{"kind": "CONNECTOR_ERROR", "target": "b", "params": {"op": "explode"}}]},
    {"faults": [{"kind": "DELAY_CONTROLLER", "target": None, "trigger": {"at_seconds": 1}}]},
    {"assertions": ["everything_fine"]},
])
def test_invalid_scenarios(patch):
    with pytest.raises(errors.ScenarioInvalid):
        parse_scenario({**BASE, **patch})


def test_fraction_trigger_resolves_to_bytes():
    sc = parse_scenario({**BASE, "faults": [{"kind": "SEVER_DATA_CHANNEL", "target": 0, "trigger": {"at_fraction": 0.25}, "params": {"transfer": 0}}]})
    assert sc.faults[0].at_bytes == 25


# -- relays -------------------------------------------------------------------
class Sink:
    """TCP server that swallows everything and records bytes per connection."""

    def __init__(self):
        self.sock = socket.create_server(("127.0.0.1", 0))
        self.received = []
        self.done = threading.Event()
        threading.Thread(target=self._run, daemon=True).start()

    def _run(self):
        conn, _ = self.sock.accept()
        buf = bytearray()
        while True:
            data = conn.recv(65536)
            if not data:
                break
            buf += data
        self.received.append(bytes(buf))
        conn.close()
        self.done.set()

    @property
    def address(self):
        return self.sock.getsockname()


def patch_request(tid, body):
    head = (f"PATCH /tus/x HTTP/1.1\r\nHost: h\r\nX-MFT-Transfer: {tid}\r\nContent-Length: {len(body)}\r\n\r\n").encode()
    return head, head + body


@pytest.mark.parametrize("at", [0, 1, 65535, 65536, 100_000, 299_999])
@pytest.mark.parametrize("sever", [True, False])
def test_trigger_fires_at_exact_offset(at, sever):
    sink = Sink()
    relay = DataRelay(sink.address).start()
    fired = []
    trig = relay.arm(Trigger(at, lambda: fired.append(1), transfer_id="t1", sever=sever, name="t"))
    body = os.urandom(300_000)
    head, raw = patch_request("t1", body)
    c = socket.create_connection(relay.address)
    try:
        # awkward write sizes so trigger points land mid-buffer
        for i in range(0, len(raw), 7777):
            c.sendall(raw[i:i + 7777])
    except OSError:
        pass
    c.close()
    assert sink.done.wait(5)
    # a severing trigger closes the connection before running its action
    deadline = time.monotonic() + 5
    while not fired and time.monotonic() < deadline:
        time.sleep(0.01)
    relay.stop()
    assert fired == [1] and trig.fired_offset == at
    got = sink.received[0]
    assert got.startswith(head)
    if sever:
        assert got == head + body[:at]
    else:
        assert got == raw


def test_trigger_matches_only_its_transfer():
    sink = Sink()
    relay = DataRelay(sink.address).start()
    trig = relay.arm(Trigger(10, lambda: None, transfer_id="other", sever=True))
    _, raw = patch_request("t1", b"x" * 100)
    with socket.create_connection(relay.address) as c:
        c.sendall(raw)
    assert sink.done.wait(5)
    relay.stop()
    assert not trig.fired and sink.received[0] == raw
    assert relay.payload_forwarded["t1"] == 100


def test_blackhole_holds_then_releases():
    sink = Sink()
    relay = TcpRelay(sink.address, record=True).start()
    relay.blackhole(0.4)
    t0 = time.monotonic()
    with socket.create_connection(relay.address) as c:
        c.sendall(b"hello")
        time.sleep(0.1)
        assert relay.bytes_up == 0
    assert sink.done.wait(5)
    relay.stop()
    assert time.monotonic() - t0 >= 0.35
    assert sink.received[0] == b"hello" and bytes(relay.transcript).count(b"hello") == 1


# -- one small end-to-end run ------------------------------------------------
def test_baseline_run(tmp_path):
    doc = {
        "name": "baseline",
        "seed": 5,
        "settings": {"timeout_s": 60},
        "endpoints": [{"endpoint_id": "a", "kind": "LOCAL_POSIX"}, {"endpoint_id": "b", "kind": "LOCAL_POSIX"},
                      {"endpoint_id": "web", "kind": "HTTP"}],
        "agents": [{"agent_id": "x", "serves": ["a"]}, {"agent_id": "y", "serves": ["b"]}],
        "workload": [
            {"source": "a:/one", "destination": "b:/one", "size_bytes": 300_000},
            {"source": "a:/two", "destination": "web:/two", "size_bytes": 5000},
        ],
        "assertions": ["all_completed", "digest_match", "legal_histories", "no_stray_staging", "no_secret_leak"],
    }
    report = run_scenario(parse_scenario(doc), workdir=str(tmp_path / "run"))
    assert report["passed"], json.dumps(report["assertions"], indent=1)
    modes = [t["mode"] for t in report["transfers"]]
    assert modes == ["AGENT_TO_AGENT", "AGENT_TO_STORAGE_PUSH"]
    assert report["byte_counters"]["control"]["total"] > 0
