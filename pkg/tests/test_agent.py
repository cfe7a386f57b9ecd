import hashlib
import os
import time

import pytest
import requests

from mft import errors
from mft.agent import AgentConfig, _Dedupe
from mft.backends import CredentialRecord
from mft.harness import write_payload
from mft.model import StorageEndpoint

from conftest import ACCESS_KEY


def write(stack, eid, path, data):
    full = os.path.join(stack.resources.get_endpoint(eid).base_locator, path.lstrip("/"))
    os.makedirs(os.path.dirname(full), exist_ok=True)
    with open(full, "wb") as f:
        f.write(data)


def read(stack, eid, path):
    with open(os.path.join(stack.resources.get_endpoint(eid).base_locator, path.lstrip("/")), "rb") as f:
        return f.read()


@pytest.fixture
def stack(make_stack):
    s = make_stack()
    s.local_endpoint("src")
    s.local_endpoint("dst")
    return s


def test_config_requires_fields():
    with pytest.raises(errors.MalformedRequest):
        AgentConfig.from_dict({"agent_id": "a"}, environ={})
    with pytest.raises(errors.MalformedRequest):
        AgentConfig.from_dict({"agent_id": "a", "controller_url": "u", "cluster_token": "t", "cluster_hmac": "h",
                               "staging_dir": "/tmp", "bogus": 1}, environ={})


def test_config_env_overrides():
    cfg = AgentConfig.from_dict(
        {"agent_id": "a", "controller_url": "http://old", "cluster_token": "t", "cluster_hmac": "h", "staging_dir": "/tmp",
         "served_endpoints": [{"endpoint_id": "e", "kind": "HTTP", "base_locator": "http://x", "credential": {"token": "served-secret"}}]},
        environ={"MFT_CONTROLLER_URL": "http://new"},
    )
    assert cfg.controller_url == "http://new"
    assert cfg.served_endpoints[0].credential == {"token": "served-secret"}
    assert "served-secret" not in repr(cfg)


def test_dedupe_survives_restart(tmp_path):
    path = str(tmp_path / "c.jsonl")
    d = _Dedupe(path)
    d.record("c1", None)
    d.record("c1", {"kind": "COMPLETED"})
    d.record("c2", None)
    d._file.close()
    again = _Dedupe(path)
    assert again.check("c1") == (True, {"kind": "COMPLETED"})
    assert again.check("c2") == (True, None)
    assert again.check("c3") == (False, None)


@pytest.mark.parametrize("served", ["both", "src", "dst"])
def test_transfer_modes(stack, served):
    data = os.urandom(3 * (1 << 20) + 5)
    write(stack, "src", "/in.bin", data)
    if served in ("both", "src"):
        stack.add_agent("a-src", [stack.resources.get_endpoint("src")], chunk_bytes=1 << 20)
    if served in ("both", "dst"):
        stack.add_agent("a-dst", [stack.resources.get_endpoint("dst")], chunk_bytes=1 << 20)
    tid = stack.submit(("src", "/in.bin"), ("dst", "/out/o.bin"), requested_chunk_bytes=1 << 20)
    rec = stack.wait(tid)
    assert rec["state"] == "COMPLETED", rec
    want = {"both": "AGENT_TO_AGENT", "src": "AGENT_TO_STORAGE_PUSH", "dst": "AGENT_TO_STORAGE_PULL"}[served]
    assert rec["mode"] == want
    assert read(stack, "dst", "/out/o.bin") == data
    assert rec["digest_source"] == rec["digest_destination"] == hashlib.sha256(data).hexdigest()
    assert rec["bytes_transferred"] == rec["total_bytes"] == len(data)


def test_empty_file(stack):
    write(stack, "src", "/empty", b"")
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    stack.add_agent("a2", [stack.resources.get_endpoint("dst")])
    rec = stack.wait(stack.submit(("src", "/empty"), ("dst", "/empty")))
    assert rec["state"] == "COMPLETED"
    assert read(stack, "dst", "/empty") == b""


def test_missing_source_fails_without_retry(make_stack):
    stack = make_stack()
    stack.local_endpoint("src")
    stack.local_endpoint("dst")
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    rec = stack.wait(stack.submit(("src", "/nope"), ("dst", "/x")))
    assert rec["state"] == "FAILED" and rec["last_error"]["code"] == "SourceVanished"
    assert rec["attempt"] == 1


def test_object_store_via_grant(stack, objstore):
    """The agent does not hold the bucket credential; it redeems a grant."""
    stack.credentials.store_credential(CredentialRecord.from_request(
        {"credential_id": "k", "kind": "ACCESS_KEY_PAIR", "secret_payload": {"access_key_id": ACCESS_KEY[0], "secret_key": ACCESS_KEY[1]}}))
    stack.resources.register_endpoint(StorageEndpoint("bucket", "OBJECT_STORE", objstore.url + "/b", credential_ref="k"))
    data = os.urandom(500_000)
    write(stack, "src", "/x", data)
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    rec = stack.wait(stack.submit(("src", "/x"), ("bucket", "/dir/x")))
    assert rec["state"] == "COMPLETED", rec
    assert objstore.get_object("b", "dir/x") == data
    assert len(stack.credentials.audit) == 1 and stack.credentials.audit[0]["agent_id"] == "a1"


def test_connector_fault_is_retried(stack, objstore):
    stack.credentials.store_credential(CredentialRecord.from_request(
        {"credential_id": "k", "kind": "ACCESS_KEY_PAIR", "secret_payload": {"access_key_id": ACCESS_KEY[0], "secret_key": ACCESS_KEY[1]}}))
    stack.resources.register_endpoint(StorageEndpoint("bucket", "OBJECT_STORE", objstore.url + "/b", credential_ref="k"))
    write(stack, "src", "/x", b"payload")
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    objstore.faults.arm("write", 1)
    rec = stack.wait(stack.submit(("src", "/x"), ("bucket", "/x")))
    assert rec["state"] == "COMPLETED" and rec["attempt"] == 1
    assert [h["state"] for h in rec["history"]].count("RETRY_WAIT") == 1


def test_user_links(stack):
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    up = stack.call("POST", "/v1/uploads", json={"endpoint_id": "src", "path": "/u/file.txt", "ttl_s": 60}).json()
    data = b"portal bytes" * 1000
    r = requests.put(up["url"], data=data)
    assert r.status_code == 201 and r.json()["sha256"] == hashlib.sha256(data).hexdigest()
    assert read(stack, "src", "/u/file.txt") == data
    # no silent overwrite
    assert requests.put(up["url"], data=b"x").json()["code"] == "ObjectExists"
    assert requests.put(up["url"] + "&overwrite=true", data=b"x").status_code == 201
    down = stack.call("POST", "/v1/downloads", json={"endpoint_id": "src", "path": "/u/file.txt"}).json()
    assert requests.get(down["url"]).content == b"x"
    r = requests.get(down["url"], headers={"Range": "bytes=0-0"})
    assert r.status_code == 206 and r.content == b"x"
    # the upload token cannot download and vice versa
    assert requests.get(up["url"]).status_code == 401
    assert requests.put(down["url"], data=b"y").status_code == 401
    # scope is the exact path
    assert requests.get(down["url"] + "&path=/u/other").status_code == 401


def test_user_events_reach_audit(stack):
    stack.add_agent("a1", [stack.resources.get_endpoint("src")])
    up = stack.call("POST", "/v1/uploads", json={"endpoint_id": "src", "path": "/f"}).json()
    requests.put(up["url"], data=b"abc")
    deadline = time.time() + 5
    while time.time() < deadline:
        audit = stack.call("GET", "/v1/audit").json()["audit"]
        if any(a.get("kind") == "USER_UPLOAD" for a in audit):
            break
        time.sleep(0.05)
    assert any(a.get("kind") == "USER_UPLOAD" and a["path"] == "/f" for a in audit)


def test_cancel_running_transfer(stack):
    path = os.path.join(stack.resources.get_endpoint("src").base_locator, "big")
    write_payload(path, 1, 0, 100 << 20)
    stack.add_agent("a1", [stack.resources.get_endpoint("src")], chunk_bytes=1 << 20)
    stack.add_agent("a2", [stack.resources.get_endpoint("dst")])
    tid = stack.submit(("src", "/big"), ("dst", "/big"), requested_chunk_bytes=1 << 20)
    deadline = time.time() + 10
    while stack.call("GET", f"/v1/transfers/{tid}").json()["state"] not in ("RUNNING", "COMPLETED") and time.time() < deadline:
        time.sleep(0.01)
    rec = stack.call("POST", f"/v1/transfers/{tid}/cancel").json()
    if rec.get("code") == "AlreadyTerminal":
        pytest.skip("transfer finished before it could be canceled")
    assert rec["state"] == "CANCELED"
    dst_root = stack.resources.get_endpoint("dst").base_locator
    deadline = time.time() + 10
    while time.time() < deadline and os.listdir(dst_root):
        time.sleep(0.05)
    assert not os.path.exists(os.path.join(dst_root, "big"))
    assert os.listdir(dst_root) == []
