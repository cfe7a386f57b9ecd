import hashlib
import os
import threading

import pytest
import requests

from mft import errors
from mft.connectors import LocalConnector
from mft.httpkit import HttpService, Router
from mft.model import StorageEndpoint
from mft.tokens import Verb, mint_token
from mft.tus import (
    DIGEST_HEADER,
    OFFSET_CT,
    TUS_VERSION,
    TusClient,
    TusServer,
    decode_metadata,
    encode_metadata,
    push_file,
)

TID = "t" * 32


class Receiver:
    def __init__(self, root, secret):
        self.root = str(root)
        self.secret = secret
        self.endpoint = StorageEndpoint("dst", "LOCAL_POSIX", os.path.join(self.root, "storage"))
        self.completed = []
        self.start()

    def connector_for(self, endpoint_id, stage_id):
        if endpoint_id != "dst":
            raise errors.UnknownEndpoint(endpoint_id)
        return LocalConnector(self.endpoint, stage_id=stage_id)

    def start(self):
        self.tus = TusServer(self.secret, self.connector_for, os.path.join(self.root, "state"), on_complete=self.completed.append)
        router = Router()
        self.tus.register(router)
        self.service = HttpService(router, prefilter=TusServer.prefilter).start()
        self.url = self.service.url

    def restart(self):
        self.service.stop()
        self.start()

    def stop(self):
        self.service.stop()

    def token(self, verb, path="/out.bin", subject=TID):
        return mint_token(self.secret, subject, verb, "dst", path, 600)

    def headers(self, verb=Verb.DATA_PATCH, **extra):
        return {"Tus-Resumable": TUS_VERSION, "Authorization": f"Bearer {self.token(verb)}", **extra}

    def create(self, length, sha=None, path="/out.bin"):
        meta = {"transfer-id": TID, "endpoint": "dst", "path": path}
        if sha:
            meta["sha256"] = sha
        resp = requests.post(
            self.url + "/tus/",
            headers={"Tus-Resumable": TUS_VERSION, "Authorization": f"Bearer {self.token(Verb.DATA_CREATE, path)}",
                     "Upload-Length": str(length), "Upload-Metadata": encode_metadata(meta)},
        )
        assert resp.status_code == 201, resp.text
        return self.url + resp.headers["Location"]

    def patch(self, url, offset, data):
        return requests.patch(url, data=data, headers=self.headers(**{"Upload-Offset": str(offset), "Content-Type": OFFSET_CT}))

    def head(self, url):
        return requests.head(url, headers=self.headers())

    def final(self, path="/out.bin"):
        with open(os.path.join(self.endpoint.base_locator, path.lstrip("/")), "rb") as f:
            return f.read()


@pytest.fixture
def rx(tmp_path, secret):
    r = Receiver(tmp_path, secret)
    yield r
    r.stop()


def sha(data):
    return hashlib.sha256(data).hexdigest()


def test_metadata_round_trip():
    pairs = {"path": "/a b/ü", "transfer-id": "x", "empty": ""}
    assert decode_metadata(encode_metadata(pairs)) == pairs


def test_metadata_rejects_bad_base64():
    with pytest.raises(errors.MalformedRequest):
        decode_metadata("path !!!")


def test_happy_upload(rx):
    data = os.urandom(300_000)
    url = rx.create(len(data), sha(data))
    assert rx.head(url).headers["Upload-Offset"] == "0"
    r = rx.patch(url, 0, data[:100_000])
    assert r.status_code == 204 and r.headers["Upload-Offset"] == "100000"
    r = rx.patch(url, 100_000, data[100_000:])
    assert r.status_code == 204
    assert r.headers[DIGEST_HEADER] == sha(data)
    assert rx.final() == data
    assert len(rx.completed) == 1


def test_missing_version_header(rx):
    resp = requests.head(rx.url + "/tus/x", headers={"Authorization": "Bearer x"})
    assert resp.status_code == 412 and resp.headers["Tus-Version"] == TUS_VERSION


def test_offset_conflict(rx):
    url = rx.create(10)
    rx.patch(url, 0, b"12345")
    r = rx.patch(url, 3, b"xx")
    assert r.status_code == 409 and r.headers["Upload-Offset"] == "5"
    r = rx.patch(url, 7, b"xx")
    assert r.status_code == 409
    assert rx.head(url).headers["Upload-Offset"] == "5"


def test_exceeding_length_refused(rx):
    url = rx.create(4)
    assert rx.patch(url, 0, b"12345").status_code == 400
    assert rx.head(url).headers["Upload-Offset"] == "0"


def test_wrong_content_type(rx):
    url = rx.create(4)
    r = requests.patch(url, data=b"1234", headers=rx.headers(**{"Upload-Offset": "0", "Content-Type": "text/plain"}))
    assert r.status_code == 400


def test_digest_mismatch_resets(rx):
    data = b"a" * 1000
    url = rx.create(len(data), sha(b"b" * 1000))
    r = rx.patch(url, 0, data)
    assert r.status_code == 412 and r.headers["Upload-Offset"] == "0"
    assert not os.path.exists(os.path.join(rx.endpoint.base_locator, "out.bin"))
    # the session stays usable from zero
    assert rx.patch(url, 0, data[:10]).status_code == 204


def test_zero_length_upload(rx):
    url = rx.create(0, sha(b""))
    r = rx.head(url)
    assert r.headers["Upload-Offset"] == "0" and r.headers[DIGEST_HEADER] == sha(b"")
    assert rx.final() == b""


def test_create_is_idempotent_per_transfer(rx):
    a = rx.create(10)
    rx.patch(a, 0, b"12345")
    b = rx.create(10)
    assert a == b
    assert rx.head(b).headers["Upload-Offset"] == "5"
    # a different declared length starts over
    c = rx.create(11)
    assert c != a and rx.head(c).headers["Upload-Offset"] == "0"


@pytest.mark.parametrize("verb,subject,path", [
    (Verb.DATA_CREATE, TID, "/out.bin"),
    (Verb.DATA_PATCH, "other", "/out.bin"),
    (Verb.DATA_PATCH, TID, "/other.bin"),
])
def test_patch_token_scope(rx, verb, subject, path):
    url = rx.create(4)
    tok = rx.token(verb, path, subject)
    r = requests.patch(url, data=b"1234", headers={
        "Tus-Resumable": TUS_VERSION, "Authorization": f"Bearer {tok}", "Upload-Offset": "0", "Content-Type": OFFSET_CT})
    assert r.status_code == 401
    assert rx.head(url).headers["Upload-Offset"] == "0"


def test_create_needs_create_verb(rx):
    meta = encode_metadata({"transfer-id": TID, "endpoint": "dst", "path": "/out.bin"})
    r = requests.post(rx.url + "/tus/", headers={**rx.headers(Verb.DATA_PATCH), "Upload-Length": "1", "Upload-Metadata": meta})
    assert r.status_code == 401


def test_unknown_upload(rx):
    assert rx.head(rx.url + "/tus/" + "0" * 32).status_code == 404


def test_truncated_patch_keeps_received_prefix(rx):
    """A PATCH whose connection dies mid-body commits what arrived."""
    import socket
    from urllib.parse import urlsplit

    url = rx.create(1 << 20)
    parts = urlsplit(url)
    head = (
        f"PATCH {parts.path} HTTP/1.1\r\nHost: {parts.netloc}\r\nTus-Resumable: {TUS_VERSION}\r\n"
        f"Authorization: Bearer {rx.token(Verb.DATA_PATCH)}\r\nUpload-Offset: 0\r\n"
        f"Content-Type: {OFFSET_CT}\r\nContent-Length: {1 << 20}\r\n\r\n"
    ).encode()
    s = socket.create_connection((parts.hostname, parts.port))
    s.sendall(head + b"z" * 250_000)
    s.close()
    import time

    deadline = time.time() + 5
    while time.time() < deadline:
        off = int(rx.head(url).headers["Upload-Offset"])
        if off == 250_000:
            break
        time.sleep(0.05)
    assert off == 250_000
    conn = rx.connector_for("dst", TID)
    assert conn.staged_size("/out.bin") == 250_000


def test_restart_recovers_offset_from_staging(rx):
    data = os.urandom(200_000)
    url = rx.create(len(data), sha(data))
    rx.patch(url, 0, data[:120_000])
    rx.restart()
    url = rx.url + "/tus/" + url.rsplit("/", 1)[1]
    assert rx.head(url).headers["Upload-Offset"] == "120000"
    assert rx.patch(url, 120_000, data[120_000:]).status_code == 204
    assert rx.final() == data


def test_restart_trusts_staging_over_journal(rx):
    url = rx.create(100)
    rx.patch(url, 0, b"x" * 60)
    upload_id = url.rsplit("/", 1)[1]
    # lose the tail of the staged file behind the server's back
    staged = rx.connector_for("dst", TID).staging_path("/out.bin")
    rx.service.stop()
    with open(staged, "r+b") as f:
        f.truncate(40)
    rx.start()
    assert rx.head(rx.url + "/tus/" + upload_id).headers["Upload-Offset"] == "40"


def test_racing_patches_single_winner(rx):
    url = rx.create(1 << 20)
    payloads = [bytes([i]) * 4096 for i in range(20)]
    results = [None] * len(payloads)
    barrier = threading.Barrier(len(payloads))

    def go(i):
        barrier.wait()
        results[i] = rx.patch(url, 0, payloads[i]).status_code

    threads = [threading.Thread(target=go, args=(i,)) for i in range(len(payloads))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(results).count(204) == 1
    assert results.count(409) == len(payloads) - 1
    winner = results.index(204)
    staged = rx.connector_for("dst", TID).staging_path("/out.bin")
    with open(staged, "rb") as f:
        assert f.read() == payloads[winner]


def test_gc_forgets_idle_sessions(rx):
    url = rx.create(10)
    rx.patch(url, 0, b"123")
    assert rx.tus.gc(now=10**12) == 1
    assert rx.head(url).status_code == 404
    assert rx.connector_for("dst", TID).staged_size("/out.bin") == 0


def test_drop_transfer(rx):
    url = rx.create(10)
    rx.patch(url, 0, b"123")
    assert rx.tus.drop_transfer(TID, abort_staging=True) == 1
    assert rx.head(url).status_code == 404


def test_push_file_end_to_end(rx, tmp_path):
    data = os.urandom(700_000)
    src_ep = StorageEndpoint("src", "LOCAL_POSIX", str(tmp_path / "src"))
    src = LocalConnector(src_ep, stage_id="s")
    with src.write_at("/in.bin", 0) as s:
        s.write(data)
    src.commit("/in.bin")
    url = rx.create(len(data), sha(data))
    seen = []
    result = push_file(src, "/in.bin", url, rx.token(Verb.DATA_PATCH), chunk_bytes=65536,
                       progress=seen.append, progress_interval_s=0)
    assert result.digest == sha(data) == result.committed_digest
    assert result.bytes_sent == len(data)
    assert seen and seen[-1] == len(data)
    assert rx.final() == data
    # pushing again sends nothing
    again = push_file(src, "/in.bin", url, rx.token(Verb.DATA_PATCH))
    assert again.bytes_sent == 0 and again.digest == sha(data)


def test_push_file_resumes_from_server_offset(rx, tmp_path):
    data = os.urandom(300_000)
    src = LocalConnector(StorageEndpoint("src", "LOCAL_POSIX", str(tmp_path / "src")), stage_id="s")
    with src.write_at("/in.bin", 0) as s:
        s.write(data)
    src.commit("/in.bin")
    url = rx.create(len(data), sha(data))
    rx.patch(url, 0, data[:123_456])
    result = push_file(src, "/in.bin", url, rx.token(Verb.DATA_PATCH), chunk_bytes=65536)
    assert result.bytes_sent == len(data) - 123_456
    assert result.digest == sha(data)
    assert rx.final() == data


def test_push_file_gives_up_when_unreachable(tmp_path, secret):
    src = LocalConnector(StorageEndpoint("src", "LOCAL_POSIX", str(tmp_path)), stage_id="s")
    with src.write_at("/in", 0) as s:
        s.write(b"x")
    src.commit("/in")
    from mft.harness.runner import free_port

    url = f"http://127.0.0.1:{free_port()}/tus/abc"
    with pytest.raises(errors.RetriesExhausted):
        push_file(src, "/in", url, "tok", max_retries=2, retry_base_s=0.01)


def test_client_create_rejection(rx):
    client = TusClient()
    with pytest.raises(errors.RemoteRejected):
        client.create(rx.url, "bogus", TID, "dst", "/out.bin", 10)
