import json
import os
import time

import pytest
import requests

from mft.agent import Agent, AgentConfig
from mft.api import ApiService
from mft.backends import InMemoryCredentialBackend, InMemoryResourceBackend
from mft.controller import Controller
from mft.model import RetryPolicy, StorageEndpoint
from mft.stores import ObjectStoreServer, PlainHttpServer
from mft.tokens import ClusterSecret

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCHEMA_DIR = os.path.join(ROOT, "docs", "schema")
SCENARIO_DIR = os.path.join(ROOT, "scenarios")
ACCESS_KEY = ("test-key", "test-secret-key")
TERMINAL = ("COMPLETED", "FAILED", "CANCELED")
# filled by the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def secret():
    return ClusterSecret.generate()


@pytest.fixture
def objstore():
    srv = ObjectStoreServer({ACCESS_KEY[0]: ACCESS_KEY[1]}).start()
    yield srv
    srv.stop()


@pytest.fixture
def plainhttp():
    srv = PlainHttpServer().start()
    yield srv
    srv.stop()


def load_schema(name):
    with open(os.path.join(SCHEMA_DIR, name)) as f:
        return json.load(f)


@pytest.fixture(scope="session")
def validate():
    """validate(instance, "transfer-record.json") against the shipped schemas."""
    import jsonschema
    from referencing import Registry, Resource

    resources = []
    for name in os.listdir(SCHEMA_DIR):
        resources.append((name, Resource.from_contents(load_schema(name))))
    registry = Registry().with_resources(resources)

    def check(instance, name):
        jsonschema.Draft202012Validator(load_schema(name), registry=registry).validate(instance)

    return check


class Stack:
    """Controller, API and in-process agents on loopback."""

    admin = "admin-token"
    cluster = "cluster-token"

    def __init__(self, root, liveness_window_s=3.0, heartbeat_interval_s=0.5, retry=None, stall_timeout_s=60.0):
        self.root = str(root)
        self.secret = ClusterSecret.generate()
        self.resources = InMemoryResourceBackend()
        self.credentials = InMemoryCredentialBackend()
        self.controller = Controller(
            self.resources, self.credentials, self.secret,
            state_dir=os.path.join(self.root, "controller"),
            retry=retry or RetryPolicy(base_delay_ms=100, max_delay_ms=500, max_attempts=3),
            liveness_window_s=liveness_window_s,
            heartbeat_interval_s=heartbeat_interval_s,
            stall_timeout_s=stall_timeout_s,
            scheduler_interval_s=0.1,
        )
        self.api = ApiService(self.controller, self.admin, self.cluster).start()
        self.url = self.api.url
        self.agents = {}
        self.http = requests.Session()
        self.http.headers["Authorization"] = f"Bearer {self.admin}"

    def local_endpoint(self, eid):
        root = os.path.join(self.root, "storage", eid)
        os.makedirs(root, exist_ok=True)
        ep = StorageEndpoint(eid, "LOCAL_POSIX", root)
        self.resources.register_endpoint(ep)
        return ep

    def add_agent(self, aid, endpoints, credentials=None, chunk_bytes=1 << 20, wait=True):
        served = []
        for ep in endpoints:
            item = ep.to_dict()
            if credentials and ep.endpoint_id in credentials:
                item["credential"] = credentials[ep.endpoint_id]
            served.append(item)
        cfg = AgentConfig.from_dict({
            "agent_id": aid,
            "controller_url": self.url,
            "cluster_token": self.cluster,
            "cluster_hmac": self.secret.dump(),
            "served_endpoints": served,
            "staging_dir": os.path.join(self.root, "agents", aid),
            "chunk_bytes": chunk_bytes,
            "heartbeat_interval_s": self.controller.heartbeat_interval_s,
        }, environ={})
        agent = Agent(cfg).start()
        self.agents[aid] = agent
        if wait:
            deadline = time.time() + 10
            while aid not in self.controller.agents and time.time() < deadline:
                time.sleep(0.02)
        return agent

    def call(self, method, path, **kw):
        return self.http.request(method, self.url + path, timeout=30, **kw)

    def submit(self, src, dst, **extra):
        body = {"source": dict(zip(("endpoint_id", "path"), src)), "destination": dict(zip(("endpoint_id", "path"), dst)), **extra}
        resp = self.call("POST", "/v1/transfers", json=body)
        assert resp.status_code == 201, resp.text
        return resp.json()["transfer_id"]

    def wait(self, tid, timeout=30.0):
        deadline = time.time() + timeout
        version = -1
        while time.time() < deadline:
            rec = self.call("GET", f"/v1/transfers/{tid}", params={"wait_s": 2, "version": version}).json()
            if rec["state"] in TERMINAL:
                return rec
            version = rec["version"]
        raise AssertionError(f"transfer {tid} still {rec['state']} after {timeout}s")

    def close(self):
        for agent in self.agents.values():
            agent.stop()
        self.api.stop()
        self.http.close()


@pytest.fixture
def make_stack(tmp_path):
    stacks = []

    def make(**kw):
        s = Stack(tmp_path / f"stack{len(stacks)}", **kw)
        stacks.append(s)
        return s

    yield make
    for s in stacks:
        s.close()
