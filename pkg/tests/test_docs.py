"""Docs must describe the code that exists: every documented route, header
and error code is checked against the handler tables and the source."""

import glob
import json
import os
import re

import pytest

from mft import errors
from mft.agent import Agent, AgentConfig
from mft.api import route_table
from mft.stores import ObjectStoreServer, PlainHttpServer
from mft.tokens import ClusterSecret, mint_token, parse_token

from conftest import ROOT

DOCS = os.path.join(ROOT, "docs")
SRC = os.path.join(ROOT, "src", "mft")
ROUTE = re.compile(r"`(GET|POST|PUT|PATCH|DELETE|HEAD) (/[^`\s?]*)[^`]*`")
SAMPLE = re.compile(r"```json schema=(\S+)\n(.*?)```", re.S)


def doc_text(name):
    with open(os.path.join(DOCS, name)) as f:
        return f.read()


def all_docs():
    return {os.path.basename(p): doc_text(os.path.basename(p)) for p in glob.glob(os.path.join(DOCS, "*.md"))}


def norm(path):
    path = re.sub(r"\{[^}]+\}", "{}", path)
    return path.rstrip("/") or "/"


def documented_routes():
    out = set()
    for text in all_docs().values():
        out |= {(m, norm(p)) for m, p in ROUTE.findall(text)}
    return out


@pytest.fixture(scope="module")
def code_routes(tmp_path_factory):
    """Handler tables of every listener: API, agent, object store."""
    table = set(route_table())
    cfg = AgentConfig.from_dict({
        "agent_id": "doc", "controller_url": "http://127.0.0.1:9", "cluster_token": "t",
        "cluster_hmac": ClusterSecret.generate().dump(), "staging_dir": str(tmp_path_factory.mktemp("agent")),
    }, environ={})
    agent = Agent(cfg)
    table |= set(agent.router.table())
    agent.service.stop()
    for srv in (ObjectStoreServer({}), PlainHttpServer()):
        table |= set(srv.service.router.table())
        srv.service.stop()
    return {(m, norm(p)) for m, p in table}


def missing(documented, code):
    return sorted(documented - code)


def test_docs_exist():
    assert {"protocol.md", "deployment.md", "scenarios.md"} <= set(all_docs())


def test_every_documented_route_exists(code_routes):
    documented = documented_routes()
    assert len(documented) >= 20
    assert missing(documented, code_routes) == []


def test_removed_handler_is_caught(code_routes):
    documented = documented_routes()
    for route in sorted(documented):
        assert missing(documented, code_routes - {route}) == [route]


def test_every_api_route_is_documented():
    text = doc_text("protocol.md")
    for method, path in route_table():
        assert f"`{method} {path}" in text, (method, path)


def test_documented_headers_exist_in_code():
    text = doc_text("protocol.md")
    section = text.split("## Header reference", 1)[1]
    headers = re.findall(r"^\| `([A-Za-z0-9-]+)` \|", section, re.M)
    assert len(headers) >= 10
    source = "".join(open(p).read() for p in glob.glob(os.path.join(SRC, "**", "*.py"), recursive=True))
    for h in headers:
        assert f'"{h}"' in source, h
    # and the data channel headers the code sends are all documented
    for h in ("Tus-Resumable", "Upload-Offset", "Upload-Length", "Upload-Metadata", "MFT-Committed-Sha256", "X-MFT-Transfer", "X-MFT-Access"):
        assert h in headers


def test_documented_error_codes_exist():
    text = doc_text("protocol.md")
    table = text.split("## Errors", 1)[1].split("##", 1)[0]
    source = open(os.path.join(SRC, "httpkit.py")).read()
    rows = re.findall(r"^\| (\d{3}) \| (.*) \|$", table, re.M)
    assert rows
    for status, cell in rows:
        for code in re.findall(r"`(\w+)`", cell):
            cls = getattr(errors, code, None)
            if cls is None:
                assert f'"{code}"' in source, code
            else:
                assert cls.status == int(status), (code, cls.status, status)


def test_documented_samples_validate(validate):
    samples = [(name, body) for text in all_docs().values() for name, body in SAMPLE.findall(text)]
    assert len(samples) >= 12
    for name, body in samples:
        validate(json.loads(body), name)


def test_documented_token_grammar():
    secret = ClusterSecret.generate("kid")
    wire = mint_token(secret, "subj", "USER_UPLOAD", "ep", "/a/b", 60, now=1000)
    tok = parse_token(wire)
    assert tok.canonical().split("\n") == ["kid", "subj", "USER_UPLOAD", "ep", "/a/b", "1060"]
    assert "=" not in wire and wire.count(".") == 1


def test_scenario_cookbook_lists_every_shipped_scenario():
    text = doc_text("scenarios.md")
    for path in glob.glob(os.path.join(ROOT, "scenarios", "*.json")):
        assert f"`{os.path.basename(path)}`" in text


def test_cookbook_checks_match_runner():
    from mft.harness.scenario import CHECKS

    text = doc_text("scenarios.md")
    documented = set(re.findall(r"^\| `(\w+)` \|", text.split("## Checks", 1)[1].split("##", 1)[0], re.M))
    assert documented == set(CHECKS)
