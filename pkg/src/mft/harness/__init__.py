"""Fault-injection harness for loopback deployments."""

from .payload import iter_payload, payload_bytes, payload_digest, write_payload
from .runner import run_scenario
from .scenario import load_scenario, parse_scenario

__all__ = ["iter_payload", "payload_bytes", "payload_digest", "write_payload", "run_scenario", "load_scenario", "parse_scenario"]
