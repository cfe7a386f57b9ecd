import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mft import errors
from mft.model import (
    LEGAL_STATE_PAIRS,
    TERMINAL_STATES,
    TRANSITIONS,
    AgentDescriptor,
    EndpointRef,
    HistoryEntry,
    LifecycleEvent,
    RetryPolicy,
    TransferMode,
    TransferRecord,
    TransferRequest,
    TransferState,
    apply_transition,
    compute_backoff,
    history_is_legal,
    new_id,
    normalize_path,
    plan_transfer,
    validate_request,
)

S, E = TransferState, LifecycleEvent


def request(src="a:/x", dst="b:/y", **kw):
    return TransferRequest(EndpointRef.parse(src), EndpointRef.parse(dst), **kw)


# -- paths ------------------------------------------------------------------
@pytest.mark.parametrize("raw,norm", [
    ("a", "/a"),
    ("/a/b", "/a/b"),
    ("//a///b/", "/a/b"),
    ("./a/./b", "/a/b"),
    ("/dir with space/f.txt", "/dir with space/f.txt"),
])
def test_normalize_path(raw, norm):
    assert normalize_path(raw) == norm


@pytest.mark.parametrize("raw", ["", "   ", "/", "/./", "."])
def test_empty_paths(raw):
    with pytest.raises(errors.EmptyPath):
        normalize_path(raw)


@pytest.mark.parametrize("raw", ["..", "/a/../b", "a/..", "/../etc/passwd", "a\x00b", "a\\b"])
def test_escaping_paths(raw):
    with pytest.raises(errors.PathEscapesRoot):
        normalize_path(raw)


@given(st.lists(st.sampled_from(["a", "b", ".", "", "dir", "x y"]), min_size=1, max_size=8))
def test_normalize_is_idempotent(parts):
    raw = "/".join(parts)
    try:
        once = normalize_path(raw)
    except errors.EmptyPath:
        return
    assert normalize_path(once) == once
    assert once.startswith("/") and "//" not in once and "/./" not in once + "/"


# -- requests ---------------------------------------------------------------
def test_validate_normalizes():
    out = validate_request(request("a:x//y", "b:/z/"))
    assert out.source.path == "/x/y" and out.destination.path == "/z"


def test_same_source_and_destination():
    with pytest.raises(errors.SameSourceAndDestination):
        validate_request(request("a:/x", "a://x"))


@pytest.mark.parametrize("chunk,ok", [(65535, False), (65536, True), (64 << 20, True), ((64 << 20) + 1, False)])
def test_chunk_bounds(chunk, ok):
    r = request(requested_chunk_bytes=chunk)
    if ok:
        assert validate_request(r).requested_chunk_bytes == chunk
    else:
        with pytest.raises(errors.ChunkSizeOutOfRange):
            validate_request(r)


def test_request_from_dict_rejects_garbage():
    for bad in (None, [], {"source": "a:/x"}, {"source": {"endpoint_id": "a"}, "destination": {}}):
        with pytest.raises(errors.MalformedRequest):
            TransferRequest.from_dict(bad)


def test_request_round_trip():
    r = request(verify_digest=False, requested_chunk_bytes=1 << 20)
    assert TransferRequest.from_dict(r.to_dict()) == r


def test_new_id_shape():
    ids = {new_id() for _ in range(100)}
    assert len(ids) == 100
    assert all(len(i) == 32 and int(i, 16) >= 0 for i in ids)


# -- state machine ----------------------------------------------------------
def test_happy_path_history():
    rec = TransferRecord.create(request(), now=1.0)
    for ev in (E.PLANNED, E.DISPATCHED, E.PROGRESS_STARTED, E.COMPLETED):
        rec = apply_transition(rec, ev, now=2.0)
    assert rec.state is S.COMPLETED
    assert [h.state for h in rec.history] == [S.CREATED, S.PLANNED, S.DISPATCHED, S.RUNNING, S.COMPLETED]
    assert rec.version == 4
    assert history_is_legal(rec.history)


def test_attempt_failed_counts_attempts():
    rec = TransferRecord.create(request())
    rec = apply_transition(rec, E.PLANNED)
    rec = apply_transition(rec, E.DISPATCHED)
    rec = apply_transition(rec, E.ATTEMPT_FAILED, last_error={"code": "X"})
    assert rec.state is S.RETRY_WAIT and rec.attempt == 1 and rec.last_error == {"code": "X"}
    rec = apply_transition(rec, E.BACKOFF_ELAPSED)
    assert rec.state is S.PLANNED and rec.attempt == 1


def test_input_record_untouched():
    rec = TransferRecord.create(request())
    out = apply_transition(rec, E.PLANNED)
    assert rec.state is S.CREATED and len(rec.history) == 1
    assert out is not rec


@pytest.mark.parametrize("state", sorted(TERMINAL_STATES))
def test_terminal_states_are_immutable(state):
    rec = TransferRecord.create(request())
    rec = TransferRecord(**{**rec.__dict__, "state": state})
    for ev in E:
        with pytest.raises(errors.TerminalStateImmutable):
            apply_transition(rec, ev)


def test_illegal_edges_rejected():
    rec = TransferRecord.create(request())
    with pytest.raises(errors.IllegalTransition):
        apply_transition(rec, E.COMPLETED)
    with pytest.raises(errors.IllegalTransition):
        apply_transition(rec, E.DISPATCHED)


def test_cancel_from_every_live_state():
    for state in S:
        if state.terminal:
            continue
        assert TRANSITIONS[(state, E.CANCEL)] is S.CANCELED


def test_history_legality_checker():
    good = [HistoryEntry(0, s) for s in (S.CREATED, S.PLANNED, S.DISPATCHED, S.RETRY_WAIT, S.FAILED)]
    assert history_is_legal(good)
    assert not history_is_legal(good[1:])
    assert not history_is_legal([HistoryEntry(0, S.CREATED), HistoryEntry(0, S.RUNNING)])
    assert not history_is_legal([])


@settings(max_examples=300)
@given(st.lists(st.sampled_from(list(E)), max_size=40))
def test_random_event_sequences(events):
    rec = TransferRecord.create(request())
    for ev in events:
        before = rec
        try:
            rec = apply_transition(rec, ev)
        except (errors.IllegalTransition, errors.TerminalStateImmutable):
            assert rec is before
            continue
        assert (before.state, rec.state) in LEGAL_STATE_PAIRS
        assert not before.state.terminal
    assert history_is_legal(rec.history)


def test_record_round_trip():
    rec = TransferRecord.create(request())
    rec = apply_transition(rec, E.PLANNED, mode=TransferMode.AGENT_TO_AGENT, executor_agent_id="a1")
    assert TransferRecord.from_dict(rec.to_dict()) == rec


# -- planning ---------------------------------------------------------------
A, B = AgentDescriptor("src-agent"), AgentDescriptor("dst-agent")


@pytest.mark.parametrize("src,dst,mode,executor", [
    (A, B, TransferMode.AGENT_TO_AGENT, "src-agent"),
    (A, None, TransferMode.AGENT_TO_STORAGE_PUSH, "src-agent"),
    (None, B, TransferMode.AGENT_TO_STORAGE_PULL, "dst-agent"),
])
def test_plan_matrix(src, dst, mode, executor):
    assert plan_transfer(request(), src, dst) == (mode, executor)


def test_plan_without_agents():
    with pytest.raises(errors.NoAgentPath):
        plan_transfer(request(), None, None)


def test_agent_liveness_window():
    a = AgentDescriptor("a", last_heartbeat=100.0)
    assert a.is_live(130.0, 30.0)
    assert not a.is_live(130.01, 30.0)


# -- backoff ----------------------------------------------------------------
def test_backoff_sequence():
    p = RetryPolicy(base_delay_ms=1000, multiplier=2, max_delay_ms=60000)
    assert [compute_backoff(p, n) for n in range(1, 9)] == [1000, 2000, 4000, 8000, 16000, 32000, 60000, 60000]


def test_backoff_huge_attempt_is_capped():
    assert compute_backoff(RetryPolicy(), 10**9) == RetryPolicy().max_delay_ms


@given(st.integers(1, 10**6), st.integers(1, 5), st.integers(1, 10**6), st.integers(1, 500))
def test_backoff_monotone_and_bounded(base, mult, extra, attempt):
    p = RetryPolicy(base_delay_ms=base, multiplier=mult, max_delay_ms=base + extra)
    d = compute_backoff(p, attempt)
    assert base <= d <= p.max_delay_ms
    assert compute_backoff(p, attempt + 1) >= d


@pytest.mark.parametrize("kw", [{"base_delay_ms": 0}, {"max_attempts": 0}, {"base_delay_ms": 10, "max_delay_ms": 5}])
def test_bad_policies(kw):
    with pytest.raises(ValueError):
        RetryPolicy(**kw)


def test_backoff_attempt_must_be_positive():
    with pytest.raises(ValueError):
        compute_backoff(RetryPolicy(), 0)
