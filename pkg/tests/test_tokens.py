import pytest
from hypothesis import given
from hypothesis import strategies as st

from mft import errors
from mft.tokens import (
    DEFAULT_SKEW_S,
    ClusterSecret,
    TokenRejected,
    Verb,
    mint_token,
    parse_token,
    verify_token,
)

NOW = 1_700_000_000


def mint(secret, verb=Verb.DATA_PATCH, ep="ep1", path="/data/f.bin", ttl=60, now=NOW, subject="t1"):
    return mint_token(secret, subject, verb, ep, path, ttl, now=now)


def test_round_trip(secret):
    tok = mint(secret)
    assert verify_token(secret, tok, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW) == "t1"
    t = parse_token(tok)
    assert (t.verb, t.endpoint_id, t.path, t.expires_at) == ("DATA_PATCH", "ep1", "/data/f.bin", NOW + 60)


def test_token_is_url_safe(secret):
    tok = mint(secret, path="/a b/ü?x=1&y")
    assert all(c.isalnum() or c in "-_." for c in tok)


@pytest.mark.parametrize("ttl", [0, -1, 86401])
def test_ttl_bounds(secret, ttl):
    with pytest.raises(errors.TtlOutOfRange):
        mint(secret, ttl=ttl)


def test_ttl_edges_accepted(secret):
    mint(secret, ttl=1)
    mint(secret, ttl=86400)


def test_newline_in_field_refused(secret):
    with pytest.raises(ValueError):
        mint(secret, path="/a\nb")


def test_other_secret_rejected(secret):
    other = ClusterSecret(secret.key_id, b"x" * 32)
    with pytest.raises(TokenRejected) as ei:
        verify_token(other, mint(secret), Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW)
    assert ei.value.reason == "BadSignature"


def test_rotated_key_id_rejected(secret):
    rotated = ClusterSecret("k2", secret.key_bytes)
    with pytest.raises(TokenRejected):
        verify_token(rotated, mint(secret), Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW)


@pytest.mark.parametrize("offset,ok", [(0, True), (DEFAULT_SKEW_S, True), (DEFAULT_SKEW_S + 1, False)])
def test_expiry_with_skew(secret, offset, ok):
    tok = mint(secret, ttl=60)
    at = NOW + 60 + offset
    if ok:
        verify_token(secret, tok, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=at)
    else:
        with pytest.raises(TokenRejected) as ei:
            verify_token(secret, tok, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=at)
        assert ei.value.reason == "Expired"


def test_zero_skew(secret):
    tok = mint(secret, ttl=60)
    verify_token(secret, tok, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW + 60, skew_s=0)
    with pytest.raises(TokenRejected):
        verify_token(secret, tok, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW + 61, skew_s=0)


@pytest.mark.parametrize("wire", ["", "abc", "a.b.c", "!!.??", "YQ.YQ"])
def test_malformed(secret, wire):
    with pytest.raises(TokenRejected) as ei:
        verify_token(secret, wire, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW)
    assert ei.value.reason == "Malformed"


def test_rejection_is_unauthorized(secret):
    with pytest.raises(errors.Unauthorized):
        verify_token(secret, "x", Verb.DATA_PATCH, "ep1", "/", now=NOW)


@given(st.data())
def test_any_single_character_change_is_rejected(data):
    secret = ClusterSecret("k1", b"s" * 32)
    tok = mint(secret)
    i = data.draw(st.integers(0, len(tok) - 1))
    c = data.draw(st.sampled_from("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_."))
    if c == tok[i]:
        return
    forged = tok[:i] + c + tok[i + 1:]
    with pytest.raises(TokenRejected):
        verify_token(secret, forged, Verb.DATA_PATCH, "ep1", "/data/f.bin", now=NOW)


def test_secret_parse_dump_round_trip(secret):
    again = ClusterSecret.parse(secret.dump())
    assert again == secret
    assert "key_bytes=<redacted>" in repr(secret)


@pytest.mark.parametrize("text", ["nocolon", "k1:" + "QQ==", ":" + "A" * 44])
def test_secret_parse_rejects(text):
    with pytest.raises(ValueError):
        ClusterSecret.parse(text)
