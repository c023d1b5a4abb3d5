import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import given
from hypothesis import strategies as st

from conftest import segment
from wotcast import security as sec
from wotcast.coap import (
    Code,
    Message,
    OptionNumber,
    ProxyUriParts,
    compute_cache_key,
    decode_message,
    encode_message,
    request,
    split_proxy_uri,
)
from wotcast.proxy import serve_origin

MASTER = bytes(range(16))
GROUP = bytes(range(16, 32))
SIGNER = Ed25519PrivateKey.from_private_bytes(bytes(32))


def pair():
    return sec.standard_pair(b"\x01", b"\x00", MASTER)


def members():
    server = sec.group_member(b"\x00", b"\x00", GROUP, signing_key=SIGNER)
    x = sec.group_member(b"\x01", b"\x00", GROUP, verify_key=SIGNER.public_key())
    y = sec.group_member(b"\x02", b"\x00", GROUP, verify_key=SIGNER.public_key())
    return server, x, y


def get(uri="coap://srv/instruction?t=5", **kw):
    return request(Code.GET, uri, **kw)


def flip(m: Message, i: int) -> Message:
    p = bytearray(m.payload)
    p[i // 8 % len(p)] ^= 1 << (i % 8)
    return m.evolve(payload=bytes(p))


# --- standard mode ----------------------------------------------------------------


def test_standard_roundtrip_and_counters():
    c, s = pair()
    m = get(token=b"\x01")
    prot = sec.protect_request(c, m)
    inner, binding = sec.unprotect_request(s, prot)
    assert inner.code == Code.GET
    assert split_proxy_uri(inner) == ProxyUriParts("coap", "srv", ("instruction",), ("t=5",))
    resp = sec.protect_response(s, binding, serve_origin(inner, {"/instruction?t=5": b"go"}))
    out = sec.unprotect_response(c, sec.RequestBinding.of(prot), resp)
    assert out.code == Code.CONTENT and out.payload == b"go"
    assert c.counters.aead_ops == 2 and s.counters.aead_ops == 2
    assert sec.snapshot_counters(c).hmac_ops == 0


def test_outer_message_hides_path_keeps_host():
    c, _ = pair()
    prot = sec.protect_request(c, get())
    assert prot.code == Code.FETCH
    outer = split_proxy_uri(prot)
    assert (outer.scheme, outer.host, outer.path, outer.query) == ("coap", "srv", (), ())
    assert not prot.has_option(OptionNumber.URI_PATH) and not prot.has_option(OptionNumber.URI_QUERY)
    assert b"instruction" not in encode_message(prot)


def test_unsafe_outer_code_is_post():
    c, s = pair()
    prot = sec.protect_request(c, request(Code.PUT, "coap://srv/x", payload=b"v"))
    assert prot.code == Code.POST
    assert sec.unprotect_request(s, prot)[0].code == Code.PUT


def test_standard_protections_differ():
    c, _ = pair()
    a, b = sec.protect_request(c, get()), sec.protect_request(c, get())
    assert a.payload != b.payload
    assert compute_cache_key(a) != compute_cache_key(b)
    assert c.sender_sequence == 2


def test_response_bound_to_its_request():
    c, s = pair()
    pa, pb = sec.protect_request(c, get()), sec.protect_request(c, get())
    _, ba = sec.unprotect_request(s, pa)
    sec.unprotect_request(s, pb)
    resp = sec.protect_response(s, ba, Message(Code.CONTENT, payload=b"x"))
    assert sec.unprotect_response(c, sec.RequestBinding.of(pa), resp).payload == b"x"
    with pytest.raises(sec.IntegrityError):
        sec.unprotect_response(c, sec.RequestBinding.of(pb), resp)


def test_replay_rejected():
    c, s = pair()
    p = sec.protect_request(c, get())
    sec.unprotect_request(s, p)
    with pytest.raises(sec.ReplayError):
        sec.unprotect_request(s, p)
    inner, binding = sec.unprotect_request(s, p, replay_ok=True)
    assert not binding.fresh
    resp = sec.protect_response(s, binding, Message(Code.CONTENT, payload=b"again"))
    assert sec.unprotect_response(c, sec.RequestBinding.of(p), resp).payload == b"again"


def test_replay_window():
    c, s = pair()
    msgs = [sec.protect_request(c, get()) for _ in range(40)]
    sec.unprotect_request(s, msgs[39])
    sec.unprotect_request(s, msgs[10])  # inside the 32-wide window
    with pytest.raises(sec.ReplayError):
        sec.unprotect_request(s, msgs[5])  # too old


def test_sequence_exhaustion():
    c, _ = pair()
    c.sender_sequence = sec.MAX_SEQ + 1
    with pytest.raises(sec.SequenceExhausted):
        sec.protect_request(c, get())


def test_tampered_request_fails():
    c, s = pair()
    p = sec.protect_request(c, get())
    with pytest.raises(sec.IntegrityError):
        sec.unprotect_request(s, flip(p, 3))


@given(st.lists(st.binary(max_size=30), min_size=1, max_size=20))
def test_standard_nonces_never_repeat(payloads):
    c, s = pair()
    seen = set()
    for p in payloads:
        prot = sec.protect_request(c, request(Code.POST, "coap://srv/x", payload=p))
        b = sec.RequestBinding.of(prot)
        nonce = sec._nonce(c.common_iv, b.kid, b.piv)
        assert (c.sender_key, nonce) not in seen
        seen.add((c.sender_key, nonce))
        _, binding = sec.unprotect_request(s, prot)
        sec.protect_response(s, binding, Message(Code.CHANGED))
        assert (s.sender_key, nonce) not in seen  # response reuses the nonce under the other key
        seen.add((s.sender_key, nonce))


# --- deterministic mode ----------------------------------------------------------


def test_deterministic_requests_identical_across_members():
    _, x, y = members()
    a = sec.deterministic_protect_request(x, get(token=b"\x01", message_id=1))
    b = sec.deterministic_protect_request(y, get(token=b"\x01", message_id=1))
    assert encode_message(a) == encode_message(b)
    assert compute_cache_key(a) == compute_cache_key(sec.deterministic_protect_request(y, get(token=b"\x09")))


def test_deterministic_counts_three_hmacs_one_aead():
    _, x, _ = members()
    sec.deterministic_protect_request(x, get())
    assert (x.counters.hmac_ops, x.counters.aead_ops) == (3, 1)


def test_request_hash_option_and_cache_key():
    _, x, _ = members()
    a = sec.deterministic_protect_request(x, get("coap://srv/instruction?t=5"))
    b = sec.deterministic_protect_request(x, get("coap://srv/instruction?t=6"))
    ha, hb = a.get_option(OptionNumber.REQUEST_HASH), b.get_option(OptionNumber.REQUEST_HASH)
    assert len(ha) == 32 and ha != hb
    changed = a.evolve(options=tuple(
        o if o.number != OptionNumber.REQUEST_HASH else type(o)(o.number, hb) for o in a.options))
    assert compute_cache_key(changed) != compute_cache_key(a)


def test_deterministic_rejects_unsafe():
    _, x, _ = members()
    with pytest.raises(sec.SecurityError):
        sec.deterministic_protect_request(x, request(Code.POST, "coap://srv/x"))
    c, _ = pair()
    with pytest.raises(sec.SecurityError):
        sec.deterministic_protect_request(c, get())


def test_group_response_usable_by_any_member():
    server, x, y = members()
    req_x = sec.deterministic_protect_request(x, get(token=b"\x01"))
    req_y = sec.deterministic_protect_request(y, get(token=b"\x02"))
    inner, binding = sec.deterministic_unprotect_request(server, req_x)
    resp = sec.protect_response(server, binding, serve_origin(inner, {"/instruction?t=5": b"go"}))
    resp = sec.sign_response(server, resp)
    assert sec.unprotect_response(y, sec.RequestBinding.of(req_y), resp).payload == b"go"
    assert sec.unprotect_response(x, sec.RequestBinding.of(req_x), resp).payload == b"go"
    assert (server.counters.aead_ops, server.counters.sign_ops, server.counters.hmac_ops) == (2, 1, 3)
    assert (y.counters.verify_ops, y.counters.aead_ops) == (1, 2)


def test_group_response_bound_to_request_content():
    server, x, _ = members()
    r5 = sec.deterministic_protect_request(x, get("coap://srv/i?t=5"))
    r6 = sec.deterministic_protect_request(x, get("coap://srv/i?t=6"))
    _, binding = sec.deterministic_unprotect_request(server, r5)
    resp = sec.sign_response(server, sec.protect_response(server, binding, Message(Code.CONTENT, payload=b"5")))
    with pytest.raises(sec.IntegrityError):
        sec.unprotect_response(x, sec.RequestBinding.of(r6), resp)


def test_sign_verify_and_mutation():
    server, x, _ = members()
    m = sec.sign_response(server, Message(Code.CONTENT, payload=b"body"))
    assert sec.verify_response(x, m)
    assert not sec.verify_response(x, flip(m, 0))
    assert not sec.verify_response(x, m.evolve(payload=b"short"))


def test_member_forgery_fails_signature():
    server, x, y = members()
    req = sec.deterministic_protect_request(x, get())
    # member y can derive the group keys but not the server's signature
    impostor = sec.group_member(b"\x00", b"\x00", GROUP, signing_key=Ed25519PrivateKey.generate())
    _, binding = sec.deterministic_unprotect_request(impostor, req)
    forged = sec.sign_response(impostor, sec.protect_response(impostor, binding, Message(Code.CONTENT, payload=b"evil")))
    assert not sec.verify_response(y, forged)
    with pytest.raises(sec.AuthenticityError):
        sec.unprotect_response(y, sec.RequestBinding.of(req), forged)


def test_deterministic_request_tamper_detected():
    server, x, _ = members()
    req = sec.deterministic_protect_request(x, get())
    with pytest.raises(sec.IntegrityError):
        sec.deterministic_unprotect_request(server, flip(req, 9))


@given(st.lists(segment, min_size=1, max_size=3), st.lists(segment, max_size=2), st.lists(segment, min_size=1, max_size=3))
def test_ciphertext_equality_iff_plaintext_equality(p1, q1, p2):
    _, x, y = members()
    m1 = request(Code.GET, "coap://srv/" + "/".join(p1) + ("?" + "&".join(q1) if q1 else ""))
    m2 = request(Code.GET, "coap://srv/" + "/".join(p2))
    a, b = sec.deterministic_protect_request(x, m1), sec.deterministic_protect_request(y, m2)
    same_plain = sec._pack_plaintext(m1) == sec._pack_plaintext(m2)
    assert (a.payload == b.payload) == same_plain
    assert (encode_message(a) == encode_message(b)) == same_plain


def test_oscore_option_codec():
    for piv, kid in [(b"\x05", b"\x01"), (None, None), (b"\x00", b""), (b"\x01\x02", None)]:
        assert sec.decode_oscore_option(sec.encode_oscore_option(piv, kid)) == (piv, kid)


def test_snapshot_of_fresh_node_is_zero():
    class N:
        counters = sec.CryptoCounters()

    assert sec.snapshot_counters(N()).as_dict() == {"aead": 0, "sign": 0, "verify": 0, "hmac": 0}


def test_protected_messages_survive_the_wire():
    c, s = pair()
    p = sec.protect_request(c, get(token=b"\x01"))
    inner, _ = sec.unprotect_request(s, decode_message(encode_message(p)))
    assert split_proxy_uri(inner).query == ("t=5",)
