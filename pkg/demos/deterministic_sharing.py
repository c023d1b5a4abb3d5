"""Why deterministic requests let proxies share one protected response.

Two group members protect the same GET. In standard mode the ciphertexts
differ every time, so a proxy sees two unrelated requests. In deterministic
mode both members produce the same bytes, the proxy aggregates them, and the
server's single signed response is readable by both.
"""
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from wotcast import security as sec
from wotcast.coap import Code, Message, compute_cache_key, request

signer = Ed25519PrivateKey.from_private_bytes(bytes(32))
group = bytes(range(16))
server = sec.group_member(b"\x00", b"\x00", group, signing_key=signer)
alice = sec.group_member(b"\x01", b"\x00", group, verify_key=signer.public_key())
bob = sec.group_member(b"\x02", b"\x00", group, verify_key=signer.public_key())

a_ctx, _ = sec.standard_pair(b"\x01", b"\x00", bytes(16))
s1 = sec.protect_request(a_ctx, request(Code.GET, "coap://srv/instruction?t=5"))
s2 = sec.protect_request(a_ctx, request(Code.GET, "coap://srv/instruction?t=5"))
print("standard mode, same cache key twice?", compute_cache_key(s1) == compute_cache_key(s2))

ra = sec.deterministic_protect_request(alice, request(Code.GET, "coap://srv/instruction?t=5", token=b"\x0a"))
rb = sec.deterministic_protect_request(bob, request(Code.GET, "coap://srv/instruction?t=5", token=b"\x0b"))
print("deterministic mode, same cache key?", compute_cache_key(ra) == compute_cache_key(rb))

inner, binding = sec.deterministic_unprotect_request(server, ra)
resp = sec.sign_response(server, sec.protect_response(server, binding, Message(Code.CONTENT, payload=b"turn left")))
for name, ctx, req in (("alice", alice, ra), ("bob", bob, rb)):
    out = sec.unprotect_response(ctx, sec.RequestBinding.of(req), resp)
    print(f"{name} reads {out.payload!r}")
print("server work:", server.counters.as_dict())
