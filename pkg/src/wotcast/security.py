"""Object security for CoAP messages.

Two modes share one envelope:

* ``standard``: pairwise OSCORE-style contexts. Nonces come from the sender
  id and a monotonically increasing sequence number, so protecting the same
  plaintext twice gives different bytes and different cache keys.
* ``deterministic``: a group context with a fictitious deterministic client.
  The request key is derived from a hash of the plaintext, so every group
  member produces byte-identical requests for identical plaintext. Responses
  are protected with the group key of the server and signed with Ed25519.

AEAD is AES-CCM-16-64-128, MAC and KDF are HMAC-SHA-256, signatures are
Ed25519. Every primitive call goes through a :class:`CryptoCounters`.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESCCM

from .coap import (
    Code,
    Message,
    MsgType,
    Option,
    OptionNumber,
    ProxyUriParts,
    compose_request,
    decode_message,
    encode_message,
    split_proxy_uri,
)

AEAD_ALG = 10  # COSE id of AES-CCM-16-64-128
KEY_LEN = 16
NONCE_LEN = 13
TAG_LEN = 8
SIG_LEN = 64
MAX_SEQ = (1 << 40) - 1
REPLAY_WINDOW = 32
DETERMINISTIC_CLIENT_ID = b"\xdc"


class SecurityError(Exception):
    pass


class IntegrityError(SecurityError):
    """AEAD tag check failed."""


class ReplayError(SecurityError):
    pass


class AuthenticityError(SecurityError):
    """Response signature did not verify."""


class SequenceExhausted(SecurityError):
    pass


class Mode(str, enum.Enum):
    STANDARD = "standard"
    DETERMINISTIC = "deterministic"


@dataclass
class CryptoCounters:
    aead_ops: int = 0
    sign_ops: int = 0
    verify_ops: int = 0
    hmac_ops: int = 0

    def snapshot(self) -> "CryptoCounters":
        return CryptoCounters(self.aead_ops, self.sign_ops, self.verify_ops, self.hmac_ops)

    def as_dict(self) -> dict[str, int]:
        return {
            "aead": self.aead_ops,
            "sign": self.sign_ops,
            "verify": self.verify_ops,
            "hmac": self.hmac_ops,
        }


def snapshot_counters(node) -> CryptoCounters:
    """Current counters of ``node`` (anything with a ``counters`` attribute)."""
    counters = getattr(node, "counters", node)
    return counters.snapshot()


# primitives ---------------------------------------------------------------


def _hmac(counters: CryptoCounters, key: bytes, msg: bytes) -> bytes:
    counters.hmac_ops += 1
    return hmac.new(key, msg, hashlib.sha256).digest()


def hkdf(counters: CryptoCounters, secret: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    """RFC 5869 HKDF-SHA-256 for outputs up to 32 bytes: one extract, one expand."""
    if length > 32:
        raise ValueError("single-block HKDF only")
    prk = _hmac(counters, salt or bytes(32), secret)
    return _hmac(counters, prk, info + b"\x01")[:length]


def _info(id_: bytes, id_context: bytes, type_: bytes, length: int) -> bytes:
    # deterministic stand-in for the CBOR info array
    return b"".join(
        struct.pack("!B", len(x)) + x for x in (id_, id_context, bytes([AEAD_ALG]), type_)
    ) + struct.pack("!B", length)


def _kdf_plain(secret: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    # context setup is not part of per-message accounting
    return hkdf(CryptoCounters(), secret, salt, info, length)


def _nonce(common_iv: bytes, id_: bytes, piv: bytes) -> bytes:
    if len(id_) > NONCE_LEN - 6:
        raise SecurityError("sender id too long for nonce construction")
    body = bytes([len(id_)]) + id_.rjust(NONCE_LEN - 6, b"\0") + piv.rjust(5, b"\0")
    return bytes(a ^ b for a, b in zip(body, common_iv))


def _piv(seq: int) -> bytes:
    return seq.to_bytes(max(1, (seq.bit_length() + 7) // 8), "big")


def _aead_seal(counters: CryptoCounters, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    counters.aead_ops += 1
    return AESCCM(key, tag_length=TAG_LEN).encrypt(nonce, plaintext, aad)


def _aead_open(counters: CryptoCounters, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
    counters.aead_ops += 1
    try:
        return AESCCM(key, tag_length=TAG_LEN).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise IntegrityError("authentication tag mismatch") from None


# OSCORE option ------------------------------------------------------------


def encode_oscore_option(piv: Optional[bytes], kid: Optional[bytes]) -> bytes:
    if piv is None and kid is None:
        return b""
    flags = len(piv or b"")
    if len(piv or b"") > 5:
        raise SecurityError("partial IV longer than 5 bytes")
    if kid is not None:
        flags |= 0x08
    return bytes([flags]) + (piv or b"") + (kid or b"")


def decode_oscore_option(value: bytes) -> tuple[Optional[bytes], Optional[bytes]]:
    if not value:
        return None, None
    n = value[0] & 0x07
    piv = value[1 : 1 + n] if n else None
    kid = value[1 + n :] if value[0] & 0x08 else None
    return piv, kid


# inner/outer split ---------------------------------------------------------

_OUTER_ONLY = {OptionNumber.PROXY_URI, OptionNumber.URI_HOST, OptionNumber.PROXY_SCHEME}


def _inner_plaintext(m: Message) -> bytes:
    """Inner code, class-E options and payload, serialized with the CoAP codec."""
    inner_opts = tuple(
        o
        for o in m.options
        if o.number not in _OUTER_ONLY
        and o.number not in (OptionNumber.OSCORE, OptionNumber.REQUEST_HASH)
    )
    if m.is_request:
        parts = split_proxy_uri(m)
        inner_opts = tuple(o for o in inner_opts if o.number not in (OptionNumber.URI_PATH, OptionNumber.URI_QUERY))
        inner_opts += tuple(Option.text(OptionNumber.URI_PATH, s) for s in parts.path)
        inner_opts += tuple(Option.text(OptionNumber.URI_QUERY, q) for q in parts.query)
    inner = Message(m.code, MsgType.CON, 0, b"", inner_opts, m.payload)
    return encode_message(inner)[4:]  # drop the fixed header, keep code separately


def _pack_plaintext(m: Message) -> bytes:
    return bytes([m.code]) + _inner_plaintext(m)


def _unpack_plaintext(pt: bytes) -> Message:
    if not pt:
        raise SecurityError("empty plaintext")
    # version 1, CON, no token
    return decode_message(bytes([0x40, pt[0], 0, 0]) + pt[1:])


def _outer_request(m: Message, oscore_value: bytes, ciphertext: bytes, extra=()) -> Message:
    parts = split_proxy_uri(m)
    outer_code = Code.FETCH if m.code.is_safe else Code.POST
    base = Message(outer_code, m.msg_type, m.message_id, m.token, (), ciphertext)
    outer = ProxyUriParts(parts.scheme, parts.host)
    if outer.host is not None:
        base = compose_request(outer, True, base)
    return base.with_options([Option(OptionNumber.OSCORE, oscore_value), *extra])


def _restore_outer_uri(outer: Message, inner: Message) -> Message:
    """Merge outer scheme/host back with the decrypted inner path/query."""
    outer_parts = split_proxy_uri(outer)
    inner_parts = split_proxy_uri(inner)
    parts = ProxyUriParts(outer_parts.scheme, outer_parts.host, inner_parts.path, inner_parts.query)
    restored = inner.evolve(msg_type=outer.msg_type, message_id=outer.message_id, token=outer.token)
    if parts.empty:
        return restored
    return compose_request(parts, parts.host is not None, restored)


def _aad(request_kid: bytes, request_piv: bytes, request_hash: bytes = b"") -> bytes:
    # external AAD: version, algorithm, request binding
    return b"".join(
        struct.pack("!B", len(x)) + x
        for x in (b"\x01", bytes([AEAD_ALG]), request_kid, request_piv, request_hash)
    )


# contexts ------------------------------------------------------------------


@dataclass(frozen=True)
class RequestBinding:
    """What a response is bound to: the request's kid/piv, plus its hash in group mode."""

    kid: bytes
    piv: bytes
    request_hash: bytes = b""
    fresh: bool = True

    @classmethod
    def of(cls, protected: Message) -> "RequestBinding":
        """Binding of a protected request, read from its outer options."""
        opt = protected.get_option(OptionNumber.OSCORE)
        if opt is None:
            raise SecurityError("request carries no OSCORE option")
        piv, kid = decode_oscore_option(opt)
        if piv is None or kid is None:
            raise SecurityError("request OSCORE option lacks partial IV or kid")
        return cls(kid, piv, protected.get_option(OptionNumber.REQUEST_HASH) or b"")


@dataclass
class SecurityContext:
    """Key material and mutable state for one endpoint of a security association.

    For ``standard`` mode one context pairs a sender with one recipient. For
    ``deterministic`` mode the context describes group membership; any member
    (clients and the server) can build the deterministic request key from the
    group secret.
    """

    mode: Mode
    sender_id: bytes
    recipient_id: bytes
    master_secret: bytes
    master_salt: bytes = b""
    id_context: bytes = b""
    sender_sequence: int = 0
    counters: CryptoCounters = field(default_factory=CryptoCounters)
    signing_key: Optional[Ed25519PrivateKey] = None
    verify_key: Optional[Ed25519PublicKey] = None
    deterministic_id: bytes = DETERMINISTIC_CLIENT_ID
    sender_key: bytes = field(init=False, repr=False)
    recipient_key: bytes = field(init=False, repr=False)
    common_iv: bytes = field(init=False, repr=False)
    _replay_high: int = field(default=-1, init=False, repr=False)
    _replay_seen: int = field(default=0, init=False, repr=False)
    _group_keys: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        s, salt, ctx = self.master_secret, self.master_salt, self.id_context
        self.sender_key = _kdf_plain(s, salt, _info(self.sender_id, ctx, b"Key", KEY_LEN), KEY_LEN)
        self.recipient_key = _kdf_plain(s, salt, _info(self.recipient_id, ctx, b"Key", KEY_LEN), KEY_LEN)
        self.common_iv = _kdf_plain(s, salt, _info(b"", ctx, b"IV", NONCE_LEN), NONCE_LEN)

    def _next_piv(self) -> bytes:
        if self.sender_sequence > MAX_SEQ:
            raise SequenceExhausted("sender sequence number space exhausted")
        piv = _piv(self.sender_sequence)
        self.sender_sequence += 1
        return piv

    def _check_replay(self, seq: int, commit: bool) -> bool:
        """True if ``seq`` is fresh. Sliding window of REPLAY_WINDOW numbers."""
        if seq > self._replay_high:
            if commit:
                shift = seq - self._replay_high
                self._replay_seen = ((self._replay_seen << shift) | 1) & ((1 << REPLAY_WINDOW) - 1)
                self._replay_high = seq
            return True
        offset = self._replay_high - seq
        if offset >= REPLAY_WINDOW or (self._replay_seen >> offset) & 1:
            return False
        if commit:
            self._replay_seen |= 1 << offset
        return True

    def group_key(self, member_id: bytes) -> bytes:
        key = self._group_keys.get(member_id)
        if key is None:
            info = _info(member_id, self.id_context, b"Key", KEY_LEN)
            key = self._group_keys[member_id] = _kdf_plain(self.master_secret, self.master_salt, info, KEY_LEN)
        return key


# standard mode -------------------------------------------------------------


def protect_request(ctx: SecurityContext, m: Message) -> Message:
    """Encrypt path, query, inner options and payload of ``m``.

    Scheme and host stay in the clear as a Proxy-Uri. ``RequestBinding.of``
    on the result gives what is needed to open the response.
    """
    if not m.is_request:
        raise SecurityError("protect_request needs a request")
    piv = ctx._next_piv()
    nonce = _nonce(ctx.common_iv, ctx.sender_id, piv)
    aad = _aad(ctx.sender_id, piv)
    ct = _aead_seal(ctx.counters, ctx.sender_key, nonce, _pack_plaintext(m), aad)
    return _outer_request(m, encode_oscore_option(piv, ctx.sender_id), ct)


def unprotect_request(ctx: SecurityContext, m: Message, *, replay_ok: bool = False) -> tuple[Message, RequestBinding]:
    """Open a standard-mode request.

    ``replay_ok`` lets an origin re-open an exact retransmission it already
    answered; the returned binding is then marked not fresh so the response
    gets its own partial IV.
    """
    opt = m.get_option(OptionNumber.OSCORE)
    if opt is None:
        raise SecurityError("request carries no OSCORE option")
    piv, kid = decode_oscore_option(opt)
    if piv is None or kid is None:
        raise SecurityError("request OSCORE option lacks partial IV or kid")
    if kid != ctx.recipient_id:
        raise SecurityError(f"unknown kid {kid.hex()}")
    seq = int.from_bytes(piv, "big")
    fresh = ctx._check_replay(seq, commit=False)
    if not fresh and not replay_ok:
        raise ReplayError(f"sequence number {seq} replayed")
    nonce = _nonce(ctx.common_iv, kid, piv)
    pt = _aead_open(ctx.counters, ctx.recipient_key, nonce, m.payload, _aad(kid, piv))
    if fresh:
        ctx._check_replay(seq, commit=True)
    inner = _unpack_plaintext(pt)
    return _restore_outer_uri(m, inner), RequestBinding(kid, piv, fresh=fresh)


def protect_response(ctx: SecurityContext, binding: RequestBinding, m: Message) -> Message:
    """Protect a response bound to the request described by ``binding``."""
    if ctx.mode is Mode.DETERMINISTIC:
        return _group_protect_response(ctx, binding, m)
    if binding.fresh:
        piv_opt = None
        nonce = _nonce(ctx.common_iv, binding.kid, binding.piv)
    else:
        piv_opt = ctx._next_piv()
        nonce = _nonce(ctx.common_iv, ctx.sender_id, piv_opt)
    aad = _aad(binding.kid, binding.piv)
    ct = _aead_seal(ctx.counters, ctx.sender_key, nonce, _pack_plaintext(m), aad)
    outer_code = Code.CHANGED
    base = Message(outer_code, m.msg_type, m.message_id, m.token, (), ct)
    return base.with_options([Option(OptionNumber.OSCORE, encode_oscore_option(piv_opt, None))])


def unprotect_response(ctx: SecurityContext, binding: RequestBinding, m: Message) -> Message:
    if ctx.mode is Mode.DETERMINISTIC:
        return _group_unprotect_response(ctx, binding, m)
    opt = m.get_option(OptionNumber.OSCORE)
    if opt is None:
        raise SecurityError("response carries no OSCORE option")
    piv, _ = decode_oscore_option(opt)
    if piv is None:
        nonce = _nonce(ctx.common_iv, binding.kid, binding.piv)
    else:
        nonce = _nonce(ctx.common_iv, ctx.recipient_id, piv)
    pt = _aead_open(ctx.counters, ctx.recipient_key, nonce, m.payload, _aad(binding.kid, binding.piv))
    inner = _unpack_plaintext(pt)
    return inner.evolve(msg_type=m.msg_type, message_id=m.message_id, token=m.token)


# deterministic mode --------------------------------------------------------

_DET_PIV = b"\x00"


def _request_hash(ctx: SecurityContext, plaintext: bytes) -> bytes:
    hash_key = ctx.master_secret
    data = _info(ctx.deterministic_id, ctx.id_context, b"Hash", 32) + plaintext
    return _hmac(ctx.counters, hash_key, data)


def _det_request_key(ctx: SecurityContext, request_hash: bytes) -> bytes:
    return hkdf(
        ctx.counters,
        ctx.master_secret,
        request_hash,
        _info(ctx.deterministic_id, ctx.id_context, b"Key", KEY_LEN),
        KEY_LEN,
    )


def deterministic_protect_request(ctx: SecurityContext, m: Message) -> Message:
    """Protect ``m`` as the deterministic client of the group.

    The output depends only on the group context and the plaintext: three
    HMAC calls (hash, HKDF extract, HKDF expand) and one AEAD call.
    """
    if ctx.mode is not Mode.DETERMINISTIC:
        raise SecurityError("deterministic protection needs a group context")
    if not m.is_request or not m.code.is_safe:
        raise SecurityError(f"deterministic requests are limited to safe methods, got {m.code.name}")
    pt = _pack_plaintext(m)
    rh = _request_hash(ctx, pt)
    key = _det_request_key(ctx, rh)
    nonce = _nonce(ctx.common_iv, ctx.deterministic_id, _DET_PIV)
    aad = _aad(ctx.deterministic_id, _DET_PIV, rh)
    ct = _aead_seal(ctx.counters, key, nonce, pt, aad)
    return _outer_request(
        m,
        encode_oscore_option(_DET_PIV, ctx.deterministic_id),
        ct,
        extra=[Option(OptionNumber.REQUEST_HASH, rh)],
    )


def deterministic_unprotect_request(ctx: SecurityContext, m: Message) -> tuple[Message, RequestBinding]:
    """Server side: derive the key from the carried hash, decrypt, re-check the hash.

    No replay check is done; callers only accept safe methods here.
    """
    rh = m.get_option(OptionNumber.REQUEST_HASH)
    opt = m.get_option(OptionNumber.OSCORE)
    if rh is None or opt is None:
        raise SecurityError("deterministic request needs OSCORE and Request-Hash options")
    piv, kid = decode_oscore_option(opt)
    if kid != ctx.deterministic_id or piv != _DET_PIV:
        raise SecurityError("request was not produced by the deterministic client")
    key = _det_request_key(ctx, rh)
    nonce = _nonce(ctx.common_iv, kid, piv)
    pt = _aead_open(ctx.counters, key, nonce, m.payload, _aad(kid, piv, rh))
    if not hmac.compare_digest(_request_hash(ctx, pt), rh):
        raise IntegrityError("Request-Hash does not match the plaintext")
    inner = _unpack_plaintext(pt)
    if not inner.code.is_safe:
        raise SecurityError("deterministic request carries an unsafe method")
    return _restore_outer_uri(m, inner), RequestBinding(kid, piv, rh)


def _group_protect_response(ctx: SecurityContext, binding: RequestBinding, m: Message) -> Message:
    piv = ctx._next_piv()
    nonce = _nonce(ctx.common_iv, ctx.sender_id, piv)
    aad = _aad(binding.kid, binding.piv, binding.request_hash)
    ct = _aead_seal(ctx.counters, ctx.group_key(ctx.sender_id), nonce, _pack_plaintext(m), aad)
    base = Message(Code.CONTENT, m.msg_type, m.message_id, m.token, (), ct)
    return base.with_options([Option(OptionNumber.OSCORE, encode_oscore_option(piv, ctx.sender_id))])


def _group_unprotect_response(ctx: SecurityContext, binding: RequestBinding, m: Message) -> Message:
    opt = m.get_option(OptionNumber.OSCORE)
    if opt is None:
        raise SecurityError("response carries no OSCORE option")
    piv, kid = decode_oscore_option(opt)
    if piv is None or kid is None:
        raise SecurityError("group response must carry its own partial IV and kid")
    ct = m.payload
    if ctx.verify_key is not None or ctx.signing_key is not None:
        if not verify_response(ctx, m):
            raise AuthenticityError("response signature does not verify")
        ct = ct[:-SIG_LEN]
    nonce = _nonce(ctx.common_iv, kid, piv)
    aad = _aad(binding.kid, binding.piv, binding.request_hash)
    pt = _aead_open(ctx.counters, ctx.group_key(kid), nonce, ct, aad)
    inner = _unpack_plaintext(pt)
    return inner.evolve(msg_type=m.msg_type, message_id=m.message_id, token=m.token)


def _signed_data(m: Message, body: bytes) -> bytes:
    return b"wotcast-sig\x00" + bytes([m.code]) + (m.get_option(OptionNumber.OSCORE) or b"") + body


def sign_response(ctx: SecurityContext, m: Message) -> Message:
    """Append an Ed25519 signature over the protected response to its payload."""
    if ctx.signing_key is None:
        raise SecurityError("context holds no signing key")
    ctx.counters.sign_ops += 1
    sig = ctx.signing_key.sign(_signed_data(m, m.payload))
    return m.evolve(payload=m.payload + sig)


def verify_response(ctx: SecurityContext, m: Message) -> bool:
    key = ctx.verify_key or (ctx.signing_key.public_key() if ctx.signing_key else None)
    if key is None:
        raise SecurityError("context holds no verification key")
    ctx.counters.verify_ops += 1
    if len(m.payload) < SIG_LEN:
        return False
    body, sig = m.payload[:-SIG_LEN], m.payload[-SIG_LEN:]
    try:
        key.verify(sig, _signed_data(m, body))
    except InvalidSignature:
        return False
    return True


# provisioning ---------------------------------------------------------------


def standard_pair(
    client_id: bytes,
    server_id: bytes,
    master_secret: bytes,
    master_salt: bytes = b"",
    client_counters: Optional[CryptoCounters] = None,
    server_counters: Optional[CryptoCounters] = None,
) -> tuple[SecurityContext, SecurityContext]:
    """Matching client and server contexts for one pairwise association."""
    c = SecurityContext(
        Mode.STANDARD, client_id, server_id, master_secret, master_salt,
        counters=client_counters or CryptoCounters(),
    )
    s = SecurityContext(
        Mode.STANDARD, server_id, client_id, master_secret, master_salt,
        counters=server_counters or CryptoCounters(),
    )
    return c, s


def group_member(
    member_id: bytes,
    server_id: bytes,
    group_secret: bytes,
    group_salt: bytes = b"",
    *,
    id_context: bytes = b"grp",
    signing_key: Optional[Ed25519PrivateKey] = None,
    verify_key: Optional[Ed25519PublicKey] = None,
    counters: Optional[CryptoCounters] = None,
) -> SecurityContext:
    return SecurityContext(
        Mode.DETERMINISTIC, member_id, server_id, group_secret, group_salt, id_context,
        counters=counters or CryptoCounters(),
        signing_key=signing_key,
        verify_key=verify_key,
    )
