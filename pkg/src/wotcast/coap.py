"""CoAP message model, binary codec, Proxy-Uri handling and cache keys.

Frame layout (RFC 7252 shaped)::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |Ver| T |  TKL  |      Code     |          Message ID           |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |   Token (TKL bytes) ...
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |   Options (delta/length nibbles, extended by 1 or 2 bytes) ...
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |1 1 1 1 1 1 1 1|    Payload (only if non-empty) ...
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence
from urllib.parse import quote, unquote, urlsplit

VERSION = 1
PAYLOAD_MARKER = 0xFF
MAX_TOKEN_LEN = 8


class CoapError(ValueError):
    """Base class for CoAP model and codec errors."""


class EncodeError(CoapError):
    pass


class DecodeError(CoapError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class AmbiguousUriError(CoapError):
    pass


class MsgType(enum.IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


class Code(enum.IntEnum):
    """Method and response codes, encoded as ``class << 5 | detail``."""

    EMPTY = 0
    GET = 1
    POST = 2
    PUT = 3
    DELETE = 4
    FETCH = 5
    PATCH = 6
    IPATCH = 7
    CREATED = 65  # 2.01
    DELETED = 66  # 2.02
    VALID = 67  # 2.03
    CHANGED = 68  # 2.04
    CONTENT = 69  # 2.05
    BAD_REQUEST = 128  # 4.00
    UNAUTHORIZED = 129  # 4.01
    BAD_OPTION = 130  # 4.02
    NOT_FOUND = 132  # 4.04
    METHOD_NOT_ALLOWED = 133  # 4.05
    INTERNAL_SERVER_ERROR = 160  # 5.00
    BAD_GATEWAY = 162  # 5.02
    SERVICE_UNAVAILABLE = 163  # 5.03
    GATEWAY_TIMEOUT = 164  # 5.04
    PROXYING_NOT_SUPPORTED = 165  # 5.05

    @property
    def is_request(self) -> bool:
        return 1 <= self <= 31

    @property
    def is_response(self) -> bool:
        return self >= 64

    @property
    def is_success(self) -> bool:
        return 64 <= self < 96

    @property
    def is_safe(self) -> bool:
        return self in (Code.GET, Code.FETCH)

    @property
    def dotted(self) -> str:
        return f"{self >> 5}.{self & 0x1F:02d}"


class OptionNumber(enum.IntEnum):
    URI_HOST = 3
    OSCORE = 9
    URI_PATH = 11
    CONTENT_FORMAT = 12
    MAX_AGE = 14
    URI_QUERY = 15
    PROXY_URI = 35
    PROXY_SCHEME = 39
    # experimental-use range, even number: elective, safe-to-forward, part of the cache key
    REQUEST_HASH = 65000

    @property
    def critical(self) -> bool:
        return bool(self & 1)

    @property
    def no_cache_key(self) -> bool:
        return (self & 0x1E) == 0x1C


REPEATABLE = frozenset({OptionNumber.URI_PATH, OptionNumber.URI_QUERY})
URI_OPTIONS = frozenset(
    {
        OptionNumber.URI_HOST,
        OptionNumber.URI_PATH,
        OptionNumber.URI_QUERY,
        OptionNumber.PROXY_URI,
        OptionNumber.PROXY_SCHEME,
    }
)


@dataclass(frozen=True)
class Option:
    number: OptionNumber
    value: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "number", OptionNumber(self.number))
        object.__setattr__(self, "value", bytes(self.value))

    @classmethod
    def text(cls, number: OptionNumber, value: str) -> "Option":
        return cls(number, value.encode("utf-8"))

    @classmethod
    def uint(cls, number: OptionNumber, value: int) -> "Option":
        return cls(number, value.to_bytes((value.bit_length() + 7) // 8, "big"))


@dataclass(frozen=True)
class Message:
    """An immutable CoAP message. Options are kept sorted by number (stable)."""

    code: Code
    msg_type: MsgType = MsgType.CON
    message_id: int = 0
    token: bytes = b""
    options: tuple[Option, ...] = ()
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "code", Code(self.code))
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "token", bytes(self.token))
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.message_id <= 0xFFFF:
            raise CoapError(f"message id {self.message_id} out of range")
        if len(self.token) > MAX_TOKEN_LEN:
            raise CoapError(f"token of {len(self.token)} bytes exceeds {MAX_TOKEN_LEN}")
        opts = tuple(sorted(self.options, key=lambda o: o.number))
        object.__setattr__(self, "options", opts)
        if self.code.is_response and any(o.number == OptionNumber.PROXY_URI for o in opts):
            raise CoapError("responses never carry Proxy-Uri")

    @property
    def is_request(self) -> bool:
        return self.code.is_request

    def get_options(self, number: OptionNumber) -> list[bytes]:
        return [o.value for o in self.options if o.number == number]

    def get_option(self, number: OptionNumber) -> Optional[bytes]:
        values = self.get_options(number)
        return values[0] if values else None

    def has_option(self, number: OptionNumber) -> bool:
        return any(o.number == number for o in self.options)

    def without_options(self, numbers: Iterable[OptionNumber]) -> "Message":
        drop = set(numbers)
        return replace(self, options=tuple(o for o in self.options if o.number not in drop))

    def with_options(self, extra: Iterable[Option]) -> "Message":
        return replace(self, options=self.options + tuple(extra))

    def evolve(self, **changes) -> "Message":
        return replace(self, **changes)


def _split_nibble(value: int) -> tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    if value < 65805:
        return 14, struct.pack("!H", value - 269)
    raise EncodeError(f"option delta/length {value} is not encodable")


def encode_message(m: Message) -> bytes:
    out = bytearray()
    out.append((VERSION << 6) | (m.msg_type << 4) | len(m.token))
    out.append(m.code)
    out += struct.pack("!H", m.message_id)
    out += m.token
    prev = 0
    for opt in m.options:
        delta_nib, delta_ext = _split_nibble(opt.number - prev)
        len_nib, len_ext = _split_nibble(len(opt.value))
        out.append((delta_nib << 4) | len_nib)
        out += delta_ext + len_ext + opt.value
        prev = opt.number
    if m.payload:
        out.append(PAYLOAD_MARKER)
        out += m.payload
    return bytes(out)


def _read_ext(b: bytes, pos: int, nib: int, what: str, start: int) -> tuple[int, int]:
    if nib < 13:
        return nib, pos
    if nib == 13:
        if pos + 1 > len(b):
            raise DecodeError(f"truncated extended option {what}", start)
        return b[pos] + 13, pos + 1
    if nib == 14:
        if pos + 2 > len(b):
            raise DecodeError(f"truncated extended option {what}", start)
        return struct.unpack_from("!H", b, pos)[0] + 269, pos + 2
    raise DecodeError(f"reserved option {what} nibble 15", start)


def decode_message(b: bytes) -> Message:
    b = bytes(b)
    if len(b) < 4:
        raise DecodeError(f"truncated frame: {len(b)} bytes, header needs 4", len(b))
    ver, mtype, tkl = b[0] >> 6, (b[0] >> 4) & 0x3, b[0] & 0xF
    if ver != VERSION:
        raise DecodeError(f"unsupported version {ver}", 0)
    if tkl > MAX_TOKEN_LEN:
        raise DecodeError(f"token length {tkl} is reserved", 0)
    try:
        code = Code(b[1])
    except ValueError:
        raise DecodeError(f"unknown code {b[1] >> 5}.{b[1] & 0x1F:02d}", 1) from None
    (mid,) = struct.unpack_from("!H", b, 2)
    pos = 4
    if pos + tkl > len(b):
        raise DecodeError("truncated token", pos)
    token = b[pos : pos + tkl]
    pos += tkl

    options: list[Option] = []
    number = 0
    payload = b""
    while pos < len(b):
        start = pos
        if b[pos] == PAYLOAD_MARKER:
            payload = b[pos + 1 :]
            if not payload:
                raise DecodeError("payload marker followed by empty payload", start)
            break
        delta_nib, len_nib = b[pos] >> 4, b[pos] & 0xF
        pos += 1
        delta, pos = _read_ext(b, pos, delta_nib, "delta", start)
        length, pos = _read_ext(b, pos, len_nib, "length", start)
        number += delta
        if pos + length > len(b):
            raise DecodeError(f"option {number} value runs past end of frame", start)
        value = b[pos : pos + length]
        pos += length
        try:
            known = OptionNumber(number)
        except ValueError:
            if number & 1:
                raise DecodeError(f"unknown critical option {number}", start) from None
            continue  # unknown elective options are silently ignored
        if known not in REPEATABLE and options and options[-1].number == known:
            raise DecodeError(f"option {known.name} is not repeatable", start)
        options.append(Option(known, value))
    return Message(code, MsgType(mtype), mid, token, tuple(options), payload)


@dataclass(frozen=True)
class ProxyUriParts:
    """Scheme/host/path/query view of a request URI (Proxy-Uri or split options)."""

    scheme: Optional[str] = None
    host: Optional[str] = None
    path: tuple[str, ...] = ()
    query: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(self.path))
        object.__setattr__(self, "query", tuple(self.query))

    @property
    def empty(self) -> bool:
        return self.scheme is None and self.host is None and not self.path and not self.query

    def path_string(self) -> str:
        s = "/" + "/".join(quote(seg, safe="") for seg in self.path)
        if self.query:
            s += "?" + "&".join(quote(q, safe="=") for q in self.query)
        return s

    def uri(self) -> str:
        """Render as a URI; without host the result is a path-absolute reference."""
        if self.host is None:
            return self.path_string()
        return f"{self.scheme or 'coap'}://{self.host}{self.path_string()}"

    @classmethod
    def parse(cls, uri: str) -> "ProxyUriParts":
        sp = urlsplit(uri)
        path = sp.path[1:] if sp.path.startswith("/") else sp.path
        segments = tuple(unquote(seg) for seg in path.split("/")) if path else ()
        query = tuple(unquote(q) for q in sp.query.split("&")) if sp.query else ()
        return cls(sp.scheme or None, sp.netloc or None, segments, query)


def split_proxy_uri(m: Message) -> ProxyUriParts:
    proxy_uri = m.get_option(OptionNumber.PROXY_URI)
    paths = [v.decode("utf-8") for v in m.get_options(OptionNumber.URI_PATH)]
    queries = [v.decode("utf-8") for v in m.get_options(OptionNumber.URI_QUERY)]
    host = m.get_option(OptionNumber.URI_HOST)
    scheme = m.get_option(OptionNumber.PROXY_SCHEME)
    if proxy_uri is not None:
        if paths or queries or host is not None or scheme is not None:
            raise AmbiguousUriError("request carries both Proxy-Uri and split URI options")
        return ProxyUriParts.parse(proxy_uri.decode("utf-8"))
    return ProxyUriParts(
        scheme.decode("utf-8") if scheme is not None else None,
        host.decode("utf-8") if host is not None else None,
        tuple(paths),
        tuple(queries),
    )


def compose_request(parts: ProxyUriParts, send_host: bool, base: Message) -> Message:
    """Rewrite the URI options of ``base`` for the next hop.

    With ``send_host`` and a known host, a single Proxy-Uri option is emitted.
    Otherwise scheme and host are dropped and only Uri-Path/Uri-Query remain.
    """
    if parts.empty:
        raise CoapError("cannot compose a request from empty URI parts")
    stripped = base.without_options(URI_OPTIONS)
    if send_host and parts.host is not None:
        new = [Option.text(OptionNumber.PROXY_URI, parts.uri())]
    else:
        new = [Option.text(OptionNumber.URI_PATH, s) for s in parts.path]
        new += [Option.text(OptionNumber.URI_QUERY, q) for q in parts.query]
    return stripped.with_options(new)


def request(
    code: Code,
    uri: str,
    *,
    token: bytes = b"",
    message_id: int = 0,
    msg_type: MsgType = MsgType.CON,
    payload: bytes = b"",
    send_host: bool = True,
    extra: Sequence[Option] = (),
) -> Message:
    """Convenience constructor: ``request(Code.GET, "coap://srv/a?b=1")``."""
    base = Message(code, msg_type, message_id, token, tuple(extra), payload)
    return compose_request(ProxyUriParts.parse(uri), send_host, base)


CacheKey = bytes


def compute_cache_key(m: Message) -> CacheKey:
    """SHA-256 over code, normalized URI, other cache-key options and payload.

    Token, message id and type never enter the key. Proxy-Uri and the split
    URI options are normalized to one form first, so equivalent encodings of
    the same URI produce the same key.
    """
    if not m.is_request:
        raise CoapError(f"cache keys are defined for requests, got {m.code.dotted}")
    h = hashlib.sha256()
    h.update(bytes([m.code]))
    uri = split_proxy_uri(m).uri().encode("utf-8")
    h.update(struct.pack("!I", len(uri)) + uri)
    for opt in m.options:
        if opt.number in URI_OPTIONS or opt.number.no_cache_key:
            continue
        h.update(struct.pack("!HI", opt.number, len(opt.value)) + opt.value)
    h.update(b"\xff" + m.payload)
    return h.digest()
