"""Hop-wise CoAP forward proxy with aggregation, fan-out, dedup and caching.

The engine is a plain state machine: every handler takes one input event
and returns a list of actions for the surrounding event loop to execute.
"""
from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Optional, Union

from .coap import (
    CacheKey,
    CoapError,
    Code,
    Message,
    MsgType,
    ProxyUriParts,
    compose_request,
    compute_cache_key,
    split_proxy_uri,
)

NodeAddress = str
LOCAL: NodeAddress = "local"
"""Downstream address of the application hosted on the same node."""


# FIB -----------------------------------------------------------------------


@dataclass(frozen=True)
class NextHop:
    address: NodeAddress
    send_host: bool = True


@dataclass(frozen=True)
class FibEntry:
    """A URI pattern and its next-hops.

    A trailing ``*`` makes the pattern a character prefix of the request
    URI (``coap://00-01/temperature*``); without it the URI must match
    exactly. Patterns without scheme and host match path-only requests.
    """

    pattern: str
    next_hops: tuple[NextHop, ...]

    def __post_init__(self):
        object.__setattr__(self, "next_hops", tuple(self.next_hops))
        if not self.next_hops:
            raise ValueError(f"FIB entry {self.pattern!r} has no next-hop")

    @property
    def prefix(self) -> str:
        return self.pattern[:-1] if self.pattern.endswith("*") else self.pattern

    @property
    def wildcard(self) -> bool:
        return self.pattern.endswith("*")

    def matches(self, uri: str) -> bool:
        return uri.startswith(self.prefix) if self.wildcard else uri == self.prefix


class Fib:
    def __init__(self, entries: Iterable[FibEntry] = ()):
        self.entries: list[FibEntry] = []
        for e in entries:
            self.add_entry(e)

    def add_entry(self, entry: FibEntry) -> None:
        if any(e.pattern == entry.pattern for e in self.entries):
            raise ValueError(f"duplicate FIB prefix {entry.pattern!r}")
        self.entries.append(entry)

    def add(self, pattern: str, *next_hops: Union[NextHop, tuple[str, bool], str]) -> "Fib":
        hops = []
        for nh in next_hops:
            if isinstance(nh, NextHop):
                hops.append(nh)
            elif isinstance(nh, str):
                hops.append(NextHop(nh))
            else:
                hops.append(NextHop(*nh))
        self.add_entry(FibEntry(pattern, tuple(hops)))
        return self

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def fib_lookup(fib: Fib, parts: ProxyUriParts) -> list[NextHop]:
    """Next-hops of the longest matching pattern; empty on a miss."""
    uri = parts.uri()
    best: Optional[FibEntry] = None
    for entry in fib.entries:
        if entry.matches(uri):
            # exact entries beat wildcard entries of the same length
            rank = (len(entry.prefix), not entry.wildcard)
            if best is None or rank > (len(best.prefix), not best.wildcard):
                best = entry
    return list(best.next_hops) if best else []


# cache ---------------------------------------------------------------------


@dataclass
class CachedResponse:
    response: Message
    inserted_at: float


class ResponseCache:
    """LRU map from cache key to the stored response."""

    def __init__(self, capacity: int = 40):
        if capacity <= 0:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self._data: OrderedDict[CacheKey, CachedResponse] = OrderedDict()

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def keys(self) -> list[CacheKey]:
        """Keys from least to most recently used."""
        return list(self._data)

    def lookup(self, key: CacheKey) -> Optional[Message]:
        hit = self._data.get(key)
        if hit is None:
            return None
        self._data.move_to_end(key)
        return hit.response

    def insert(self, key: CacheKey, resp: Message, now: float = 0.0) -> int:
        return cache_insert(self, key, resp, now)


def cache_insert(cache: ResponseCache, key: CacheKey, resp: Message, now: float = 0.0) -> int:
    """Store ``resp`` under ``key``; returns how many entries were evicted (0 or 1)."""
    if not resp.code.is_success:
        raise CoapError(f"only successful responses are cached, got {resp.code.dotted}")
    data = cache._data
    if key in data:
        data[key] = CachedResponse(resp, now)
        data.move_to_end(key)
        return 0
    evicted = 0
    if len(data) >= cache.capacity:
        data.popitem(last=False)
        evicted = 1
    data[key] = CachedResponse(resp, now)
    return evicted


# actions -------------------------------------------------------------------


@dataclass(frozen=True)
class SendTo:
    address: NodeAddress
    message: Message


@dataclass(frozen=True)
class DeliverLocal:
    message: Message


@dataclass(frozen=True)
class StartTimer:
    token: Hashable
    at: float


Action = Union[SendTo, DeliverLocal, StartTimer]


# engine --------------------------------------------------------------------


@dataclass
class ProxyConfig:
    request_timeout: float = 2.0
    max_request_retries: int = 3
    cache_capacity: int = 40
    role: str = "forwarder"

    def __post_init__(self):
        if self.role not in ("client", "forwarder", "server"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.request_timeout <= 0 or self.cache_capacity <= 0 or self.max_request_retries < 0:
            raise ValueError("proxy timeouts, retries and cache size must be positive")


@dataclass
class Downstream:
    client: NodeAddress
    token: bytes


@dataclass
class PendingEntry:
    cache_key: CacheKey
    downstream: list[Downstream]
    upstream_token: bytes
    outstanding_next_hops: list[NodeAddress]
    retries_left: int
    timeout_at: float
    upstream_requests: dict[NodeAddress, Message] = field(default_factory=dict)
    cacheable: bool = True

    def add_downstream(self, client: NodeAddress, token: bytes) -> bool:
        if any(d.client == client and d.token == token for d in self.downstream):
            return False
        self.downstream.append(Downstream(client, token))
        return True


@dataclass
class ProxyStats:
    requests_in: int = 0
    cache_hits: int = 0
    aggregated: int = 0
    forwarded: int = 0
    retransmissions: int = 0
    timeouts: int = 0
    fib_misses: int = 0
    responses_in: int = 0
    dedup_dropped: int = 0
    unmatched_dropped: int = 0
    evictions: int = 0


Observer = Callable[..., None]


class ForwardProxy:
    """One node's CoAP request/response engine.

    ``role="client"`` uses the same logic with the local application as the
    only downstream: requests come in from :data:`LOCAL` and results leave
    as :class:`DeliverLocal`.
    """

    def __init__(
        self,
        address: NodeAddress,
        fib: Fib,
        config: Optional[ProxyConfig] = None,
        *,
        caching: bool = True,
        observer: Optional[Observer] = None,
    ):
        self.address = address
        self.fib = fib
        self.config = config or ProxyConfig()
        if self.config.role == "server":
            raise ValueError("origin servers are served by serve_origin, not ForwardProxy")
        self.cache = ResponseCache(self.config.cache_capacity)
        self.caching = caching
        self.pending: dict[CacheKey, PendingEntry] = {}
        self.by_token: dict[bytes, PendingEntry] = {}
        self.stats = ProxyStats()
        self._tokens = itertools.count(1)
        self._mids = itertools.count(1)
        self._consumed: OrderedDict[bytes, None] = OrderedDict()
        self._observer = observer

    def _emit(self, event: str, **fields) -> None:
        if self._observer is not None:
            self._observer(event, node=self.address, **fields)

    def _next_token(self) -> bytes:
        n = next(self._tokens)
        return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")

    def _next_mid(self) -> int:
        return next(self._mids) & 0xFFFF

    def _reply(self, client: NodeAddress, token: bytes, resp: Message) -> Action:
        out = resp.evolve(token=token, message_id=self._next_mid(), msg_type=MsgType.NON)
        self._emit("respond", client=client, token=token, code=int(out.code))
        if client == LOCAL:
            return DeliverLocal(out)
        return SendTo(client, out)

    def _error(self, client: NodeAddress, req: Message, code: Code) -> Action:
        return self._reply(client, req.token, Message(code, MsgType.NON))

    # requests ----------------------------------------------------------

    def handle_client_request(self, req: Message, frm: NodeAddress, now: float) -> list[Action]:
        if not req.is_request:
            raise CoapError("handle_client_request needs a request")
        self.stats.requests_in += 1
        safe = req.code.is_safe
        key = compute_cache_key(req)
        if safe and self.caching:
            cached = self.cache.lookup(key)
            if cached is not None:
                self.stats.cache_hits += 1
                self._emit("cache_hit", key=key, client=frm, token=req.token)
                return [self._reply(frm, req.token, cached)]
        if safe:
            entry = self.pending.get(key)
            if entry is not None:
                added = entry.add_downstream(frm, req.token)
                self.stats.aggregated += 1
                if added:
                    self._emit("pending_join", key=key, upstream=entry.upstream_token, client=frm, token=req.token)
                return []

        parts = split_proxy_uri(req)
        hops = fib_lookup(self.fib, parts)
        if not hops:
            self.stats.fib_misses += 1
            self._emit("fib_miss", client=frm, token=req.token)
            return [self._error(frm, req, Code.BAD_GATEWAY)]
        if not safe:
            hops = hops[:1]

        token = self._next_token()
        if not safe:
            key = key + token  # never aggregate unsafe requests
        entry = PendingEntry(
            cache_key=key,
            downstream=[Downstream(frm, req.token)],
            upstream_token=token,
            outstanding_next_hops=[h.address for h in hops],
            retries_left=self.config.max_request_retries,
            timeout_at=now + self.config.request_timeout,
            cacheable=safe,
        )
        mid = self._next_mid()
        for hop in hops:
            fwd = req.evolve(token=token, message_id=mid)
            if not parts.empty:
                fwd = compose_request(parts, hop.send_host, fwd)
            entry.upstream_requests[hop.address] = fwd
        self.pending[key] = entry
        self.by_token[token] = entry
        self.stats.forwarded += 1
        self._emit("pending_open", key=key, upstream=token, client=frm, token=req.token)
        actions: list[Action] = [SendTo(a, m) for a, m in entry.upstream_requests.items()]
        actions.append(StartTimer(token, entry.timeout_at))
        return actions

    # responses ---------------------------------------------------------

    def _consume(self, entry: PendingEntry) -> None:
        del self.pending[entry.cache_key]
        del self.by_token[entry.upstream_token]
        self._consumed[entry.upstream_token] = None
        if len(self._consumed) > 4096:
            self._consumed.popitem(last=False)

    def handle_upstream_response(self, resp: Message, frm: NodeAddress, now: float = 0.0) -> list[Action]:
        self.stats.responses_in += 1
        entry = self.by_token.get(resp.token)
        if entry is None:
            if resp.token in self._consumed:
                self.stats.dedup_dropped += 1
                self._emit("dedup_drop", upstream=resp.token, frm=frm)
            else:
                self.stats.unmatched_dropped += 1
                self._emit("unmatched_drop", upstream=resp.token, frm=frm)
            return []
        self._consume(entry)
        if entry.cacheable and self.caching and resp.code.is_success:
            stored = resp.evolve(token=b"", message_id=0)
            self.stats.evictions += cache_insert(self.cache, entry.cache_key, stored, now)
        self._emit("pending_close", key=entry.cache_key, upstream=entry.upstream_token, reason="response")
        return [self._reply(d.client, d.token, resp) for d in entry.downstream]

    # timers ------------------------------------------------------------

    def on_timer(self, token: bytes, now: float) -> list[Action]:
        """Timer dispatch; stale timers of consumed or re-armed entries do nothing."""
        entry = self.by_token.get(token)
        if entry is None or entry.timeout_at != now:
            return []
        return self.on_request_timeout(entry, now)

    def on_request_timeout(self, entry: PendingEntry, now: float) -> list[Action]:
        if entry.retries_left > 0:
            entry.retries_left -= 1
            entry.timeout_at = now + self.config.request_timeout
            self.stats.retransmissions += 1
            self._emit("retransmit", upstream=entry.upstream_token, retries_left=entry.retries_left)
            actions: list[Action] = [SendTo(a, m) for a, m in entry.upstream_requests.items()]
            actions.append(StartTimer(entry.upstream_token, entry.timeout_at))
            return actions
        self.stats.timeouts += 1
        self._consume(entry)
        self._emit("pending_close", key=entry.cache_key, upstream=entry.upstream_token, reason="timeout")
        timeout = Message(Code.GATEWAY_TIMEOUT, MsgType.NON)
        return [self._reply(d.client, d.token, timeout) for d in entry.downstream]


# origin --------------------------------------------------------------------


def serve_origin(req: Message, resources: Mapping[str, bytes]) -> Message:
    """2.05 with the resource for the exact path and query, 4.04 otherwise."""
    parts = split_proxy_uri(req)
    body = resources.get(parts.path_string())
    if body is None or not req.code.is_safe:
        code = Code.NOT_FOUND if body is None else Code.METHOD_NOT_ALLOWED
        return Message(code, MsgType.NON, req.message_id, req.token)
    return Message(Code.CONTENT, MsgType.NON, req.message_id, req.token, (), body)
