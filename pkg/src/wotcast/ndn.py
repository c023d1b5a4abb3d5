"""A small NDN-style forwarder used as the comparison baseline.

Interests carry hierarchical names, Data return on the reverse path and
consume Pending Interest Table state. Data content is AEAD encrypted and
authenticated with an HMAC-SHA-256 signature.
"""
from __future__ import annotations

import hashlib
import hmac
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .proxy import LOCAL, DeliverLocal, NodeAddress, SendTo, StartTimer
from .security import CryptoCounters, _aead_open, _aead_seal, _hmac

Name = tuple[str, ...]
Face = NodeAddress


def name_from_uri(uri: str) -> Name:
    """``coap://srv/instruction?t=5`` -> ``("srv", "instruction", "t=5")``."""
    from .coap import ProxyUriParts

    parts = ProxyUriParts.parse(uri)
    head = (parts.host,) if parts.host else ()
    return head + parts.path + parts.query


def name_str(name: Name) -> str:
    return "/" + "/".join(name)


@dataclass(frozen=True)
class Interest:
    name: Name
    nonce: int
    lifetime: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "name", tuple(self.name))
        if not self.name:
            raise ValueError("Interest name must not be empty")

    @property
    def size(self) -> int:
        # type/length headers, name TLVs, nonce, lifetime
        return 4 + sum(2 + len(c.encode()) for c in self.name) + 6 + 4


@dataclass(frozen=True)
class DataPacket:
    name: Name
    payload: bytes
    signature: bytes = b""
    encrypted: bool = True

    def __post_init__(self):
        object.__setattr__(self, "name", tuple(self.name))

    @property
    def size(self) -> int:
        return 4 + sum(2 + len(c.encode()) for c in self.name) + 2 + len(self.payload) + 2 + len(self.signature) + 5


# crypto --------------------------------------------------------------------


class DataKeys:
    """Producer key material: AEAD content key and HMAC signing key."""

    def __init__(self, content_key: bytes, signing_key: bytes):
        self.content_key = content_key
        self.signing_key = signing_key

    @staticmethod
    def _nonce(name: Name) -> bytes:
        return hashlib.sha256(name_str(name).encode()).digest()[:13]

    @staticmethod
    def _signed_portion(name: Name, payload: bytes) -> bytes:
        return name_str(name).encode() + b"\x00" + payload

    def make_data(self, name: Name, content: bytes, counters: CryptoCounters) -> DataPacket:
        ct = _aead_seal(counters, self.content_key, self._nonce(name), content, name_str(name).encode())
        sig = _hmac(counters, self.signing_key, self._signed_portion(name, ct))
        return DataPacket(name, ct, sig, True)

    def verify(self, data: DataPacket, counters: CryptoCounters) -> bool:
        expected = _hmac(counters, self.signing_key, self._signed_portion(data.name, data.payload))
        return hmac.compare_digest(expected, data.signature)

    def open_data(self, data: DataPacket, counters: CryptoCounters) -> bytes:
        if not data.encrypted:
            return data.payload
        return _aead_open(counters, self.content_key, self._nonce(data.name), data.payload, name_str(data.name).encode())


# tables --------------------------------------------------------------------


class NameFib:
    def __init__(self):
        self.entries: dict[Name, list[Face]] = {}

    def add(self, prefix: Sequence[str], *faces: Face) -> "NameFib":
        prefix = tuple(prefix)
        if not faces:
            raise ValueError("FIB entry needs at least one face")
        if prefix in self.entries:
            raise ValueError(f"duplicate FIB prefix {name_str(prefix)}")
        self.entries[prefix] = list(faces)
        return self

    def lookup(self, name: Name) -> list[Face]:
        for n in range(len(name), -1, -1):
            faces = self.entries.get(tuple(name[:n]))
            if faces is not None:
                return list(faces)
        return []


@dataclass
class PitEntry:
    name: Name
    interest: Interest
    in_faces: list[Face]
    out_faces: list[Face]
    retries_left: int
    timeout_at: float
    seen_nonces: set[int] = field(default_factory=set)


class ContentStore:
    def __init__(self, capacity: int = 40):
        self.capacity = capacity
        self._data: OrderedDict[Name, DataPacket] = OrderedDict()

    def __len__(self):
        return len(self._data)

    def __contains__(self, name):
        return tuple(name) in self._data

    def lookup(self, name: Name) -> Optional[DataPacket]:
        d = self._data.get(name)
        if d is not None:
            self._data.move_to_end(name)
        return d

    def insert(self, data: DataPacket) -> int:
        if data.name in self._data:
            self._data[data.name] = data
            self._data.move_to_end(data.name)
            return 0
        evicted = 0
        if len(self._data) >= self.capacity:
            self._data.popitem(last=False)
            evicted = 1
        self._data[data.name] = data
        return evicted


@dataclass
class NdnStats:
    interests_in: int = 0
    cs_hits: int = 0
    aggregated: int = 0
    duplicate_nonce: int = 0
    forwarded: int = 0
    no_route: int = 0
    retransmissions: int = 0
    expired: int = 0
    data_in: int = 0
    unsolicited: int = 0
    invalid_data: int = 0


class NdnForwarder:
    """PIT, content store and name FIB of one node.

    ``verifier`` checks a Data signature before caching and forwarding;
    Data failing it are dropped and leave the PIT entry untouched.
    """

    def __init__(
        self,
        address: NodeAddress,
        fib: NameFib,
        *,
        interest_lifetime: float = 2.0,
        max_retries: int = 3,
        cs_capacity: int = 40,
        verifier: Optional[Callable[[DataPacket], bool]] = None,
        observer: Optional[Callable[..., None]] = None,
    ):
        self.address = address
        self.fib = fib
        self.lifetime = interest_lifetime
        self.max_retries = max_retries
        self.cs = ContentStore(cs_capacity)
        self.pit: dict[Name, PitEntry] = {}
        self.verifier = verifier
        self.stats = NdnStats()
        self._observer = observer

    def _emit(self, event: str, **fields) -> None:
        if self._observer is not None:
            self._observer(event, node=self.address, **fields)

    def _send(self, face: Face, packet) -> object:
        if isinstance(packet, DataPacket):
            self._emit("respond", client=face, token=name_str(packet.name))
        if face == LOCAL:
            return DeliverLocal(packet)
        return SendTo(face, packet)

    def on_interest(self, i: Interest, face: Face, now: float = 0.0) -> list:
        self.stats.interests_in += 1
        cached = self.cs.lookup(i.name)
        if cached is not None:
            self.stats.cs_hits += 1
            self._emit("cache_hit", key=name_str(i.name), client=face)
            return [self._send(face, cached)]
        entry = self.pit.get(i.name)
        if entry is not None:
            if i.nonce in entry.seen_nonces:
                self.stats.duplicate_nonce += 1
                self._emit("duplicate_nonce", key=name_str(i.name), client=face)
                return []
            entry.seen_nonces.add(i.nonce)
            self.stats.aggregated += 1
            if face not in entry.in_faces:
                entry.in_faces.append(face)
                self._emit("pending_join", key=name_str(i.name), client=face, token=name_str(i.name))
            return []
        faces = [f for f in self.fib.lookup(i.name) if f != face]
        if not faces:
            self.stats.no_route += 1
            self._emit("no_route", key=name_str(i.name), client=face)
            return []
        entry = PitEntry(i.name, i, [face], faces, self.max_retries, now + self.lifetime, {i.nonce})
        self.pit[i.name] = entry
        self.stats.forwarded += 1
        self._emit("pending_open", key=name_str(i.name), client=face, token=name_str(i.name))
        actions: list = [SendTo(f, i) for f in faces]
        actions.append(StartTimer(i.name, entry.timeout_at))
        return actions

    def on_data(self, d: DataPacket, face: Face, now: float = 0.0) -> list:
        self.stats.data_in += 1
        entry = self.pit.get(d.name)
        if entry is None:
            self.stats.unsolicited += 1
            self._emit("dedup_drop", key=name_str(d.name), frm=face)
            return []
        if self.verifier is not None and not self.verifier(d):
            self.stats.invalid_data += 1
            self._emit("invalid_data", key=name_str(d.name), frm=face)
            return []
        del self.pit[d.name]
        self.cs.insert(d)
        self._emit("pending_close", key=name_str(d.name), reason="data")
        return [self._send(f, d) for f in entry.in_faces]

    def on_timer(self, name: Name, now: float) -> list:
        entry = self.pit.get(tuple(name))
        if entry is None or entry.timeout_at != now:
            return []
        return self.on_pit_timeout(entry, now)

    def on_pit_timeout(self, entry: PitEntry, now: float) -> list:
        if entry.retries_left > 0:
            entry.retries_left -= 1
            entry.timeout_at = now + self.lifetime
            self.stats.retransmissions += 1
            faces = [f for f in entry.out_faces if f not in entry.in_faces]
            self._emit("retransmit", key=name_str(entry.name), retries_left=entry.retries_left)
            actions: list = [SendTo(f, entry.interest) for f in faces]
            actions.append(StartTimer(entry.name, entry.timeout_at))
            return actions
        self.stats.expired += 1
        del self.pit[entry.name]
        self._emit("pending_close", key=name_str(entry.name), reason="expired")
        return []

