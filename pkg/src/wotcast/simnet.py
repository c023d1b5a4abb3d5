"""Deterministic discrete-event simulation of lossy multi-hop deployments.

Nodes host a CoAP proxy engine, an NDN forwarder or a plain router, plus a
client application or origin server. Links retransmit frames on the MAC
layer; each node has a single radio that sends one frame at a time.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional, Sequence

import networkx as nx
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import security as sec
from .coap import Code, Message, MsgType, decode_message, encode_message, request
from .ndn import DataKeys, DataPacket, Interest, NameFib, NdnForwarder, name_from_uri
from .proxy import (
    LOCAL,
    DeliverLocal,
    Fib,
    ForwardProxy,
    NextHop,
    ProxyConfig,
    SendTo,
    StartTimer,
    serve_origin,
)

MODES = ("oscore", "oscore-proxy", "det-oscore-proxy", "ndn", "coap-proxy")
HOP_WISE_MODES = ("oscore-proxy", "det-oscore-proxy", "ndn", "coap-proxy")
SERVER_HOST = "server"


class SimulationError(RuntimeError):
    pass


class TopologyError(ValueError):
    pass


# links ---------------------------------------------------------------------


@dataclass
class LinkModel:
    loss: float = 0.0
    mac_retries: int = 3
    backoff: tuple[float, ...] = (0.004, 0.008, 0.016)
    bitrate: float = 250_000.0
    latency: float = 0.0005
    ack_bytes: int = 5
    max_frame: int = 127
    frame_overhead: int = 25

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError(f"loss probability {self.loss} outside [0, 1]")
        if self.mac_retries < 0 or not self.backoff:
            raise ValueError("MAC retries must be >= 0 with a non-empty backoff schedule")
        if self.max_frame <= self.frame_overhead:
            raise ValueError("frame overhead leaves no room for payload")

    def frame_time(self, nbytes: int) -> float:
        return nbytes * 8 / self.bitrate

    def fragments(self, message_bytes: int) -> list[int]:
        """Frame sizes needed to carry a message of ``message_bytes``."""
        room = self.max_frame - self.frame_overhead
        n = max(1, math.ceil(message_bytes / room))
        sizes = [room] * (n - 1) + [message_bytes - room * (n - 1)]
        return [s + self.frame_overhead for s in sizes]


@dataclass(frozen=True)
class TxOutcome:
    delivered: bool
    attempts: int
    occupancy: float
    delivery_offset: Optional[float] = None


def transmit(link: LinkModel, frame_len: int, rng: random.Random, drop: Optional[Callable[[], bool]] = None) -> TxOutcome:
    """Send one frame with up to ``1 + mac_retries`` attempts.

    Each attempt loses the data frame with probability ``link.loss`` and,
    if the data got through, loses the ACK with the same probability. The
    receiver keeps only the first copy. ``drop`` replaces the random draw
    for data frames (ACKs then never fail).
    """
    t = 0.0
    delivered_at = None
    for attempt in range(1, link.mac_retries + 2):
        if attempt > 1:
            t += link.backoff[min(attempt - 2, len(link.backoff) - 1)]
        t += link.frame_time(frame_len)
        data_ok = not drop() if drop is not None else rng.random() >= link.loss
        if data_ok and delivered_at is None:
            delivered_at = t
        t += link.frame_time(link.ack_bytes)
        if data_ok and (drop is not None or rng.random() >= link.loss):
            return TxOutcome(True, attempt, t, delivered_at)
    return TxOutcome(delivered_at is not None, link.mac_retries + 1, t, delivered_at)


# topology ------------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: str  # client | forwarder | server

    def __post_init__(self):
        if self.role not in ("client", "forwarder", "server"):
            raise TopologyError(f"node {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    loss: Optional[float] = None
    latency: Optional[float] = None


class Topology:
    """Undirected node graph; every link is usable in both directions."""

    def __init__(self, nodes: Iterable[NodeSpec], links: Iterable[LinkSpec], chain: Sequence[str] = (), name: str = "custom"):
        self.name = name
        self.nodes: dict[str, NodeSpec] = {}
        for n in nodes:
            if n.name in self.nodes:
                raise TopologyError(f"duplicate node {n.name!r}")
            if n.name == LOCAL:
                raise TopologyError(f"node name {LOCAL!r} is reserved")
            self.nodes[n.name] = n
        self.graph = nx.Graph()
        self.graph.add_nodes_from(self.nodes)
        self.links: dict[tuple[str, str], LinkSpec] = {}
        for link in links:
            for end in (link.a, link.b):
                if end not in self.nodes:
                    raise TopologyError(f"link {link.a}-{link.b} names unknown node {end!r}")
            if link.a == link.b:
                raise TopologyError(f"self-loop on {link.a!r}")
            self.graph.add_edge(link.a, link.b)
            self.links[(link.a, link.b)] = link
            self.links[(link.b, link.a)] = link
        self.chain = list(chain)
        if not self.nodes:
            raise TopologyError("topology has no nodes")
        if not nx.is_connected(self.graph):
            raise TopologyError("topology is not connected")
        servers = self.by_role("server")
        if len(servers) != 1:
            raise TopologyError(f"expected exactly one server, found {len(servers)}")
        self.server = servers[0]
        self._paths = dict(nx.all_pairs_shortest_path(self.graph))

    def by_role(self, role: str) -> list[str]:
        return [n for n, spec in self.nodes.items() if spec.role == role]

    @property
    def clients(self) -> list[str]:
        return sorted(self.by_role("client"), key=_natural)

    @property
    def forwarders(self) -> list[str]:
        return sorted(self.by_role("forwarder"), key=_natural)

    def next_hop(self, src: str, dst: str) -> str:
        path = self._paths[src][dst]
        if len(path) < 2:
            raise TopologyError(f"no next hop from {src} to itself")
        return path[1]

    def path(self, src: str, dst: str) -> list[str]:
        return list(self._paths[src][dst])

    def neighbors(self, node: str) -> list[str]:
        return sorted(self.graph.neighbors(node), key=_natural)


def _natural(name: str):
    head = name.rstrip("0123456789")
    tail = name[len(head):]
    return (head, int(tail) if tail else -1)


def paper_tree(chain_loss: Optional[float] = None) -> Topology:
    """17 nodes: client1 on the server, client9 behind f1..f7, clients 8..2 on f1..f7."""
    nodes = [NodeSpec("server", "server")]
    nodes += [NodeSpec(f"f{k}", "forwarder") for k in range(1, 8)]
    nodes += [NodeSpec(f"client{k}", "client") for k in range(1, 10)]
    links = [LinkSpec("client1", "server"), LinkSpec("f7", "server"), LinkSpec("client9", "f1")]
    links += [LinkSpec(f"f{k}", f"f{k + 1}", loss=chain_loss) for k in range(1, 7)]
    links += [LinkSpec(f"client{9 - k}", f"f{k}") for k in range(1, 8)]
    return Topology(nodes, links, chain=[f"f{k}" for k in range(1, 8)], name="paper-tree")


def chain(forwarders: int, clients: int = 1, loss: Optional[float] = None) -> Topology:
    """``clientN .. client1 - f1 - ... - fK - server``; all clients hang off f1 (or the server if K=0)."""
    fw = [f"f{k}" for k in range(1, forwarders + 1)]
    nodes = [NodeSpec("server", "server")] + [NodeSpec(f, "forwarder") for f in fw]
    nodes += [NodeSpec(f"client{k}", "client") for k in range(1, clients + 1)]
    edge = fw[0] if fw else "server"
    links = [LinkSpec(f"client{k}", edge, loss=loss) for k in range(1, clients + 1)]
    hops = fw + ["server"]
    links += [LinkSpec(a, b, loss=loss) for a, b in zip(hops, hops[1:])]
    return Topology(nodes, links, chain=fw, name=f"chain-{forwarders}")


def single_link(loss: Optional[float] = None) -> Topology:
    return chain(0, 1, loss)


PRESETS: dict[str, Callable[..., Topology]] = {
    "paper-tree": paper_tree,
    "chain": chain,
    "single-link": single_link,
}


# workload ------------------------------------------------------------------


@dataclass
class Workload:
    requests_per_client: int = 1000
    period: float = 1.0
    jitter: float = 0.5
    resource: str = "/instruction?t={x}"
    clients: Optional[list[str]] = None
    start: float = 0.0

    def __post_init__(self):
        if self.requests_per_client < 0 or self.period <= 0 or not 0 <= self.jitter < self.period:
            raise ValueError("workload needs requests >= 0, period > 0 and 0 <= jitter < period")

    def path(self, x: int) -> str:
        return self.resource.format(x=x)


class InstructionFeed(Mapping[str, bytes]):
    """Origin resources: one instruction per refresh period, addressed by sequence number."""

    def __init__(self, workload: Workload):
        self.workload = workload
        self._index = {workload.path(x): x for x in range(workload.requests_per_client)}

    def __getitem__(self, path: str) -> bytes:
        x = self._index[path]
        return f"instruction {x}: set level {(x * 37) % 100}".encode()

    def __iter__(self):
        return iter(self._index)

    def __len__(self):
        return len(self._index)


# trace ---------------------------------------------------------------------


class RawTrace:
    """Ordered list of trace records; serialized as JSON lines."""

    def __init__(self, records: Optional[list[dict]] = None, meta: Optional[dict] = None):
        self.records: list[dict] = records if records is not None else []
        self.meta = meta or {}

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def lines(self) -> Iterator[str]:
        if self.meta:
            yield json.dumps({"ev": "meta", **self.meta}, sort_keys=True, separators=(",", ":"))
        for rec in self.records:
            yield json.dumps(rec, sort_keys=True, separators=(",", ":"))

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def _jsonable(v: Any) -> Any:
    if isinstance(v, (bytes, bytearray)):
        return v.hex()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


# nodes ---------------------------------------------------------------------


@dataclass
class Frame:
    src: str  # transmitting neighbor
    origin: str  # network-layer source
    dst: str  # network-layer destination
    kind: str  # req | resp
    body: Any  # encoded CoAP bytes or an NDN packet
    size: int


@dataclass
class Node:
    name: str
    role: str
    counters: sec.CryptoCounters = field(default_factory=sec.CryptoCounters)
    engine: Any = None
    app: Any = None
    origin: Any = None
    radio_free: float = 0.0
    cpu_free: float = 0.0
    _last_counts: tuple = (0, 0, 0, 0)

    @property
    def stats(self):
        return getattr(self.engine, "stats", None)


@dataclass
class CryptoConfig:
    signing_delay: float = 0.020
    master_secret: Optional[bytes] = None
    group_secret: Optional[bytes] = None
    signing_seed: Optional[bytes] = None
    ndn_content_key: Optional[bytes] = None
    ndn_signing_key: Optional[bytes] = None


@dataclass
class Outstanding:
    x: int
    issued_at: float
    binding: Optional[sec.RequestBinding] = None


class CoapClientApp:
    def __init__(self, sim: "Simulation", node: Node, ctx: Optional[sec.SecurityContext]):
        self.sim = sim
        self.node = node
        self.ctx = ctx
        self.outstanding: dict[bytes, Outstanding] = {}
        self._tokens = itertools.count(1)

    def issue(self, x: int, now: float) -> list:
        tok = next(self._tokens).to_bytes(4, "big")
        uri = f"coap://{SERVER_HOST}{self.sim.workload.path(x)}"
        plain = request(Code.GET, uri, token=tok, message_id=x & 0xFFFF, msg_type=MsgType.CON)
        mode = self.sim.mode
        binding = None
        if mode in ("oscore", "oscore-proxy"):
            plain = sec.protect_request(self.ctx, plain)
            binding = sec.RequestBinding.of(plain)
        elif mode == "det-oscore-proxy":
            plain = sec.deterministic_protect_request(self.ctx, plain)
            binding = sec.RequestBinding.of(plain)
        self.outstanding[tok] = Outstanding(x, now, binding)
        self.sim.record(now, "issue", node=self.node.name, x=x, tok=tok.hex())
        return self.node.engine.handle_client_request(plain, LOCAL, now)

    def on_deliver(self, msg: Message, now: float) -> None:
        out = self.outstanding.pop(msg.token, None)
        if out is None:
            return
        ok = False
        if msg.code.is_success:
            if out.binding is None:
                inner = msg
            else:
                try:
                    inner = sec.unprotect_response(self.ctx, out.binding, msg)
                except sec.SecurityError:
                    inner = None
            ok = inner is not None and inner.code == Code.CONTENT
        self.sim.finish(now, self.node.name, out.x, out.issued_at, ok, msg.code.dotted)


class NdnConsumerApp:
    def __init__(self, sim: "Simulation", node: Node, keys: DataKeys):
        self.sim = sim
        self.node = node
        self.keys = keys
        self.outstanding: dict[tuple, Outstanding] = {}

    def issue(self, x: int, now: float) -> list:
        name = name_from_uri(f"coap://{SERVER_HOST}{self.sim.workload.path(x)}")
        self.outstanding[name] = Outstanding(x, now)
        self.sim.record(now, "issue", node=self.node.name, x=x, tok="/".join(name))
        return self.node.engine.on_interest(Interest(name, self.sim.nonce_rng.getrandbits(32)), LOCAL, now)

    def on_deliver(self, data: DataPacket, now: float) -> None:
        out = self.outstanding.pop(data.name, None)
        if out is None:
            return
        try:
            self.keys.open_data(data, self.node.counters)
            ok = True
        except sec.SecurityError:
            ok = False
        self.sim.finish(now, self.node.name, out.x, out.issued_at, ok, "data")


class CoapOrigin:
    def __init__(self, sim: "Simulation", node: Node, contexts: dict, group: Optional[sec.SecurityContext]):
        self.sim = sim
        self.node = node
        self.contexts = contexts  # kid -> server-side pairwise context
        self.group = group
        self.feed = InstructionFeed(sim.workload)
        self._answered: dict[tuple[bytes, bytes], bytes] = {}

    def handle(self, m: Message, now: float) -> tuple[Optional[Message], float]:
        mode = self.sim.mode
        try:
            if mode in ("oscore", "oscore-proxy"):
                piv, kid = sec.decode_oscore_option(m.get_option(sec.OptionNumber.OSCORE) or b"")
                ctx = self.contexts.get(kid)
                if ctx is None:
                    return Message(Code.UNAUTHORIZED, MsgType.NON, m.message_id, m.token), 0.0
                retransmission = self._answered.get((kid, piv)) == m.payload
                inner, binding = sec.unprotect_request(ctx, m, replay_ok=retransmission)
                self._answered[(kid, piv)] = m.payload
                resp = serve_origin(inner, self.feed)
                return sec.protect_response(ctx, binding, resp), 0.0
            if mode == "det-oscore-proxy":
                inner, binding = sec.deterministic_unprotect_request(self.group, m)
                resp = serve_origin(inner, self.feed)
                protected = sec.protect_response(self.group, binding, resp)
                return sec.sign_response(self.group, protected), self.sim.crypto.signing_delay
        except sec.SecurityError:
            return Message(Code.UNAUTHORIZED, MsgType.NON, m.message_id, m.token), 0.0
        return serve_origin(m, self.feed), 0.0


class NdnProducer:
    def __init__(self, sim: "Simulation", node: Node, keys: DataKeys):
        self.sim = sim
        self.node = node
        self.keys = keys
        self.feed = InstructionFeed(sim.workload)
        self._paths = {name_from_uri(f"coap://{SERVER_HOST}{p}"): p for p in self.feed}

    def handle(self, i: Interest, now: float) -> tuple[Optional[DataPacket], float]:
        path = self._paths.get(i.name)
        if path is None:
            return None, 0.0
        body = self.feed[path]
        return self.keys.make_data(i.name, body, self.node.counters), self.sim.crypto.signing_delay


class Router:
    """Plain network-layer relay for end-to-end deployments."""


# simulation ----------------------------------------------------------------


class Simulation:
    """One deployment run over a topology.

    ``loss_script(src, dst, k)`` overrides random loss: it is asked about the
    k-th frame (0-based, per directed link) and a True answer loses every MAC
    attempt of that frame.
    """

    def __init__(
        self,
        topology: Topology,
        mode: str,
        workload: Optional[Workload] = None,
        *,
        seed: int = 1,
        link: Optional[LinkModel] = None,
        proxy: Optional[ProxyConfig] = None,
        crypto: Optional[CryptoConfig] = None,
        drain: float = 10.0,
        trace_detail: str = "full",
        loss_script: Optional[Callable[[str, str, int], bool]] = None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown deployment mode {mode!r}; expected one of {', '.join(MODES)}")
        if trace_detail not in ("full", "summary"):
            raise ValueError("trace_detail must be 'full' or 'summary'")
        self.topology = topology
        self.mode = mode
        self.workload = workload or Workload()
        self.seed = seed
        self.link_defaults = link or LinkModel()
        self.proxy_config = proxy or ProxyConfig()
        self.crypto = crypto or CryptoConfig()
        self.drain = drain
        self.trace_detail = trace_detail
        self.loss_script = loss_script

        self.link_rng = random.Random(f"links/{seed}")
        self.nonce_rng = random.Random(f"nonces/{seed}")
        self.trace = RawTrace(meta={
            "mode": mode, "seed": seed, "topology": topology.name,
            "server": topology.server,
            "chain": list(topology.chain),
            "upstream": {n: topology.next_hop(n, topology.server) for n in topology.nodes if n != topology.server},
            "clients": self.workload.clients if self.workload.clients is not None else topology.clients,
            "rounds": self.workload.requests_per_client,
            "period": self.workload.period,
            "start": self.workload.start,
        })
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self._frames: dict[tuple[str, str], Iterator[int]] = defaultdict(itertools.count)
        self._links = {k: self._link_model(spec) for k, spec in topology.links.items()}
        self.nodes: dict[str, Node] = {}
        self.issued = 0
        self.expected = 0
        self._build()

    # construction --------------------------------------------------------

    def _link_model(self, spec: LinkSpec) -> LinkModel:
        d = self.link_defaults
        return LinkModel(
            loss=d.loss if spec.loss is None else spec.loss,
            mac_retries=d.mac_retries,
            backoff=d.backoff,
            bitrate=d.bitrate,
            latency=d.latency if spec.latency is None else spec.latency,
            ack_bytes=d.ack_bytes,
            max_frame=d.max_frame,
            frame_overhead=d.frame_overhead,
        )

    def _key(self, label: str, n: int) -> bytes:
        return random.Random(f"keys/{self.seed}/{label}").randbytes(n)

    def _observer(self, event: str, **fields) -> None:
        if self.trace_detail == "full":
            self.record(self.now, "px." + event, **{k: _jsonable(v) for k, v in fields.items()})

    def _build(self) -> None:
        topo, mode, c = self.topology, self.mode, self.crypto
        server = topo.server
        master = c.master_secret or self._key("master", 16)
        group_secret = c.group_secret or self._key("group", 16)
        signer = Ed25519PrivateKey.from_private_bytes(c.signing_seed or self._key("ed25519", 32))
        ndn_keys = DataKeys(c.ndn_content_key or self._key("ndn-content", 16), c.ndn_signing_key or self._key("ndn-sign", 32))
        server_id = b"\x00"
        server_contexts: dict[bytes, sec.SecurityContext] = {}

        for name, spec in topo.nodes.items():
            self.nodes[name] = Node(name, spec.role)
        server_node = self.nodes[server]

        clients = self.workload.clients if self.workload.clients is not None else topo.clients
        for cname in clients:
            if cname not in topo.nodes or topo.nodes[cname].role != "client":
                raise TopologyError(f"workload names {cname!r}, which is not a client node")

        for idx, name in enumerate(topo.clients, start=1):
            node = self.nodes[name]
            if mode == "ndn":
                node.engine = self._ndn_forwarder(name, ndn_keys, node.counters)
                node.app = NdnConsumerApp(self, node, ndn_keys)
                continue
            cid = idx.to_bytes(2, "big")
            ctx = None
            if mode in ("oscore", "oscore-proxy"):
                ctx, server_ctx = sec.standard_pair(
                    cid, server_id, master, client_counters=node.counters, server_counters=server_node.counters
                )
                server_contexts[cid] = server_ctx
            elif mode == "det-oscore-proxy":
                ctx = sec.group_member(cid, server_id, group_secret, verify_key=signer.public_key(), counters=node.counters)
            fib = Fib()
            if mode == "oscore":
                fib.add("*", NextHop(server, True))
            else:
                nh = topo.next_hop(name, server)
                fib.add(f"coap://{SERVER_HOST}/*", NextHop(nh, nh != server))
            node.engine = ForwardProxy(name, fib, ProxyConfig(
                self.proxy_config.request_timeout, self.proxy_config.max_request_retries,
                self.proxy_config.cache_capacity, "client",
            ), observer=self._observer)
            node.app = CoapClientApp(self, node, ctx)

        for name in topo.forwarders:
            node = self.nodes[name]
            if mode == "oscore":
                node.engine = Router()
            elif mode == "ndn":
                node.engine = self._ndn_forwarder(name, ndn_keys, node.counters)
            else:
                nh = topo.next_hop(name, server)
                fib = Fib().add(f"coap://{SERVER_HOST}/*", NextHop(nh, nh != server))
                node.engine = ForwardProxy(name, fib, ProxyConfig(
                    self.proxy_config.request_timeout, self.proxy_config.max_request_retries,
                    self.proxy_config.cache_capacity, "forwarder",
                ), observer=self._observer)

        if mode == "ndn":
            server_node.origin = NdnProducer(self, server_node, ndn_keys)
        else:
            group = None
            if mode == "det-oscore-proxy":
                group = sec.group_member(server_id, server_id, group_secret, signing_key=signer, counters=server_node.counters)
            server_node.origin = CoapOrigin(self, server_node, server_contexts, group)

        w = self.workload
        jitter_rng = random.Random(f"jitter/{self.seed}")
        for x in range(w.requests_per_client):
            for cname in clients:
                at = w.start + x * w.period + jitter_rng.uniform(0.0, w.jitter)
                self._push(at, "app", cname, x)
                self.expected += 1

    def _ndn_forwarder(self, name: str, keys: DataKeys, counters: sec.CryptoCounters) -> NdnForwarder:
        server = self.topology.server
        fib = NameFib().add((SERVER_HOST,), self.topology.next_hop(name, server))
        return NdnForwarder(
            name, fib,
            interest_lifetime=self.proxy_config.request_timeout,
            max_retries=self.proxy_config.max_request_retries,
            cs_capacity=self.proxy_config.cache_capacity,
            verifier=lambda d: keys.verify(d, counters),
            observer=self._observer,
        )

    # event plumbing ------------------------------------------------------

    def _push(self, at: float, kind: str, node: str, payload: Any) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), kind, node, payload))

    def record(self, t: float, ev: str, **fields) -> None:
        rec = {"t": round(t, 9), "ev": ev}
        rec.update(fields)
        self.trace.append(rec)

    def finish(self, now: float, client: str, x: int, issued_at: float, ok: bool, code: str) -> None:
        self.record(now, "deliver", node=client, x=x, ok=ok, rt=round(now - issued_at, 9), code=code)

    def _note_crypto(self, node: Node) -> None:
        c = node.counters
        counts = (c.aead_ops, c.sign_ops, c.verify_ops, c.hmac_ops)
        if counts != node._last_counts:
            prev = node._last_counts
            delta = {k: a - b for k, a, b in zip(("aead", "sign", "verify", "hmac"), counts, prev) if a != b}
            node._last_counts = counts
            self.record(self.now, "crypto", node=node.name, **delta)

    def send(self, node: Node, dst: str, body: Any, kind: str, origin: Optional[str] = None) -> None:
        """Hand a message to ``node``'s radio, addressed to ``dst`` (multi-hop if needed)."""
        now = self.now
        nxt = self.topology.next_hop(node.name, dst)
        link = self._links[(node.name, nxt)]
        if isinstance(body, (bytes, bytearray)):
            size = len(body)
        else:
            size = body.size
        start = max(now, node.radio_free)
        t = start
        attempts = []
        delivered = True
        arrival = None
        for frag in link.fragments(size):
            drop = None
            if self.loss_script is not None:
                idx = next(self._frames[(node.name, nxt)])
                drop = (lambda i=idx, a=node.name, b=nxt: self.loss_script(a, b, i))
            out = transmit(link, frag, self.link_rng, drop)
            attempts.append(out.attempts)
            if not out.delivered:
                delivered = False
                t += out.occupancy
                break
            arrival = t + out.delivery_offset
            t += out.occupancy
        node.radio_free = t
        self.record(
            start, "tx", node=node.name, to=nxt, kind=kind, bytes=size,
            frags=len(attempts), attempts=sum(attempts), ok=delivered, dst=dst,
        )
        if delivered:
            frame = Frame(node.name, origin or node.name, dst, kind, body, size)
            self._push(arrival + link.latency, "rx", nxt, frame)

    def _execute(self, node: Node, actions: Iterable) -> None:
        for a in actions:
            if isinstance(a, SendTo):
                if isinstance(a.message, Message):
                    kind = "req" if a.message.is_request else "resp"
                    self.send(node, a.address, encode_message(a.message), kind)
                else:
                    kind = "req" if isinstance(a.message, Interest) else "resp"
                    self.send(node, a.address, a.message, kind)
            elif isinstance(a, DeliverLocal):
                node.app.on_deliver(a.message, self.now)
            elif isinstance(a, StartTimer):
                self._push(a.at, "timer", node.name, a.token)
            else:
                raise SimulationError(f"unknown action {a!r}")

    # handlers ------------------------------------------------------------

    def _on_rx(self, node: Node, frame: Frame) -> None:
        self.record(self.now, "rx", node=node.name, frm=frame.src, kind=frame.kind)
        if frame.dst != node.name:
            if not isinstance(node.engine, Router):
                raise SimulationError(f"{node.name} received a frame for {frame.dst} but does not route")
            self.send(node, frame.dst, frame.body, frame.kind, origin=frame.origin)
            return
        if node.role == "server":
            self._on_server_rx(node, frame)
            return
        engine = node.engine
        if isinstance(engine, NdnForwarder):
            if isinstance(frame.body, Interest):
                actions = engine.on_interest(frame.body, frame.src, self.now)
            else:
                actions = engine.on_data(frame.body, frame.src, self.now)
        else:
            m = decode_message(frame.body)
            if m.is_request:
                if node.role == "client":
                    return
                actions = engine.handle_client_request(m, frame.origin, self.now)
            else:
                actions = engine.handle_upstream_response(m, frame.origin, self.now)
        self._execute(node, actions)

    def _on_server_rx(self, node: Node, frame: Frame) -> None:
        if isinstance(frame.body, Interest):
            resp, busy = node.origin.handle(frame.body, self.now)
            body = resp
        elif isinstance(frame.body, DataPacket):
            return
        else:
            m = decode_message(frame.body)
            if not m.is_request:
                return
            resp, busy = node.origin.handle(m, self.now)
            body = encode_message(resp) if resp is not None else None
        if body is None:
            return
        self._note_crypto(node)
        if busy > 0:
            node.cpu_free = self.now + busy
            self._push(node.cpu_free, "emit", node.name, (frame.origin, body))
        else:
            self.send(node, frame.origin, body, "resp")

    def run(self) -> RawTrace:
        w = self.workload
        last_issue = w.start + max(w.requests_per_client - 1, 0) * w.period + w.jitter
        end = last_issue + self.drain
        while self._queue:
            at, _, kind, name, payload = self._queue[0]
            if at > end:
                break
            heapq.heappop(self._queue)
            node = self.nodes[name]
            if node.cpu_free > at and kind != "emit":
                # the node is busy signing; handle the event once it is free
                self._push(node.cpu_free, kind, name, payload)
                continue
            self.now = at
            if kind == "app":
                self.issued += 1
                self._execute(node, node.app.issue(payload, at))
            elif kind == "rx":
                self._on_rx(node, payload)
            elif kind == "timer":
                self._execute(node, node.engine.on_timer(payload, at))
            elif kind == "emit":
                dst, body = payload
                self.send(node, dst, body, "resp")
            self._note_crypto(node)
        if self.issued != self.expected:
            raise SimulationError(
                f"event queue ran dry after {self.issued} of {self.expected} scheduled requests"
            )
        if self.expected:
            self._finalize()
        return self.trace

    def _finalize(self) -> None:
        for name in sorted(self.nodes, key=_natural):
            node = self.nodes[name]
            stats = node.stats
            fields = {"role": node.role, **node.counters.as_dict()}
            if stats is not None:
                fields["stats"] = dict(vars(stats))
            self.record(self.now, "node", node=name, **fields)
        for app_node in self.nodes.values():
            if app_node.app is None:
                continue
            for out in sorted(app_node.app.outstanding.values(), key=lambda o: o.x):
                self.record(self.now, "deliver", node=app_node.name, x=out.x, ok=False, rt=None, code="none")


def build_simulation(config) -> Simulation:
    """Instantiate a :class:`Simulation` from a validated scenario config."""
    from .scenario import build_scenario

    return build_scenario(config)
