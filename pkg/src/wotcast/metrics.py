"""Reduce simulator traces to metric families and write them as CSV/JSON.

The four families are retrieval times (per client samples and success
rate), the server's response transmissions per second, request/response
counts on every hop of the shared forwarder chain, and cryptographic
operations per successful retrieval.
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .simnet import RawTrace

OPS = ("aead", "sign", "verify", "hmac")
STEADY_MARGIN = 10.0  # seconds trimmed at both ends of the server-rate series

# terminal outcomes at a hop, keyed by stats field, per engine flavor
_TERMINATED = ("cache_hits", "cs_hits", "aggregated", "fib_misses", "duplicate_nonce", "no_route")


class TraceError(ValueError):
    """A trace record is malformed; ``line`` is 1-based."""

    def __init__(self, line: int, msg: str):
        super().__init__(f"trace line {line}: {msg}")
        self.line = line


_REQUIRED: dict[str, tuple[str, ...]] = {
    "issue": ("t", "node", "x"),
    "deliver": ("t", "node", "x", "ok", "rt"),
    "tx": ("t", "node", "to", "kind", "bytes", "frags", "attempts", "ok"),
    "rx": ("t", "node", "frm", "kind"),
    "crypto": ("t", "node"),
    "node": ("node", "role", *OPS),
}


@dataclass
class LinkCount:
    requests: int = 0
    responses: int = 0
    request_frames: int = 0
    response_frames: int = 0
    requests_lost: int = 0


@dataclass
class MetricsBundle:
    mode: str = ""
    seed: Optional[int] = None
    rounds: int = 0
    period: float = 1.0
    start: float = 0.0
    server: str = "server"
    chain: list[str] = field(default_factory=list)
    upstream: dict[str, str] = field(default_factory=dict)
    clients: list[str] = field(default_factory=list)
    retrieval: dict[str, list[float]] = field(default_factory=dict)
    issued: dict[str, int] = field(default_factory=dict)
    successes: dict[str, int] = field(default_factory=dict)
    server_tx: dict[int, int] = field(default_factory=dict)
    links: dict[tuple[str, str], LinkCount] = field(default_factory=dict)
    rx_requests: dict[str, Counter] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)
    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    node_stats: dict[str, dict[str, int]] = field(default_factory=dict)

    # retrieval --------------------------------------------------------------

    def success_rate(self, client: str) -> float:
        n = self.issued.get(client, 0)
        return self.successes.get(client, 0) / n if n else 0.0

    @property
    def total_successes(self) -> int:
        return sum(self.successes.values())

    def cdf(self, client: str) -> list[tuple[float, float]]:
        xs = sorted(self.retrieval.get(client, []))
        n = len(xs)
        return [(x, (i + 1) / n) for i, x in enumerate(xs)]

    # server rate ------------------------------------------------------------

    @property
    def server_responses(self) -> int:
        return sum(self.server_tx.values())

    @property
    def server_responses_per_round(self) -> float:
        return self.server_responses / self.rounds if self.rounds else 0.0

    def steady_window(self) -> tuple[float, float]:
        lo, hi = self.start, self.start + self.rounds * self.period
        if hi - lo > 2 * STEADY_MARGIN:
            return lo + STEADY_MARGIN, hi - STEADY_MARGIN
        return lo, hi

    def steady_server_rate(self) -> float:
        """Mean responses per second over the steady window (trims warm-up and drain)."""
        lo, hi = self.steady_window()
        if hi <= lo:
            return 0.0
        secs = range(math.ceil(lo), math.floor(hi))
        if not secs:
            return 0.0
        return sum(self.server_tx.get(s, 0) for s in secs) / len(secs)

    # link stress ------------------------------------------------------------

    def link(self, a: str, b: str) -> LinkCount:
        return self.links.get((a, b), LinkCount())

    def chain_stress(self) -> list[dict[str, Any]]:
        rows = []
        for f in self.chain:
            up = self.upstream.get(f)
            if up is None:
                continue
            out, back = self.link(f, up), self.link(up, f)
            rows.append({
                "node": f,
                "upstream": up,
                "requests_up": out.requests,
                "responses_from_up": back.responses,
                "total": out.requests + back.responses,
                "request_frames": out.request_frames,
                "response_frames": back.response_frames,
            })
        return rows

    # crypto -----------------------------------------------------------------

    def crypto_totals(self, role: str) -> dict[str, int]:
        tot = dict.fromkeys(OPS, 0)
        for node, r in self.roles.items():
            if r == role:
                for op in OPS:
                    tot[op] += self.counters[node][op]
        return tot

    def crypto_per_retrieval(self, role: str) -> dict[str, float]:
        n = self.total_successes
        tot = self.crypto_totals(role)
        return {op: (tot[op] / n if n else 0.0) for op in OPS}

    def node_crypto_per_retrieval(self, node: str) -> dict[str, float]:
        n = self.successes.get(node, 0) if self.roles.get(node) == "client" else self.total_successes
        c = self.counters.get(node, dict.fromkeys(OPS, 0))
        return {op: (c[op] / n if n else 0.0) for op in OPS}

    # checks -----------------------------------------------------------------

    def accounting_violations(self) -> list[str]:
        """Request conservation along the chain: what a hop sends minus losses arrives
        upstream, and what arrives is either forwarded or terminated locally."""
        problems = []
        for f in self.chain:
            up = self.upstream.get(f)
            if up is None:
                continue
            lk = self.link(f, up)
            arrived = self.rx_requests.get(up, Counter()).get(f, 0)
            if lk.requests - lk.requests_lost != arrived:
                problems.append(f"{f}->{up}: sent {lk.requests}, lost {lk.requests_lost}, arrived {arrived}")
        for f in self.chain:
            stats = self.node_stats.get(f)
            up = self.upstream.get(f)
            if stats is None or up is None:
                continue
            received = sum(self.rx_requests.get(f, Counter()).values())
            terminated = sum(stats.get(k, 0) for k in _TERMINATED)
            forwarded_new = self.link(f, up).requests - stats.get("retransmissions", 0)
            if received - terminated != forwarded_new:
                problems.append(f"{f}: received {received}, terminated {terminated}, forwarded {forwarded_new}")
        return problems

    def summary(self) -> dict[str, Any]:
        clients = {}
        for c in self.clients:
            xs = self.retrieval.get(c, [])
            clients[c] = {
                "issued": self.issued.get(c, 0),
                "successes": self.successes.get(c, 0),
                "success_rate": self.success_rate(c),
                "mean_retrieval_s": float(np.mean(xs)) if xs else None,
                "median_retrieval_s": float(np.median(xs)) if xs else None,
            }
        return {
            "mode": self.mode,
            "seed": self.seed,
            "rounds": self.rounds,
            "clients": clients,
            "server_responses": self.server_responses,
            "server_responses_per_round": self.server_responses_per_round,
            "server_rate_steady": self.steady_server_rate(),
            "steady_window_s": list(self.steady_window()),
            "chain": self.chain_stress(),
            "crypto_per_retrieval": {
                "client": self.crypto_per_retrieval("client"),
                "server": self.crypto_per_retrieval("server"),
                "forwarder": self.crypto_per_retrieval("forwarder"),
            },
        }


TraceSource = Union[RawTrace, str, os.PathLike, Iterable[Union[dict, str]]]


def _records(src: TraceSource) -> Iterable[tuple[int, Any]]:
    if isinstance(src, RawTrace):
        if src.meta:
            yield 1, {"ev": "meta", **src.meta}
        yield from enumerate(src.records, start=2 if src.meta else 1)
        return
    if isinstance(src, (str, os.PathLike)):
        with open(src, encoding="utf-8") as fh:
            yield from _records(list(fh))
        return
    for i, item in enumerate(src, start=1):
        if isinstance(item, str):
            if not item.strip():
                continue
            try:
                item = json.loads(item)
            except json.JSONDecodeError as exc:
                raise TraceError(i, f"invalid JSON ({exc.msg})") from None
        yield i, item


def reduce_trace(trace: TraceSource) -> MetricsBundle:
    """Fold a trace into a :class:`MetricsBundle`.

    Accepts a :class:`RawTrace`, a path to a JSON-lines file, or an iterable
    of records (dicts or JSON strings). Retrieval time runs from request
    issue to application delivery, retransmission delays included.
    """
    b = MetricsBundle()
    link_counts: dict[tuple[str, str], LinkCount] = defaultdict(LinkCount)
    rx_req: dict[str, Counter] = defaultdict(Counter)
    issued: Counter = Counter()
    succ: Counter = Counter()
    retrieval: dict[str, list[float]] = defaultdict(list)
    server_tx: Counter = Counter()
    pending_server_tx: list[tuple[str, float]] = []
    meta_seen = False

    for line, rec in _records(trace):
        if not isinstance(rec, dict):
            raise TraceError(line, "record is not an object")
        ev = rec.get("ev")
        if not isinstance(ev, str):
            raise TraceError(line, "missing event type")
        if ev == "meta":
            meta_seen = True
            b.mode = rec.get("mode", "")
            b.seed = rec.get("seed")
            b.rounds = int(rec.get("rounds", 0))
            b.period = float(rec.get("period", 1.0))
            b.start = float(rec.get("start", 0.0))
            b.server = rec.get("server", "server")
            b.chain = list(rec.get("chain", []))
            b.upstream = dict(rec.get("upstream", {}))
            b.clients = list(rec.get("clients", []))
            continue
        if ev.startswith("px."):
            continue
        need = _REQUIRED.get(ev)
        if need is None:
            raise TraceError(line, f"unknown event {ev!r}")
        missing = [k for k in need if k not in rec]
        if missing:
            raise TraceError(line, f"{ev} record lacks {', '.join(missing)}")
        if "t" in need and not isinstance(rec["t"], (int, float)):
            raise TraceError(line, "timestamp is not a number")

        if ev == "issue":
            issued[rec["node"]] += 1
        elif ev == "deliver":
            if rec["ok"]:
                rt = rec["rt"]
                if not isinstance(rt, (int, float)) or rt < 0:
                    raise TraceError(line, "successful delivery without a valid retrieval time")
                succ[rec["node"]] += 1
                retrieval[rec["node"]].append(float(rt))
        elif ev == "tx":
            kind = rec["kind"]
            if kind not in ("req", "resp"):
                raise TraceError(line, f"unknown tx kind {kind!r}")
            lk = link_counts[(rec["node"], rec["to"])]
            if kind == "req":
                lk.requests += 1
                lk.request_frames += int(rec["attempts"])
            else:
                lk.responses += 1
                lk.response_frames += int(rec["attempts"])
            if kind == "req" and not rec["ok"]:
                lk.requests_lost += 1
            if kind == "resp":
                pending_server_tx.append((rec["node"], float(rec["t"])))
        elif ev == "rx":
            if rec["kind"] == "req":
                rx_req[rec["node"]][rec["frm"]] += 1
        elif ev == "node":
            b.roles[rec["node"]] = rec["role"]
            b.counters[rec["node"]] = {op: int(rec[op]) for op in OPS}
            stats = rec.get("stats")
            if stats is not None:
                b.node_stats[rec["node"]] = dict(stats)

    if not meta_seen:
        b.clients = sorted(set(issued) | set(succ))
    for node, t in pending_server_tx:
        if node == b.server:
            server_tx[int(math.floor(t))] += 1
    b.issued = dict(issued)
    b.successes = {c: succ.get(c, 0) for c in set(issued) | set(succ)}
    for c in b.clients:
        b.successes.setdefault(c, 0)
        b.issued.setdefault(c, 0)
    b.retrieval = {c: sorted(v) for c, v in retrieval.items()}
    b.server_tx = dict(sorted(server_tx.items()))
    b.links = dict(link_counts)
    b.rx_requests = dict(rx_req)
    return b


# export --------------------------------------------------------------------

CSV_SCHEMAS: dict[str, tuple[str, ...]] = {
    "retrieval_cdf.csv": ("client", "retrieval_s", "cdf"),
    "retrieval_summary.csv": ("client", "issued", "successes", "success_rate", "mean_retrieval_s", "median_retrieval_s"),
    "server_rate.csv": ("second", "responses"),
    "link_stress.csv": ("node", "upstream", "requests_up", "responses_from_up", "total", "request_frames", "response_frames"),
    "crypto.csv": ("scope", "aead", "sign", "verify", "hmac", "aead_per_retrieval", "sign_per_retrieval", "verify_per_retrieval", "hmac_per_retrieval"),
}


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def export(bundle: MetricsBundle, outdir: Union[str, os.PathLike], formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write one CSV per metric family and/or ``summary.json`` into ``outdir``."""
    bad = set(formats) - {"csv", "json"}
    if bad:
        raise ValueError(f"unknown export format(s): {', '.join(sorted(bad))}")
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    written: list[Path] = []
    summary = bundle.summary()

    if "csv" in formats:
        rows = {name: [] for name in CSV_SCHEMAS}
        for c in bundle.clients:
            rows["retrieval_cdf.csv"] += [(c, _fmt(x), _fmt(p)) for x, p in bundle.cdf(c)]
            s = summary["clients"][c]
            rows["retrieval_summary.csv"].append((
                c, s["issued"], s["successes"], _fmt(s["success_rate"]),
                _fmt(s["mean_retrieval_s"]), _fmt(s["median_retrieval_s"]),
            ))
        rows["server_rate.csv"] = list(bundle.server_tx.items())
        rows["link_stress.csv"] = [tuple(r[k] for k in CSV_SCHEMAS["link_stress.csv"]) for r in bundle.chain_stress()]
        scopes = [("client", bundle.crypto_totals("client"), bundle.crypto_per_retrieval("client")),
                  ("server", bundle.crypto_totals("server"), bundle.crypto_per_retrieval("server"))]
        if bundle.counters:
            scopes += [(n, bundle.counters[n], bundle.node_crypto_per_retrieval(n)) for n in bundle.counters]
        else:
            scopes = []
        rows["crypto.csv"] = [
            (scope, *(tot[op] for op in OPS), *(_fmt(per[op]) for op in OPS)) for scope, tot, per in scopes
        ]
        for name, header in CSV_SCHEMAS.items():
            path = out / name
            _write_csv(path, header, rows[name])
            written.append(path)

    if "json" in formats:
        path = out / "summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    return written


# suite ---------------------------------------------------------------------

SUITE_COLUMNS = (
    "name", "mode", "seed", "rounds", "success_rate", "min_client_success",
    "server_responses_per_round", "server_rate_steady",
    "client_aead", "client_verify", "client_hmac",
    "server_aead", "server_sign", "server_hmac",
)


def _run_one(config) -> MetricsBundle:
    from .scenario import build_scenario

    return reduce_trace(build_scenario(config).run())


@dataclass
class SuiteReport:
    names: list[str]
    bundles: list[MetricsBundle]

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for name, b in zip(self.names, self.bundles):
            issued = sum(b.issued.values())
            rates = [b.success_rate(c) for c in b.clients]
            cl, sv = b.crypto_per_retrieval("client"), b.crypto_per_retrieval("server")
            out.append({
                "name": name,
                "mode": b.mode,
                "seed": b.seed,
                "rounds": b.rounds,
                "success_rate": b.total_successes / issued if issued else 0.0,
                "min_client_success": min(rates) if rates else 0.0,
                "server_responses_per_round": b.server_responses_per_round,
                "server_rate_steady": b.steady_server_rate(),
                "client_aead": cl["aead"], "client_verify": cl["verify"], "client_hmac": cl["hmac"],
                "server_aead": sv["aead"], "server_sign": sv["sign"], "server_hmac": sv["hmac"],
            })
        return out

    def client_rows(self) -> list[tuple]:
        return [
            (name, b.mode, c, b.success_rate(c), b.summary()["clients"][c]["median_retrieval_s"])
            for name, b in zip(self.names, self.bundles)
            for c in b.clients
        ]

    def table(self) -> str:
        cols = ("name", "mode", "success_rate", "min_client_success", "server_responses_per_round", "server_aead", "server_sign")
        rows = self.rows()
        width = max([len(c) for c in cols] + [len(str(r[c])) for r in rows for c in ("name", "mode")])

        def cell(v):
            return f"{v:>{width}.3f}" if isinstance(v, float) else f"{str(v):>{width}}"

        lines = [" ".join(f"{c:>{width}}" for c in cols)]
        lines += [" ".join(cell(r[c]) for c in cols) for r in rows]
        return "\n".join(lines)

    def export(self, outdir: Union[str, os.PathLike]) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        p1 = out / "suite.csv"
        _write_csv(p1, SUITE_COLUMNS, [[r[c] for c in SUITE_COLUMNS] for r in rows])
        p2 = out / "suite_clients.csv"
        _write_csv(p2, ("name", "mode", "client", "success_rate", "median_retrieval_s"),
                   [(n, m, c, _fmt(s), _fmt(md)) for n, m, c, s, md in self.client_rows()])
        p3 = out / "suite.json"
        p3.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return [p1, p2, p3]


def run_suite(configs: Sequence, jobs: int = 1) -> SuiteReport:
    """Run every config and reduce its trace; ``jobs > 1`` uses worker processes."""
    configs = list(configs)
    names = [getattr(c, "name", f"run{i}") for i, c in enumerate(configs)]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            bundles = list(pool.map(_run_one, configs))
    else:
        bundles = [_run_one(c) for c in configs]
    return SuiteReport(names, bundles)
