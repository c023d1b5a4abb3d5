"""Scenario files: TOML documents validated into a :class:`ScenarioConfig`.

Example::

    mode = "det-oscore-proxy"
    seed = 7

    [topology]
    preset = "paper-tree"
    chain_loss = 0.2

    [workload]
    requests_per_client = 100

    [output]
    dir = "out/det"
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .proxy import ProxyConfig
from .simnet import (
    CryptoConfig,
    LinkModel,
    LinkSpec,
    NodeSpec,
    Simulation,
    Topology,
    Workload,
    chain,
    paper_tree,
    single_link,
)


class ScenarioError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NodeEntry(_Strict):
    name: str
    role: Literal["client", "forwarder", "server"]


class LinkEntry(_Strict):
    a: str
    b: str
    loss: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    latency_ms: Optional[float] = Field(default=None, ge=0.0)


class TopologySection(_Strict):
    preset: Optional[Literal["paper-tree", "chain", "single-link"]] = None
    chain_length: int = Field(default=3, ge=0)
    clients: int = Field(default=1, ge=1)
    chain_loss: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    nodes: list[NodeEntry] = []
    links: list[LinkEntry] = []
    chain: list[str] = []

    @model_validator(mode="after")
    def _one_source(self):
        if self.preset is None and not self.nodes:
            raise ValueError("topology needs a preset or an explicit node list")
        if self.preset is not None and (self.nodes or self.links):
            raise ValueError("give either a preset or explicit nodes/links, not both")
        return self


class LinkSection(_Strict):
    loss: float = Field(default=0.0, ge=0.0, le=1.0)
    mac_retries: int = Field(default=3, ge=0)
    backoff_ms: list[float] = [4.0, 8.0, 16.0]
    bitrate: float = Field(default=250_000.0, gt=0)
    latency_ms: float = Field(default=0.5, ge=0.0)
    max_frame: int = Field(default=127, gt=0)
    frame_overhead: int = Field(default=25, ge=0)


class WorkloadSection(_Strict):
    requests_per_client: int = Field(default=1000, ge=0)
    period: float = Field(default=1.0, gt=0)
    jitter: float = Field(default=0.5, ge=0)
    resource: str = "/instruction?t={x}"
    clients: Optional[list[str]] = None
    drain: float = Field(default=10.0, ge=0)


class ProxySection(_Strict):
    request_timeout: float = Field(default=2.0, gt=0)
    max_request_retries: int = Field(default=3, ge=0)
    cache_capacity: int = Field(default=40, gt=0)


def _hex(v: Optional[str]) -> Optional[str]:
    if v is not None:
        bytes.fromhex(v)
    return v


class CryptoSection(_Strict):
    signing_delay_ms: float = Field(default=20.0, ge=0)
    master_secret: Optional[str] = None
    group_secret: Optional[str] = None
    signing_seed: Optional[str] = None
    ndn_content_key: Optional[str] = None
    ndn_signing_key: Optional[str] = None

    _check_hex = field_validator(
        "master_secret", "group_secret", "signing_seed", "ndn_content_key", "ndn_signing_key"
    )(_hex)

    @field_validator("signing_seed")
    @classmethod
    def _seed_len(cls, v):
        if v is not None and len(bytes.fromhex(v)) != 32:
            raise ValueError("signing_seed must be 32 bytes of hex")
        return v

    @field_validator("ndn_content_key")
    @classmethod
    def _aes_len(cls, v):
        if v is not None and len(bytes.fromhex(v)) != 16:
            raise ValueError("ndn_content_key must be 16 bytes of hex")
        return v


class OutputSection(_Strict):
    dir: Optional[str] = None
    trace: bool = False


class ScenarioConfig(_Strict):
    name: str = "scenario"
    mode: Literal["oscore", "oscore-proxy", "det-oscore-proxy", "ndn", "coap-proxy"] = "det-oscore-proxy"
    seed: int = 1
    trace_detail: Literal["full", "summary"] = "full"
    topology: TopologySection = TopologySection(preset="paper-tree")
    link: LinkSection = LinkSection()
    workload: WorkloadSection = WorkloadSection()
    proxy: ProxySection = ProxySection()
    crypto: CryptoSection = CryptoSection()
    output: OutputSection = OutputSection()

    def with_overrides(self, **changes: Any) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``{"workload.requests_per_client": 10}``."""
        data = self.model_dump()
        for dotted, value in changes.items():
            if value is None:
                continue
            *parents, leaf = dotted.split(".")
            target = data
            for p in parents:
                target = target[p]
            target[leaf] = value
        try:
            return ScenarioConfig.model_validate(data)
        except ValidationError as exc:
            raise ScenarioError(_format_errors(exc)) from None


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_scenario(data: Union[dict, str]) -> ScenarioConfig:
    """Validate a mapping or TOML text into a config."""
    if isinstance(data, str):
        try:
            data = tomllib.loads(data)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"invalid TOML: {exc}") from None
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(_format_errors(exc)) from None


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text)


def build_topology(section: TopologySection) -> Topology:
    if section.preset == "paper-tree":
        return paper_tree(section.chain_loss)
    if section.preset == "chain":
        return chain(section.chain_length, section.clients, section.chain_loss)
    if section.preset == "single-link":
        return single_link(section.chain_loss)
    nodes = [NodeSpec(n.name, n.role) for n in section.nodes]
    links = [
        LinkSpec(l.a, l.b, l.loss, None if l.latency_ms is None else l.latency_ms / 1000.0)
        for l in section.links
    ]
    return Topology(nodes, links, chain=section.chain)


def _unhex(v: Optional[str]) -> Optional[bytes]:
    return bytes.fromhex(v) if v is not None else None


def build_scenario(config: ScenarioConfig) -> Simulation:
    """Instantiate nodes, FIBs, contexts and the workload described by ``config``."""
    if isinstance(config, (dict, str)):
        config = parse_scenario(config)
    try:
        topo = build_topology(config.topology)
        lk = config.link
        link = LinkModel(
            loss=lk.loss,
            mac_retries=lk.mac_retries,
            backoff=tuple(b / 1000.0 for b in lk.backoff_ms),
            bitrate=lk.bitrate,
            latency=lk.latency_ms / 1000.0,
            max_frame=lk.max_frame,
            frame_overhead=lk.frame_overhead,
        )
        w = config.workload
        workload = Workload(w.requests_per_client, w.period, w.jitter, w.resource, w.clients)
        px = config.proxy
        proxy = ProxyConfig(px.request_timeout, px.max_request_retries, px.cache_capacity)
        c = config.crypto
        crypto = CryptoConfig(
            c.signing_delay_ms / 1000.0,
            _unhex(c.master_secret),
            _unhex(c.group_secret),
            _unhex(c.signing_seed),
            _unhex(c.ndn_content_key),
            _unhex(c.ndn_signing_key),
        )
        return Simulation(
            topo, config.mode, workload,
            seed=config.seed, link=link, proxy=proxy, crypto=crypto,
            drain=w.drain, trace_detail=config.trace_detail,
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None

