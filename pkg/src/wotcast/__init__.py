"""Data-centric CoAP forwarding with object security, an NDN baseline, and a lossy-network simulator."""
from .coap import Code, Message, MsgType, Option, OptionNumber, compute_cache_key, decode_message, encode_message
from .metrics import MetricsBundle, export, reduce_trace, run_suite
from .proxy import Fib, ForwardProxy, NextHop, ProxyConfig
from .scenario import ScenarioConfig, build_scenario, load_scenario
from .simnet import LinkModel, RawTrace, Simulation, Topology, Workload, chain, paper_tree, single_link

__all__ = [
    "Code", "Message", "MsgType", "Option", "OptionNumber",
    "compute_cache_key", "decode_message", "encode_message",
    "Fib", "ForwardProxy", "NextHop", "ProxyConfig",
    "MetricsBundle", "export", "reduce_trace", "run_suite",
    "ScenarioConfig", "build_scenario", "load_scenario",
    "LinkModel", "RawTrace", "Simulation", "Topology", "Workload",
    "chain", "paper_tree", "single_link",
]
__version__ = "0.1.0"
