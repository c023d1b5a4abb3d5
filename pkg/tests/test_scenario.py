import typing

import pytest

from wotcast.scenario import (
    ScenarioConfig,
    ScenarioError,
    build_scenario,
    load_scenario,
    parse_scenario,
)
from wotcast.simnet import MODES

TOML = """
name = "small"
mode = "ndn"
seed = 9

[topology]
preset = "chain"
chain_length = 2
clients = 3
chain_loss = 0.1

[workload]
requests_per_client = 4
"""


def test_modes_match_simulator():
    assert set(typing.get_args(ScenarioConfig.model_fields["mode"].annotation)) == set(MODES)


def test_defaults_describe_the_tree():
    cfg = parse_scenario({})
    sim = build_scenario(cfg)
    assert cfg.mode == "det-oscore-proxy" and len(sim.topology.nodes) == 17
    assert sim.workload.requests_per_client == 1000
    assert sim.crypto.signing_delay == pytest.approx(0.020)
    assert sim.link_defaults.backoff == pytest.approx((0.004, 0.008, 0.016))


def test_parse_toml_text():
    cfg = parse_scenario(TOML)
    sim = build_scenario(cfg)
    assert (cfg.name, cfg.mode, cfg.seed) == ("small", "ndn", 9)
    assert sim.topology.path("client3", "server") == ["client3", "f1", "f2", "server"]
    assert sim.topology.links[("f1", "f2")].loss == 0.1


def test_load_file(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(TOML)
    assert load_scenario(p) == parse_scenario(TOML)
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.toml")


def test_shipped_scenario_is_valid():
    cfg = load_scenario("scenarios/paper_tree.toml")
    build_scenario(cfg)


@pytest.mark.parametrize("doc, msg", [
    ({"colour": "red"}, "colour"),
    ({"link": {"los": 0.1}}, "link.los"),
    ({"mode": "http"}, "mode"),
    ({"link": {"loss": 1.5}}, "link.loss"),
    ({"topology": {}}, "preset or an explicit"),
    ({"topology": {"preset": "chain", "nodes": [{"name": "s", "role": "server"}]}}, "not both"),
    ({"crypto": {"master_secret": "zz"}}, "master_secret"),
    ({"crypto": {"signing_seed": "00"}}, "32 bytes"),
    ({"crypto": {"ndn_content_key": "00" * 15}}, "16 bytes"),
    ("mode = ", "invalid TOML"),
])
def test_rejects_bad_documents(doc, msg):
    with pytest.raises(ScenarioError, match=msg):
        parse_scenario(doc)


def test_explicit_topology():
    cfg = parse_scenario({
        "mode": "coap-proxy",
        "topology": {
            "nodes": [{"name": "server", "role": "server"}, {"name": "p", "role": "forwarder"},
                      {"name": "a", "role": "client"}, {"name": "b", "role": "client"}],
            "links": [{"a": "a", "b": "p"}, {"a": "b", "b": "p", "loss": 0.5, "latency_ms": 2},
                      {"a": "p", "b": "server"}],
            "chain": ["p"],
        },
        "workload": {"requests_per_client": 3},
    })
    sim = build_scenario(cfg)
    assert sim.topology.links[("p", "b")].latency == pytest.approx(0.002)
    assert sim.topology.clients == ["a", "b"]
    assert sum(1 for r in sim.run() if r["ev"] == "deliver") == 6


def test_structural_errors_become_scenario_errors():
    bad = {"topology": {"nodes": [{"name": "a", "role": "client"}], "links": []}}
    with pytest.raises(ScenarioError, match="server"):
        build_scenario(parse_scenario(bad))
    with pytest.raises(ScenarioError, match="not a client"):
        build_scenario(parse_scenario({"workload": {"clients": ["f3"]}}))


def test_overrides():
    cfg = parse_scenario(TOML)
    new = cfg.with_overrides(**{"seed": 2, "workload.requests_per_client": 7, "output.dir": None})
    assert (new.seed, new.workload.requests_per_client, new.output.dir) == (2, 7, None)
    assert cfg.seed == 9
    with pytest.raises(ScenarioError, match="link.loss"):
        cfg.with_overrides(**{"link.loss": 3.0})
