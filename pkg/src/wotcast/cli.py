"""Command-line entry point: ``wotcast run|suite|validate``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .metrics import export, reduce_trace, run_suite
from .scenario import ScenarioConfig, ScenarioError, build_scenario, load_scenario
from .simnet import MODES, SimulationError

SWEEP_MODES = ("oscore", "oscore-proxy", "det-oscore-proxy", "ndn")


def _overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    changes = {"seed": args.seed, "output.dir": args.out}
    if getattr(args, "rounds", None) is not None:
        changes["workload.requests_per_client"] = args.rounds
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    if args.loss is not None:
        if cfg.topology.preset is not None:
            changes["topology.chain_loss"] = args.loss
        else:
            changes["link.loss"] = args.loss
    return cfg.with_overrides(**changes)


def _cmd_validate(args) -> int:
    cfg = _overrides(load_scenario(args.scenario), args)
    build_scenario(cfg)
    print(f"{args.scenario}: ok ({cfg.mode}, {cfg.workload.requests_per_client} rounds, seed {cfg.seed})")
    return 0


def _cmd_run(args) -> int:
    cfg = _overrides(load_scenario(args.scenario), args)
    sim = build_scenario(cfg)
    trace = sim.run()
    bundle = reduce_trace(trace)
    outdir = Path(cfg.output.dir or "out")
    files = export(bundle, outdir)
    if cfg.output.trace:
        trace.write(outdir / "trace.jsonl")
        files.append(outdir / "trace.jsonl")
    s = bundle.summary()
    print(f"mode {cfg.mode}, seed {cfg.seed}: {bundle.total_successes}/{sum(bundle.issued.values())} retrievals, "
          f"{s['server_responses_per_round']:.2f} server responses/round")
    for f in files:
        print(f"  wrote {f}")
    return 0


def _cmd_suite(args) -> int:
    base = _overrides(load_scenario(args.scenario), args)
    modes = args.modes.split(",") if args.modes else list(SWEEP_MODES)
    for m in modes:
        if m not in MODES:
            raise ScenarioError(f"unknown mode {m!r}")
    configs = [base.with_overrides(mode=m, name=m) for m in modes]
    report = run_suite(configs, jobs=args.jobs)
    print(report.table())
    for f in report.export(Path(base.output.dir or "out")):
        print(f"  wrote {f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wotcast", description="Multiparty CoAP/NDN retrieval simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenario", help="scenario TOML file")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--loss", type=float, help="override the loss probability")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--rounds", type=int, help="override requests per client")

    r = sub.add_parser("run", help="run one scenario and export its metrics")
    common(r)
    r.add_argument("--mode", choices=MODES, help="override the deployment mode")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("suite", help="run the scenario under several deployment modes")
    common(s)
    s.add_argument("--modes", help=f"comma-separated modes (default {','.join(SWEEP_MODES)})")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=_cmd_suite)

    v = sub.add_parser("validate", help="check a scenario file")
    common(v)
    v.add_argument("--mode", choices=MODES, help="override the deployment mode")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SimulationError, ValueError, OSError) as exc:
        print(f"wotcast: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
