"""Nine clients on a 17-node tree, once per deployment mode.

The server load column shows aggregation at work: end-to-end OSCORE answers
every client separately while the hop-wise modes with shared cache keys
answer twice per round. Pass a loss probability for the forwarder chain as
the first argument, e.g. ``python3 demos/tree_sweep.py 0.2``.
"""
import sys

from wotcast import Simulation, Workload, paper_tree, reduce_trace

loss = float(sys.argv[1]) if len(sys.argv) > 1 else 0.0
rounds = 100

print(f"{'mode':<18}{'server/round':>14}{'client1':>10}{'client9':>10}{'c9 median s':>13}")
for mode in ("oscore", "oscore-proxy", "det-oscore-proxy", "ndn"):
    sim = Simulation(paper_tree(loss or None), mode, Workload(requests_per_client=rounds), seed=1)
    b = reduce_trace(sim.run())
    med = b.summary()["clients"]["client9"]["median_retrieval_s"]
    print(f"{mode:<18}{b.server_responses_per_round:>14.2f}{b.success_rate('client1'):>10.3f}"
          f"{b.success_rate('client9'):>10.3f}{med if med is not None else float('nan'):>13.3f}")
