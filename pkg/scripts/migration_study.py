"""Quantile/CI study over a gamma grid on the bundled bimodal RTT pool.

    python3 scripts/migration_study.py --output results/migration.csv

Writes one CSV row per (gamma, quantile) and prints a short table to stderr.
"""
import argparse
import sys
import time

from edgeperf.federation import SimulationConfig, run_study, write_csv
from edgeperf.fixtures import BIMODAL_STUDY, bundled_path
from edgeperf.traces import TraceRepository

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--gammas", default="0,0.05,0.1,0.15,0.2,0.3,0.4,0.5")
p.add_argument("--replications", type=int, default=20)
p.add_argument("--num-slots", type=int, default=200)
p.add_argument("--num-clients", type=int, default=100)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--output", default="-")
args = p.parse_args()

cfg = SimulationConfig(num_clients=args.num_clients, num_slots=args.num_slots,
                       num_replications=args.replications, seed=args.seed, **BIMODAL_STUDY)
grid = [float(g) for g in args.gammas.split(",")]
t0 = time.perf_counter()
results = run_study(cfg, grid, TraceRepository.open(bundled_path("bimodal-rtt-pool")))
if args.output == "-":
    write_csv(results, sys.stdout)
else:
    with open(args.output, "w", newline="") as fh:
        write_csv(results, fh)

print(f"{'gamma':>6} {'p50':>9} {'p75':>9} {'p95':>9} {'migr/slot':>10}", file=sys.stderr)
for r in results:
    q = "".join(f" {m:9.3f}" for m in r.means)
    print(f"{r.gamma:6.2f}{q} {r.migrations_per_slot_mean:10.2f}", file=sys.stderr)
print(f"{len(grid)} gamma values x {args.replications} replications in {time.perf_counter() - t0:.1f} s",
      file=sys.stderr)
