"""Straight-line reference federation simulator used as a test oracle.

It reads trace files with plain json and keeps all state in dicts, following the
documented slot order: apply last slot's migrations, run phase transitions, read
RTTs, pick migrants, advance clocks.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from edgeperf.prng import SplitMix64
from helpers import aligned_oracle, hold_oracle, raw_series


def _candidates(root: Path, query: dict):
    doc = json.loads((root / "manifest.json").read_text())
    return [e["file"] for e in doc["traces"] if all(e["descriptor"].get(k) == v for k, v in query.items())]


def _period(rng, mean):
    if mean == 1:
        return 1
    u = (rng.next() >> 11) / 2**53
    return max(1, math.ceil(math.log(1 - u) / math.log(1 - 1 / mean)))


def reference_pool(root, seed, *, num_clients, mean_period, gamma, num_slots, query1, query2,
                   paired=False, seconds_per_slot=1.0):
    root = Path(root)
    cands = (_candidates(root, query1), _candidates(root, query2))
    series = {}

    def rtt_of(file, clock):
        if file not in series:
            _, rel, dur = aligned_oracle([], raw_series(root / file), True)
            series[file] = (rel, dur)
        rel, dur = series[file]
        return hold_oracle(rel, round(clock * seconds_per_slot * 1e6), dur, True)

    rng = SplitMix64(seed)
    st = {}

    def activate(c):
        st[c] = {"active": True, "left": _period(rng, mean_period), "op": rng.next() % 2}
        s1 = rng.next()
        s2 = s1 if paired else rng.next()
        st[c]["files"] = tuple(cs[SplitMix64(s).next() % len(cs)] for cs, s in zip(cands, (s1, s2)))
        st[c]["clock"] = 0

    for c in range(num_clients):
        if (rng.next() >> 11) / 2**53 < 0.5:
            activate(c)
        else:
            st[c] = {"active": False, "left": _period(rng, mean_period)}

    pool, pending, migrations = [], [], 0
    for _ in range(num_slots):
        for c in pending:
            st[c]["op"] = 1 - st[c]["op"]
        for c in range(num_clients):
            if st[c]["left"] == 0:
                if st[c]["active"]:
                    st[c] = {"active": False, "left": _period(rng, mean_period)}
                else:
                    activate(c)
        rtts = {}
        for c in range(num_clients):
            if st[c]["active"]:
                rtts[c] = rtt_of(st[c]["files"][st[c]["op"]], st[c]["clock"])
                pool.append(rtts[c])
        pending = []
        for op in (0, 1):
            mine = [c for c in rtts if st[c]["op"] == op]
            k = math.ceil(round(gamma * len(mine), 9))
            mine.sort(key=lambda c: (-rtts[c], c))
            pending += mine[:k]
        migrations += len(pending)
        for c in range(num_clients):
            st[c]["left"] -= 1
            if st[c]["active"]:
                st[c]["clock"] += 1
    return pool, migrations
