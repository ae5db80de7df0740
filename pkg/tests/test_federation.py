import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeperf.federation import (
    CSV_COLUMNS,
    SimulationConfig,
    SimulationError,
    confidence_interval,
    draw_period,
    migration_count,
    replication_seeds,
    run_replication,
    run_study,
    select_migrants,
    write_csv,
)
from edgeperf.fixtures import BIMODAL_STUDY, bundled_path
from edgeperf.prng import SplitMix64
from edgeperf.traces import TraceRepository
from helpers import rtt_only_repo, t_half_width_df2
from refsim import reference_pool

BIMODAL = SimulationConfig(**BIMODAL_STUDY)


def test_draw_period_mean():
    rng = SplitMix64(2024)
    for mean in (2.0, 10.0, 25.0):
        draws = [draw_period(rng, mean) for _ in range(100_000)]
        assert min(draws) >= 1
        assert abs(np.mean(draws) - mean) / mean < 0.02


def test_draw_period_degenerate():
    assert draw_period(SplitMix64(1), 1) == 1
    with pytest.raises(ValueError):
        draw_period(SplitMix64(1), 0.5)


@pytest.mark.parametrize("gamma,n,k", [(0, 10, 0), (0.1, 30, 3), (0.1, 31, 4), (0.05, 1, 1), (1, 7, 7), (0.3, 0, 0)])
def test_migration_count(gamma, n, k):
    assert migration_count(gamma, n) == k


def test_select_migrants_examples():
    assert select_migrants({1: 10.0, 2: 50.0, 3: 30.0}, 0.5) == [2, 3]
    assert select_migrants({5: 9.0, 2: 9.0, 7: 1.0}, 0.5) == [2, 5]  # tie broken by id
    assert select_migrants({}, 0.5) == []
    assert select_migrants({1: 1.0}, 0.0) == []


@given(st.dictionaries(st.integers(0, 200), st.floats(0, 500), max_size=40), st.floats(0, 1))
def test_select_migrants_properties(rtts, gamma):
    chosen = select_migrants(rtts, gamma)
    assert len(chosen) == math.ceil(round(gamma * len(rtts), 9))
    assert len(set(chosen)) == len(chosen)
    kept = set(rtts) - set(chosen)
    if chosen and kept:
        assert min(rtts[c] for c in chosen) >= max(rtts[c] for c in kept)


@given(st.dictionaries(st.integers(0, 100), st.floats(0, 500), min_size=1, max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_selection_monotone_in_gamma(rtts, g1, g2):
    lo, hi = sorted((g1, g2))
    small, big = select_migrants(rtts, lo), select_migrants(rtts, hi)
    assert big[: len(small)] == small


def test_confidence_interval_oracle():
    mean, half = confidence_interval([1.0, 2.0, 3.0])
    assert mean == 2.0
    # the library inverts the t CDF numerically (~1e-11 relative); the oracle is closed-form
    assert half == pytest.approx(t_half_width_df2([1.0, 2.0, 3.0]), rel=1e-9)
    assert confidence_interval([4.0, 4.0, 4.0]) == (4.0, 0.0)
    assert math.isnan(confidence_interval([4.0])[1])


def test_config_validation():
    for bad in ({"gamma": 1.5}, {"num_clients": 0}, {"mean_period": 0.5}, {"quantiles": (0.9, 0.5)},
                {"trace_query_op1": {"bogus": 1}}):
        with pytest.raises(ValueError):
            SimulationConfig(**bad)


# -- dynamics ---------------------------------------------------------------------

@pytest.mark.parametrize("gamma", [0.0, 0.3])
@pytest.mark.parametrize("paired", [False, True])
def test_matches_reference_simulator(bimodal_repo, gamma, paired):
    cfg = BIMODAL.replace(num_clients=12, num_slots=40, gamma=gamma, paired_traces=paired, mean_period=5)
    for seed in (1, 99):
        rep = run_replication(cfg, seed, bimodal_repo)
        pool, migrations = reference_pool(
            bundled_path("bimodal-rtt-pool"), seed, num_clients=12, mean_period=5, gamma=gamma,
            num_slots=40, query1=dict(cfg.trace_query_op1), query2=dict(cfg.trace_query_op2), paired=paired,
        )
        assert rep.pool.tolist() == pool
        assert rep.migrations == migrations


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([0.0, 0.1, 0.25, 0.5]), st.integers(1, 30))
def test_slot_invariants(seed, gamma, n):
    repo = TraceRepository.open(bundled_path("bimodal-rtt-pool"))
    cfg = BIMODAL.replace(num_clients=n, num_slots=30, gamma=gamma, mean_period=4)
    rep = run_replication(cfg, seed, repo, keep_reports=True)
    prev = None
    for r in rep.reports:
        # conservation: every client is active on one operator or inactive
        assert sum(r.subscribed.values()) + r.inactive == n
        assert len(r.operator_of) == sum(r.subscribed.values()) == len(r.rtts)
        for op in ("op1", "op2"):
            mig = r.migrated_from(op)
            assert len(mig) == migration_count(gamma, r.subscribed[op])
            kept = [c for c, o in r.operator_of.items() if o == op and c not in mig]
            if mig and kept:
                assert min(r.rtts[c] for c in mig) >= max(r.rtts[c] for c in kept)
        if prev is not None:
            # a migrant still active next slot (and not re-activated) sits on the other operator
            for c in prev.migrated:
                if c in r.operator_of and c not in r.activated:
                    assert r.operator_of[c] != prev.operator_of[c]
        prev = r


def test_replication_is_deterministic(bimodal_repo):
    cfg = BIMODAL.replace(num_slots=50, gamma=0.1)
    a = run_replication(cfg, 5, bimodal_repo)
    b = run_replication(cfg, 5, TraceRepository.open(bundled_path("bimodal-rtt-pool")))
    assert np.array_equal(a.pool, b.pool) and a.migrations == b.migrations


def test_gamma_zero_never_migrates(bimodal_repo):
    rep = run_replication(BIMODAL.replace(num_slots=100), 3, bimodal_repo, keep_reports=True)
    assert rep.migrations == 0
    assert all(not r.migrated for r in rep.reports)


def test_constant_trace_gives_zero_width(tmp_path):
    flat = [(i, 20.0) for i in range(10)]
    root = rtt_only_repo(tmp_path, {"a": ("wifi", flat), "b": ("lte", flat)})
    cfg = SimulationConfig(num_clients=10, num_slots=20, num_replications=5, gamma=0.2,
                           trace_query_op1={"access_technology": "wifi"},
                           trace_query_op2={"access_technology": "lte"})
    (res,) = run_study(cfg, [0.2], TraceRepository.open(root))
    assert res.means.tolist() == [20.0, 20.0, 20.0]
    assert res.half_widths.tolist() == [0.0, 0.0, 0.0]


def test_missing_trace_is_simulation_error(tmp_path):
    root = rtt_only_repo(tmp_path, {"a": ("wifi", [(0, 1.0), (1, 2.0)])})
    cfg = SimulationConfig(num_clients=4, num_slots=2, trace_query_op2={"access_technology": "lte"})
    with pytest.raises(SimulationError):
        run_replication(cfg, 0, TraceRepository.open(root))


def test_seeds_shared_across_grid():
    cfg = SimulationConfig(num_replications=4, seed=9)
    assert replication_seeds(cfg) == replication_seeds(cfg.replace(gamma=0.5))
    assert len(set(replication_seeds(cfg))) == 4


def test_csv_output(bimodal_repo):
    cfg = BIMODAL.replace(num_clients=20, num_slots=20, num_replications=3)
    results = run_study(cfg, [0.0, 0.1], bimodal_repo)
    text = write_csv(results)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2 * 3
    buf = io.StringIO()
    write_csv(results, buf)
    assert buf.getvalue() == text
    first = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert float(first["gamma"]) == 0.0 and float(first["quantile"]) == 0.5
    assert float(first["ci_low"]) <= float(first["mean"]) <= float(first["ci_high"])
    assert float(first["migrations_per_slot_mean"]) == 0.0
