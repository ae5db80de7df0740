"""Two-operator federation simulator driven by replayed RTT traces.

Clients alternate active and inactive periods.  On activation a client binds
one trace per operator and subscribes to an operator picked uniformly.  At the
end of every slot each operator migrates its ``ceil(gamma * n)`` worst-RTT
subscribers to the peer operator; migrations take effect at the next slot.

Slot order: pending migrations, phase transitions, RTT collection, migration
selection, then clocks advance.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .core import DescriptorQuery
from .prng import SplitMix64, derive_seed
from .traces import NetworkTrace, TraceError, TraceRepository, open_trace

OPERATORS = ("op1", "op2")
ACTIVE, INACTIVE = "active", "inactive"
CSV_COLUMNS = ("gamma", "quantile", "mean", "ci_low", "ci_high", "migrations_per_slot_mean")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    num_clients: int = 100
    mean_period: float = 10.0
    gamma: float = 0.0
    num_slots: int = 200
    num_replications: int = 20
    seed: int = 0
    trace_query_op1: Mapping[str, Any] = field(default_factory=dict)
    trace_query_op2: Mapping[str, Any] = field(default_factory=dict)
    quantiles: tuple[float, ...] = (0.5, 0.75, 0.95)
    seconds_per_slot: float = 1.0
    # Same trace seed for both operators: with equal-sized candidate lists the
    # two traces of a client sit at the same position of their lists.
    paired_traces: bool = False
    circular: bool = True

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if self.mean_period < 1:
            raise ValueError("mean_period must be at least one slot")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.num_slots < 0 or self.num_replications < 1:
            raise ValueError("num_slots must be >= 0 and num_replications >= 1")
        if self.seconds_per_slot <= 0:
            raise ValueError("seconds_per_slot must be positive")
        qs = tuple(float(q) for q in self.quantiles)
        if not all(0 < q < 1 for q in qs) or list(qs) != sorted(qs):
            raise ValueError("quantiles must be ascending values in (0, 1)")
        object.__setattr__(self, "quantiles", qs)
        for name in ("trace_query_op1", "trace_query_op2"):
            DescriptorQuery.from_mapping(getattr(self, name))

    def replace(self, **changes) -> SimulationConfig:
        return dataclasses.replace(self, **changes)


def draw_period(rng: SplitMix64, mean_period: float) -> int:
    """Whole-slot period with mean ``mean_period``.

    The continuous exponential is rounded up; its rate is chosen so that the
    rounded value (a geometric variable) has the requested mean exactly.
    """
    if mean_period < 1:
        raise ValueError("mean_period must be at least one slot")
    if mean_period == 1:
        return 1
    rate = -math.log1p(-1.0 / mean_period)
    u = rng.uniform()
    return max(1, math.ceil(-math.log1p(-u) / rate))


def migration_count(gamma: float, n: int) -> int:
    """``ceil(gamma * n)``, with the product rounded to 9 decimals first so 0.1 * 30 gives 3."""
    return math.ceil(round(gamma * n, 9))


def select_migrants(rtts: Mapping[int, float], gamma: float) -> list[int]:
    """The ``ceil(gamma * n)`` highest-RTT clients of one operator; ties by client id."""
    k = migration_count(gamma, len(rtts))
    return sorted(rtts, key=lambda cid: (-rtts[cid], cid))[:k]


@dataclass(frozen=True)
class Binding:
    """Traces a client holds for one active period."""

    trace_seeds: tuple[int, int]
    traces: tuple[NetworkTrace, NetworkTrace]

    def trace(self, operator: str) -> NetworkTrace:
        return self.traces[OPERATORS.index(operator)]


@dataclass
class ClientState:
    client_id: int
    phase: str = INACTIVE
    phase_remaining: int = 0
    operator: str | None = None
    binding: Binding | None = None
    local_clock: int = 0

    @property
    def trace_op1(self) -> NetworkTrace | None:
        return self.binding.traces[0] if self.binding else None

    @property
    def trace_op2(self) -> NetworkTrace | None:
        return self.binding.traces[1] if self.binding else None


@dataclass(frozen=True)
class SlotReport:
    slot: int
    subscribed: dict[str, int]
    rtts: dict[int, float]
    migrated: tuple[int, ...]
    operator_of: dict[int, str]  # active clients, after this slot's transitions
    inactive: int
    activated: dict[int, Binding] = field(default_factory=dict)

    def migrated_from(self, operator: str) -> list[int]:
        return [c for c in self.migrated if self.operator_of[c] == operator]


class World:
    """Mutable state of one replication."""

    def __init__(self, config: SimulationConfig, repo: TraceRepository, seed: int):
        self.config = config
        self.repo = repo
        self.rng = SplitMix64(seed)
        self.queries = (
            DescriptorQuery.from_mapping(config.trace_query_op1),
            DescriptorQuery.from_mapping(config.trace_query_op2),
        )
        self.clients = [ClientState(i) for i in range(config.num_clients)]
        self.pending: list[int] = []
        self.activated: dict[int, Binding] = {}
        for c in self.clients:
            if self.rng.uniform() < 0.5:
                self._activate(c)
            else:
                c.phase_remaining = draw_period(self.rng, config.mean_period)

    def _bind(self) -> Binding:
        s1 = self.rng.next()
        s2 = s1 if self.config.paired_traces else self.rng.next()
        try:
            traces = tuple(
                open_trace(self.repo, q, s, self.config.circular) for q, s in zip(self.queries, (s1, s2))
            )
        except TraceError as exc:
            raise SimulationError(f"cannot bind traces: {exc}") from exc
        for t in traces:
            if not t.has_rtt:
                raise SimulationError(f"trace {t.sources} has no RTT series")
        return Binding((s1, s2), traces)

    def _activate(self, c: ClientState) -> None:
        c.phase = ACTIVE
        c.phase_remaining = draw_period(self.rng, self.config.mean_period)
        c.operator = OPERATORS[self.rng.choice_index(2)]
        c.binding = self._bind()
        c.local_clock = 0
        self.activated[c.client_id] = c.binding

    def _deactivate(self, c: ClientState) -> None:
        c.phase = INACTIVE
        c.phase_remaining = draw_period(self.rng, self.config.mean_period)
        c.operator = None
        c.binding = None

    def step(self, slot: int) -> SlotReport:
        cfg = self.config
        for cid in self.pending:
            c = self.clients[cid]
            c.operator = "op2" if c.operator == "op1" else "op1"
        self.pending = []
        for c in self.clients:
            if c.phase_remaining == 0:
                if c.phase == ACTIVE:
                    self._deactivate(c)
                else:
                    self._activate(c)
        rtts: dict[int, float] = {}
        by_op: dict[str, list[int]] = {op: [] for op in OPERATORS}
        for c in self.clients:
            if c.phase == ACTIVE:
                rtts[c.client_id] = c.binding.trace(c.operator).get_rtt(c.local_clock * cfg.seconds_per_slot)
                by_op[c.operator].append(c.client_id)
        migrated: list[int] = []
        for op in OPERATORS:
            migrated.extend(select_migrants({cid: rtts[cid] for cid in by_op[op]}, cfg.gamma))
        self.pending = migrated
        report = SlotReport(
            slot,
            {op: len(by_op[op]) for op in OPERATORS},
            rtts,
            tuple(migrated),
            {c.client_id: c.operator for c in self.clients if c.phase == ACTIVE},
            sum(c.phase == INACTIVE for c in self.clients),
            self.activated,
        )
        self.activated = {}
        for c in self.clients:
            c.phase_remaining -= 1
            if c.phase == ACTIVE:
                c.local_clock += 1
        return report


@dataclass
class ReplicationResult:
    seed: int
    pool: np.ndarray
    migrations: int
    reports: list[SlotReport] | None = None


def run_replication(
    config: SimulationConfig,
    replication_seed: int,
    repo: TraceRepository,
    keep_reports: bool = False,
) -> ReplicationResult:
    world = World(config, repo, replication_seed)
    pool: list[float] = []
    migrations = 0
    reports = [] if keep_reports else None
    for slot in range(config.num_slots):
        rep = world.step(slot)
        pool.extend(rep.rtts.values())
        migrations += len(rep.migrated)
        if reports is not None:
            reports.append(rep)
    return ReplicationResult(replication_seed, np.asarray(pool, dtype=float), migrations, reports)


def replication_seeds(config: SimulationConfig) -> list[int]:
    """Per-replication seeds; shared across the gamma grid (common random numbers)."""
    return [derive_seed(config.seed, r) for r in range(config.num_replications)]


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width over independent replication values."""
    x = np.asarray(values, dtype=float)
    mean = float(x.mean())
    if len(x) < 2:
        return mean, math.nan
    sd = float(x.std(ddof=1))
    if sd == 0:
        return mean, 0.0
    return mean, float(stats.t.ppf(0.5 + level / 2, len(x) - 1) * sd / math.sqrt(len(x)))


@dataclass
class SimulationResult:
    gamma: float
    quantiles: tuple[float, ...]
    per_replication: np.ndarray  # replications x quantiles
    means: np.ndarray
    half_widths: np.ndarray
    migrations: int
    num_slots: int
    pools: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def migrations_per_slot_mean(self) -> float:
        slots = self.num_slots * len(self.per_replication)
        return self.migrations / slots if slots else 0.0

    def ci(self, q: float) -> tuple[float, float]:
        i = self.quantiles.index(q)
        return self.means[i] - self.half_widths[i], self.means[i] + self.half_widths[i]

    def rows(self) -> list[dict[str, float]]:
        return [
            {
                "gamma": self.gamma,
                "quantile": q,
                "mean": float(self.means[i]),
                "ci_low": float(self.means[i] - self.half_widths[i]),
                "ci_high": float(self.means[i] + self.half_widths[i]),
                "migrations_per_slot_mean": self.migrations_per_slot_mean,
            }
            for i, q in enumerate(self.quantiles)
        ]


def summarize(config: SimulationConfig, replications: Sequence[ReplicationResult]) -> SimulationResult:
    qs = config.quantiles
    table = np.full((len(replications), len(qs)), math.nan)
    for r, rep in enumerate(replications):
        if rep.pool.size:
            table[r] = np.quantile(rep.pool, qs)
    means, halves = [], []
    for i in range(len(qs)):
        m, h = confidence_interval(table[:, i])
        means.append(m)
        halves.append(h)
    return SimulationResult(
        config.gamma,
        qs,
        table,
        np.asarray(means),
        np.asarray(halves),
        sum(rep.migrations for rep in replications),
        config.num_slots,
        [rep.pool for rep in replications],
    )


def run_study(
    config: SimulationConfig,
    gamma_grid: Iterable[float],
    repo: TraceRepository,
) -> list[SimulationResult]:
    grid = list(gamma_grid)
    if not grid:
        raise ValueError("gamma grid is empty")
    seeds = replication_seeds(config)
    results = []
    for g in grid:
        cfg = config.replace(gamma=float(g))
        reps = [run_replication(cfg, s, repo) for s in seeds]
        results.append(summarize(cfg, reps))
    return results


def write_csv(results: Iterable[SimulationResult], fh=None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for res in results:
        for row in res.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue() if fh is None else ""
