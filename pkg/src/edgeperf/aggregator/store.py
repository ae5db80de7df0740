"""Embedded SQLite persistence for measurement batches.

Schema (version 1)::

    batches(batch_id INTEGER PRIMARY KEY AUTOINCREMENT, received_at_us INTEGER,
            source TEXT, submitter TEXT, idempotency_key TEXT UNIQUE)
    records(seq INTEGER PRIMARY KEY AUTOINCREMENT, id TEXT UNIQUE, batch_id INTEGER,
            run_id TEXT, method TEXT, metric TEXT, segment TEXT, direction TEXT,
            access_technology TEXT, cross_traffic_mbps REAL, num_clients INTEGER,
            timestamp_us INTEGER, value REAL, unit TEXT, attrs TEXT)

with indices on every descriptor column, ``run_id`` and ``timestamp_us``.
AUTOINCREMENT guarantees batch ids are never reused, even after deletes or restarts.
Each batch is written in one transaction with ``synchronous=FULL``.
"""
from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..core import (
    DescriptorQuery,
    MeasurementRecord,
    Method,
    MetricKind,
    TraceDescriptor,
    ValidationError,
    descriptor_matches,
    now_us,
    write_ndjson,
)
from ..traces import MANIFEST_NAME, ManifestEntry, atomic_write, manifest_text

SCHEMA = """
CREATE TABLE IF NOT EXISTS batches (
    batch_id INTEGER PRIMARY KEY AUTOINCREMENT,
    received_at_us INTEGER NOT NULL,
    source TEXT NOT NULL,
    submitter TEXT NOT NULL,
    idempotency_key TEXT UNIQUE
);
CREATE TABLE IF NOT EXISTS records (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    batch_id INTEGER NOT NULL REFERENCES batches(batch_id),
    run_id TEXT NOT NULL,
    method TEXT NOT NULL,
    metric TEXT NOT NULL,
    segment TEXT NOT NULL,
    direction TEXT NOT NULL,
    access_technology TEXT NOT NULL,
    cross_traffic_mbps REAL NOT NULL,
    num_clients INTEGER,
    timestamp_us INTEGER NOT NULL,
    value REAL NOT NULL,
    unit TEXT NOT NULL,
    attrs TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS records_method ON records(method);
CREATE INDEX IF NOT EXISTS records_metric ON records(metric);
CREATE INDEX IF NOT EXISTS records_segment ON records(segment);
CREATE INDEX IF NOT EXISTS records_direction ON records(direction);
CREATE INDEX IF NOT EXISTS records_tech ON records(access_technology);
CREATE INDEX IF NOT EXISTS records_cross ON records(cross_traffic_mbps);
CREATE INDEX IF NOT EXISTS records_clients ON records(num_clients);
CREATE INDEX IF NOT EXISTS records_run ON records(run_id);
CREATE INDEX IF NOT EXISTS records_time ON records(timestamp_us);
"""

SOURCES = ("active", "passive", "self")
_COLS = "id, run_id, method, metric, segment, direction, access_technology, cross_traffic_mbps, num_clients, timestamp_us, value, unit, attrs"


class StoreError(RuntimeError):
    pass


class ConflictError(StoreError):
    pass


@dataclass(frozen=True)
class QueryFilter:
    descriptor: DescriptorQuery = DescriptorQuery()
    start_us: int | None = None
    end_us: int | None = None
    run_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "descriptor", DescriptorQuery.from_mapping(self.descriptor))
        if self.start_us is not None and self.end_us is not None and self.start_us > self.end_us:
            raise ValidationError("start must not be after end", "time_range")

    def matches(self, record: MeasurementRecord) -> bool:
        if not descriptor_matches(record.descriptor, self.descriptor):
            return False
        if self.start_us is not None and record.timestamp_us < self.start_us:
            return False
        if self.end_us is not None and record.timestamp_us > self.end_us:
            return False
        return self.run_id is None or record.run_id == self.run_id

    def to_params(self) -> dict[str, str]:
        params = {k: str(v) for k, v in self.descriptor.to_dict().items()}
        if self.start_us is not None:
            params["start_us"] = str(self.start_us)
        if self.end_us is not None:
            params["end_us"] = str(self.end_us)
        if self.run_id is not None:
            params["run_id"] = self.run_id
        return params

    @classmethod
    def from_params(cls, params: dict[str, str]) -> QueryFilter:
        params = dict(params)
        extra = {}
        for key in ("start_us", "end_us"):
            if key in params:
                try:
                    extra[key] = int(params.pop(key))
                except ValueError:
                    raise ValidationError("must be integer microseconds", key) from None
        if "run_id" in params:
            extra["run_id"] = params.pop("run_id")
        try:
            if "num_clients" in params:
                params["num_clients"] = int(params["num_clients"])
            if "cross_traffic_mbps" in params:
                params["cross_traffic_mbps"] = float(params["cross_traffic_mbps"])
        except ValueError as exc:
            raise ValidationError(str(exc), "query") from None
        return cls(DescriptorQuery.from_mapping(params), **extra)


def validate_batch(records: Sequence[MeasurementRecord], source: str) -> TraceDescriptor:
    if source not in SOURCES:
        raise ValidationError(f"must be one of {', '.join(SOURCES)}", "source")
    if not records:
        raise ValidationError("a batch needs at least one record", "records")
    desc = records[0].descriptor
    for i, r in enumerate(records):
        if r.descriptor != desc:
            raise ValidationError("all records in a batch must share one descriptor", f"records[{i}].descriptor")
    if desc.method.value != source:
        raise ValidationError(f"source {source!r} does not match method {desc.method.value!r}", "source")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate record ids", "records")
    return desc


def _row(record: MeasurementRecord, batch_id: int) -> tuple:
    d = record.descriptor
    return (
        record.id,
        batch_id,
        record.run_id,
        d.method.value,
        str(d.metric),
        d.segment.value,
        d.direction.value,
        d.access_technology.value,
        d.cross_traffic_mbps,
        d.num_clients,
        record.timestamp_us,
        record.value,
        record.unit,
        json.dumps(dict(record.attrs), sort_keys=True),
    )


def _from_row(row) -> MeasurementRecord:
    (rid, run_id, method, metric, segment, direction, tech, cross, clients, ts, value, unit, attrs) = row
    return MeasurementRecord(
        descriptor=TraceDescriptor(method, metric, segment, direction, tech, cross, clients),
        timestamp_us=ts,
        value=value,
        run_id=run_id,
        unit=unit,
        id=rid,
        attrs=json.loads(attrs),
    )


class MeasurementStore:
    """Thread-safe store; one connection, writes serialized by a lock."""

    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        self._db.execute("PRAGMA journal_mode=WAL" if self.path != ":memory:" else "PRAGMA journal_mode=MEMORY")
        self._db.execute("PRAGMA synchronous=FULL")
        self._db.executescript(SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def submit_batch(
        self,
        records: Sequence[MeasurementRecord],
        source: str,
        submitter: str = "",
        idempotency_key: str | None = None,
    ) -> int:
        return self.submit(records, source, submitter, idempotency_key)[0]

    def submit(
        self,
        records: Sequence[MeasurementRecord],
        source: str,
        submitter: str = "",
        idempotency_key: str | None = None,
    ) -> tuple[int, bool]:
        """Persist a batch; returns ``(batch_id, created)``.

        A repeated ``idempotency_key`` returns the original id and stores nothing.
        """
        validate_batch(records, source)
        with self._lock:
            if idempotency_key is not None:
                row = self._db.execute(
                    "SELECT batch_id FROM batches WHERE idempotency_key = ?", (idempotency_key,)
                ).fetchone()
                if row:
                    return row[0], False
            try:
                self._db.execute("BEGIN IMMEDIATE")
                cur = self._db.execute(
                    "INSERT INTO batches(received_at_us, source, submitter, idempotency_key) VALUES (?,?,?,?)",
                    (now_us(), source, submitter, idempotency_key),
                )
                batch_id = cur.lastrowid
                self._db.executemany(
                    "INSERT INTO records(id, batch_id, run_id, method, metric, segment, direction,"
                    " access_technology, cross_traffic_mbps, num_clients, timestamp_us, value, unit, attrs)"
                    " VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
                    [_row(r, batch_id) for r in records],
                )
                self._check_run_consistency(records)
                self._db.execute("COMMIT")
            except sqlite3.IntegrityError as exc:
                self._db.execute("ROLLBACK")
                raise ConflictError(f"record id already stored ({exc})") from None
            except ValidationError:
                self._db.execute("ROLLBACK")
                raise
            except sqlite3.Error as exc:
                if self._db.in_transaction:
                    self._db.execute("ROLLBACK")
                raise StoreError(str(exc)) from exc
            return batch_id, True

    def _check_run_consistency(self, records):
        d = records[0].descriptor
        for run_id in {r.run_id for r in records}:
            row = self._db.execute(
                "SELECT method, metric, segment, direction, access_technology, cross_traffic_mbps, num_clients"
                " FROM records WHERE run_id = ? AND NOT (method = ? AND metric = ? AND segment = ? AND"
                " direction = ? AND access_technology = ? AND cross_traffic_mbps = ? AND num_clients IS ?) LIMIT 1",
                (run_id, d.method.value, str(d.metric), d.segment.value, d.direction.value,
                 d.access_technology.value, d.cross_traffic_mbps, d.num_clients),
            ).fetchone()
            if row:
                raise ValidationError(f"run {run_id!r} already holds records with another descriptor", "run_id")

    def ingest_self_metric(self, record: MeasurementRecord, submitter: str = "", idempotency_key=None) -> str:
        if record.descriptor.method is not Method.SELF or record.descriptor.metric.kind is not MetricKind.SELF_METRIC:
            raise ValidationError("self ingestion takes method=self, metric=self_metric records", "descriptor")
        self.submit([record], "self", submitter, idempotency_key)
        return record.id

    def query(self, flt: QueryFilter | None = None) -> list[MeasurementRecord]:
        flt = flt or QueryFilter()
        where, args = [], []
        for key, value in flt.descriptor.to_dict().items():
            where.append(f"{key} = ?")
            args.append(value)
        if flt.start_us is not None:
            where.append("timestamp_us >= ?")
            args.append(flt.start_us)
        if flt.end_us is not None:
            where.append("timestamp_us <= ?")
            args.append(flt.end_us)
        if flt.run_id is not None:
            where.append("run_id = ?")
            args.append(flt.run_id)
        sql = f"SELECT {_COLS} FROM records"
        if where:
            sql += " WHERE " + " AND ".join(where)
        sql += " ORDER BY timestamp_us, id"
        with self._lock:
            rows = self._db.execute(sql, args).fetchall()
        return [_from_row(r) for r in rows]

    def count(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM records").fetchone()[0]

    def export(self, flt: QueryFilter | None = None) -> tuple[dict[str, str], str]:
        """Trace files (name -> NDJSON text) and manifest text for matching runs."""
        return export_payload(self.query(flt))

    def export_traces(self, flt: QueryFilter | None, destination: str | Path) -> list[Path]:
        files, manifest = self.export(flt)
        return write_export(files, manifest, destination)


def trace_file_name(run_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in run_id)
    return f"run-{safe}.ndjson"


def export_payload(records: Iterable[MeasurementRecord]) -> tuple[dict[str, str], str]:
    runs: dict[str, list[MeasurementRecord]] = {}
    for r in records:
        runs.setdefault(r.run_id, []).append(r)
    files, entries = {}, []
    for run_id in sorted(runs):
        recs = sorted(runs[run_id], key=lambda r: (r.timestamp_us, r.id))
        name = trace_file_name(run_id)
        files[name] = write_ndjson(recs)
        experiments = {r.attrs.get("experiment") for r in recs}
        experiment = experiments.pop() if len(experiments) == 1 else None
        entries.append(ManifestEntry(name, recs[0].descriptor, run_id, experiment))
    return files, manifest_text(entries)


def write_export(files: dict[str, str], manifest: str, destination: str | Path) -> list[Path]:
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for name, text in files.items():
            atomic_write(dest / name, text)
            written.append(dest / name)
        atomic_write(dest / MANIFEST_NAME, manifest)
    except OSError:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return written

