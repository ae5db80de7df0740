"""Minimal blocking client for the aggregator REST interface."""
from __future__ import annotations

import json
import urllib.error
import urllib.request
from pathlib import Path
from typing import Sequence
from urllib.parse import urlencode

from ..core import MeasurementRecord, record_from_dict, record_to_dict
from .store import QueryFilter, write_export


class AggregatorError(RuntimeError):
    def __init__(self, status: int, body: dict):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body.get('error', body)}")


class AggregatorClient:
    def __init__(self, url: str, token: str | None = None, timeout: float = 30.0, submitter: str = ""):
        self.url = url.rstrip("/")
        self.token = token
        self.timeout = timeout
        self.submitter = submitter

    def _request(self, method: str, path: str, body=None, headers=None) -> dict:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.url + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        for k, v in (headers or {}).items():
            req.add_header(k, v)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read() or b"{}")
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read() or b"{}")
            except json.JSONDecodeError:
                payload = {"error": exc.reason}
            raise AggregatorError(exc.code, payload) from None

    def submit_batch(
        self,
        records: Sequence[MeasurementRecord],
        source: str,
        submitter: str | None = None,
        idempotency_key: str | None = None,
    ) -> int:
        headers = {"Idempotency-Key": idempotency_key} if idempotency_key else {}
        body = {
            "source": source,
            "submitter": submitter if submitter is not None else self.submitter,
            "records": [record_to_dict(r) for r in records],
        }
        return self._request("POST", "/v1/measurements", body, headers)["batch_id"]

    def ingest_self_metric(self, record: MeasurementRecord, idempotency_key: str | None = None) -> str:
        headers = {"X-Submitter": self.submitter} if self.submitter else {}
        if idempotency_key:
            headers["Idempotency-Key"] = idempotency_key
        return self._request("POST", "/v1/self", record_to_dict(record), headers)["id"]

    def query(self, flt: QueryFilter | None = None) -> list[MeasurementRecord]:
        qs = urlencode((flt or QueryFilter()).to_params())
        body = self._request("GET", "/v1/measurements" + (f"?{qs}" if qs else ""))
        return [record_from_dict(r) for r in body["records"]]

    def export_traces(self, flt: QueryFilter | None, destination: str | Path) -> list[Path]:
        qs = urlencode((flt or QueryFilter()).to_params())
        body = self._request("GET", "/v1/export" + (f"?{qs}" if qs else ""))
        return write_export(body["files"], body["manifest"], destination)

    def health(self) -> dict:
        return self._request("GET", "/v1/health")
