"""HTTP/1.1 JSON front end of the measurement store.

Routes::

    POST /v1/measurements   {"source", "submitter", "records": [...]}  -> 201 {"batch_id", "count"}
    POST /v1/self           one self_metric record                     -> 201 {"id"}
    GET  /v1/measurements   ?method=&metric=&segment=&direction=&access_technology=
                            &cross_traffic_mbps=&num_clients=&start_us=&end_us=&run_id=
                                                                       -> 200 {"records": [...]}
    GET  /v1/export         same parameters                            -> 200 {"manifest", "files"}
    GET  /v1/health                                                    -> 200 {"records": n}

An ``Idempotency-Key`` header makes a POST safe to retry.  When a token is
configured every request needs ``Authorization: Bearer <token>``.
"""
from __future__ import annotations

import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

from ..core import ValidationError, record_from_dict, record_to_dict
from .store import ConflictError, MeasurementStore, QueryFilter, StoreError

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


class _Handler(BaseHTTPRequestHandler):
    server: AggregatorHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str, fields: dict | None = None) -> None:
        body = {"error": message}
        if fields:
            body["fields"] = fields
        self._send(status, body)

    def _authorized(self) -> bool:
        token = self.server.token
        if not token:
            return True
        if self.headers.get("Authorization") == f"Bearer {token}":
            return True
        self._error(HTTPStatus.UNAUTHORIZED, "missing or bad bearer token")
        return False

    def _json_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            raise ValidationError("body too large")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw or b"null")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON ({exc.msg})", "body") from None

    def do_POST(self):  # noqa: N802
        if not self._authorized():
            return
        path = urlsplit(self.path).path
        key = self.headers.get("Idempotency-Key")
        store = self.server.store
        try:
            body = self._json_body()
            if path == "/v1/measurements":
                if not isinstance(body, dict):
                    raise ValidationError("must be an object", "body")
                raw = body.get("records")
                if not isinstance(raw, list):
                    raise ValidationError("must be a list", "records")
                records = []
                for i, item in enumerate(raw):
                    try:
                        records.append(record_from_dict(item))
                    except ValidationError as exc:
                        raise ValidationError(exc.reason, f"records[{i}].{exc.field or 'record'}") from None
                batch_id, created = store.submit(
                    records, str(body.get("source", "")), str(body.get("submitter", "")), key
                )
                status = HTTPStatus.CREATED if created else HTTPStatus.OK
                self._send(status, {"batch_id": batch_id, "count": len(records), "created": created})
            elif path == "/v1/self":
                record = record_from_dict(body)
                submitter = self.headers.get("X-Submitter", "")
                rid = store.ingest_self_metric(record, submitter, key)
                self._send(HTTPStatus.CREATED, {"id": rid})
            else:
                self._error(HTTPStatus.NOT_FOUND, f"no route {path}")
        except ValidationError as exc:
            self._error(HTTPStatus.BAD_REQUEST, str(exc), {exc.field or "body": exc.reason})
        except ConflictError as exc:
            self._error(HTTPStatus.CONFLICT, str(exc))
        except StoreError as exc:
            log.exception("storage failure")
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, f"storage failure: {exc}")

    def do_GET(self):  # noqa: N802
        if not self._authorized():
            return
        parts = urlsplit(self.path)
        params = dict(parse_qsl(parts.query))
        store = self.server.store
        try:
            if parts.path == "/v1/health":
                self._send(HTTPStatus.OK, {"records": store.count()})
                return
            if parts.path not in ("/v1/measurements", "/v1/export"):
                self._error(HTTPStatus.NOT_FOUND, f"no route {parts.path}")
                return
            flt = QueryFilter.from_params(params)
            if parts.path == "/v1/measurements":
                records = store.query(flt)
                self._send(HTTPStatus.OK, {"records": [record_to_dict(r) for r in records]})
            else:
                files, manifest = store.export(flt)
                self._send(HTTPStatus.OK, {"manifest": manifest, "files": files})
        except ValidationError as exc:
            self._error(HTTPStatus.BAD_REQUEST, str(exc), {exc.field or "query": exc.reason})
        except StoreError as exc:
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, f"storage failure: {exc}")


class AggregatorHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, store: MeasurementStore, token: str | None = None):
        super().__init__(address, _Handler)
        self.store = store
        self.token = token

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


class AggregatorService:
    """Store plus HTTP server running on a background thread (for embedding and tests)."""

    def __init__(self, db_path, host: str = "127.0.0.1", port: int = 0, token: str | None = None):
        self.store = MeasurementStore(db_path)
        self.httpd = AggregatorHTTPServer((host, port), self.store, token)
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return self.httpd.url

    def start(self) -> AggregatorService:
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.store.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(db_path, host: str, port: int, token: str | None = None) -> None:
    store = MeasurementStore(db_path)
    httpd = AggregatorHTTPServer((host, port), store, token)
    log.info("aggregator listening on %s (store %s)", httpd.url, db_path)
    print(f"listening on {httpd.url}", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
        store.close()
