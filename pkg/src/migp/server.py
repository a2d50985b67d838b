"""Online query service over a bucket store.

Three protocol endpoints plus two operational ones, JSON in/out except
for raw bucket blobs:

* ``POST /v1/evaluate``: bucket id (hex) + base64 blinded elements ->
  base64 evaluated elements + params echo.
* ``GET /v1/bucket/<hex>``: raw concatenated bucket entries, with an
  ETag so clients and CDNs can cache; 304 on a matching validator.
* ``POST /v1/query``: the single-round convenience form, evaluate plus
  the bucket blob in one response.
* ``GET /v1/params``: the params echo alone.
* ``GET /v1/health``: liveness probe.

The server's observable behavior depends only on the bucket id, the
element count, and rate-limit state; element values are never logged or
stored.  Rate limiting spends one token per element, so batching gives
no amplification discount.
"""

import base64
import binascii
import hashlib
import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .group import get_group
from .pipeline import parse_bucket_hex
from .ratelimit import TokenBucket

__all__ = ["ServerConfig", "MigpServer"]

log = logging.getLogger("migp.server")

_MAX_BODY = 1 << 20


class ServerConfig:
    """Operational knobs; protocol parameters come from the store header."""

    def __init__(
        self,
        m_max=11,
        rate_capacity=1000,
        rate_refill_per_second=100.0,
        allow_client_variants=True,
        host="127.0.0.1",
        port=0,
        timelock_public=None,
    ):
        if m_max < 1:
            raise ValueError("m_max must allow at least the password itself")
        self.m_max = m_max
        self.rate_capacity = rate_capacity
        self.rate_refill_per_second = rate_refill_per_second
        self.allow_client_variants = allow_client_variants
        self.host = host
        self.port = port
        self.timelock_public = timelock_public


class _Snapshot:
    """One immutable (store, key) pair; swapped wholesale on rotation."""

    __slots__ = ("store", "key", "group", "params", "etags")

    def __init__(self, store, key, config):
        if key.epoch != store.header.epoch:
            raise ValueError("key epoch does not match store epoch")
        if key.group_id != store.header.group_id:
            raise ValueError("key group does not match store group")
        self.store = store
        self.key = key
        self.group = get_group(key.group_id)
        header = store.header
        params = {
            "l": header.l,
            "n": header.n,
            "entry_mode": header.entry_mode,
            "ruleset_id": header.ruleset_id,
            "epoch": header.epoch,
            "beta": header.beta,
            "group_id": header.group_id,
            "backend": header.backend,
            "salt_bits": header.salt_bits,
            "m_max": config.m_max,
            "allow_client_variants": config.allow_client_variants,
        }
        if config.timelock_public is not None:
            params["timelock"] = {
                "modulus": f"{config.timelock_public.modulus:x}",
                "cost": config.timelock_public.cost,
            }
        self.params = params
        self.etags = {}

    def bucket_blob(self, bid):
        return b"".join(self.store.fetch(bid))

    def etag(self, bid):
        # content hash + epoch: rotation changes the tag even for
        # buckets whose blob is empty both before and after
        tag = self.etags.get(bid)
        if tag is None:
            digest = hashlib.sha256(
                self.bucket_blob(bid) + self.store.header.epoch.to_bytes(8, "big")
            ).hexdigest()
            tag = f'"{digest[:32]}"'
            self.etags[bid] = tag
        return tag


class _RequestError(Exception):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "migp"

    # -- plumbing --------------------------------------------------------

    def log_message(self, format, *args):  # route through logging, not stderr
        log.debug("%s %s", self.address_string(), format % args)

    def _send_json(self, status, payload, extra_headers=()):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for name, value in extra_headers:
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, err):
        extra = []
        if err.status == 429:
            extra.append(("Retry-After", str(self.server.migp.retry_after())))
        self._send_json(err.status, {"error": str(err)}, extra)

    def _read_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length <= 0:
            raise _RequestError(400, "missing request body")
        if length > _MAX_BODY:
            raise _RequestError(400, "request body too large")
        return self.rfile.read(length)

    def _client_token(self):
        return self.headers.get("Authorization") or self.client_address[0]

    # -- endpoints ---------------------------------------------------------

    def do_GET(self):
        try:
            snap = self.server.migp.snapshot()
            if self.path == "/v1/health":
                self._send_json(200, {"status": "ok"})
            elif self.path == "/v1/params":
                self._send_json(200, snap.params)
            elif self.path.startswith("/v1/bucket/"):
                self._serve_bucket(snap, self.path[len("/v1/bucket/"):])
            else:
                self._send_json(404, {"error": "unknown path"})
        except _RequestError as err:
            self._send_error(err)
        except Exception:
            log.exception("request failed")
            self._send_json(500, {"error": "internal error"})

    def do_POST(self):
        try:
            snap = self.server.migp.snapshot()
            if self.path == "/v1/evaluate":
                self._handle_query(snap, include_bucket=False)
            elif self.path == "/v1/query":
                self._handle_query(snap, include_bucket=True)
            else:
                self._send_json(404, {"error": "unknown path"})
        except _RequestError as err:
            self._send_error(err)
        except Exception:
            log.exception("request failed")
            self._send_json(500, {"error": "internal error"})

    def _serve_bucket(self, snap, hex_id):
        bid = _parse_bucket(hex_id, snap.store.header.l)
        etag = snap.etag(bid)
        blob = snap.bucket_blob(bid)
        if self.headers.get("If-None-Match") == etag:
            self.send_response(304)
            self.send_header("ETag", etag)
            self.send_header("Content-Length", "0")
            self.end_headers()
            log.info("bucket id=%s status=304", hex_id)
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(blob)))
        self.send_header("ETag", etag)
        self.send_header("Cache-Control", "public, max-age=86400")
        self.send_header("X-Store-Epoch", str(snap.store.header.epoch))
        self.end_headers()
        self.wfile.write(blob)
        log.info("bucket id=%s entries=%d", hex_id, len(snap.store.fetch(bid)))

    def _handle_query(self, snap, include_bucket):
        request = _parse_json(self._read_body())
        bucket_hex = request.get("bucket")
        elements = request.get("elements")
        if not isinstance(bucket_hex, str) or not isinstance(elements, list):
            raise _RequestError(400, "request needs 'bucket' and 'elements'")
        bid = _parse_bucket(bucket_hex, snap.store.header.l)
        config = self.server.migp.config
        if not 1 <= len(elements) <= config.m_max:
            raise _RequestError(
                400, f"element count must be in [1, {config.m_max}]"
            )
        decoded = []
        for item in elements:
            if not isinstance(item, str):
                raise _RequestError(400, "elements must be base64 strings")
            try:
                raw = base64.b64decode(item, validate=True)
                decoded.append(snap.group.decode(raw))
            except (binascii.Error, ValueError):
                raise _RequestError(400, "element does not decode to the group") from None
        token = self._client_token()
        if not self.server.migp.spend(token, len(decoded)):
            log.info(
                "query bucket=%s elements=%d outcome=throttled", bucket_hex, len(decoded)
            )
            raise _RequestError(429, "rate limit exceeded")
        evaluated = [
            base64.b64encode(snap.group.mul(el, snap.key.key).to_bytes()).decode("ascii")
            for el in decoded
        ]
        payload = {"evaluated": evaluated, "params": snap.params}
        if include_bucket:
            payload["bucket_entries"] = base64.b64encode(snap.bucket_blob(bid)).decode(
                "ascii"
            )
            payload["bucket_etag"] = snap.etag(bid)
        self._send_json(200, payload)
        log.info(
            "query bucket=%s elements=%d outcome=ok", bucket_hex, len(decoded)
        )


def _parse_bucket(hex_id, l):
    try:
        return parse_bucket_hex(hex_id, l)
    except ValueError as exc:
        raise _RequestError(400, f"bad bucket id: {exc}") from None


def _parse_json(body):
    try:
        value = json.loads(body)
    except json.JSONDecodeError:
        raise _RequestError(400, "body is not valid JSON") from None
    if not isinstance(value, dict):
        raise _RequestError(400, "body must be a JSON object")
    return value


class MigpServer:
    """Threaded HTTP server over an immutable store snapshot.

    ``swap`` replaces the (store, key) snapshot atomically; already
    running requests keep the snapshot they started with.
    """

    def __init__(self, store, key, config=None):
        self.config = config or ServerConfig()
        self._snapshot = _Snapshot(store, key, self.config)
        self._buckets = {}
        self._buckets_lock = threading.Lock()
        self._httpd = None
        self._thread = None

    # one bucket per client token, created on first sight
    def _bucket_for(self, token):
        with self._buckets_lock:
            bucket = self._buckets.get(token)
            if bucket is None:
                bucket = TokenBucket(
                    self.config.rate_capacity, self.config.rate_refill_per_second
                )
                self._buckets[token] = bucket
            return bucket

    def spend(self, token, elements):
        return self._bucket_for(token).try_acquire(elements)

    def retry_after(self):
        return max(1, math.ceil(1.0 / self.config.rate_refill_per_second))

    def snapshot(self):
        return self._snapshot

    def swap(self, store, key):
        self._snapshot = _Snapshot(store, key, self.config)

    @property
    def params(self):
        return self._snapshot.params

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        if self._httpd is not None:
            raise RuntimeError("server already started")
        self._httpd = ThreadingHTTPServer(
            (self.config.host, self.config.port), _Handler
        )
        self._httpd.daemon_threads = True
        self._httpd.migp = self
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="migp-server", daemon=True
        )
        self._thread.start()
        return self

    @property
    def address(self):
        if self._httpd is None:
            raise RuntimeError("server not started")
        host, port = self._httpd.server_address[:2]
        return host, port

    @property
    def url(self):
        host, port = self.address
        return f"http://{host}:{port}"

    def stop(self):
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
