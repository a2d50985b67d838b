"""Client-side protocol driver.

``MigpClient.check`` runs the full round: derive the bucket id from the
username, expand the queried password into client-side variants, blind
everything, send one batched evaluate request, unblind, fetch (or reuse)
the bucket, and classify.  ``classify_offline`` is the pure
classification core, usable against a locally held bucket.
"""

import base64
import binascii
import threading
from dataclasses import dataclass

import requests

from . import oprf
from .group import get_group
from .oprf import FastHash
from .pipeline import bucket_hex, bucket_id, canonicalize_username
from .similarity import dasr_ruleset, generate_variants, valid_password

__all__ = [
    "QueryOutcome",
    "ClientError",
    "ConfigurationError",
    "MigpClient",
    "classify_offline",
    "local_blocklist_hits",
]

VERDICT_MATCH = "match"
VERDICT_SIMILAR = "similar"
VERDICT_NONE = "none"


class ClientError(Exception):
    """Transport or server failure; distinct from any verdict."""


class ConfigurationError(ClientError):
    """Client asked for something the server's policy forbids."""


@dataclass(frozen=True)
class QueryOutcome:
    verdict: str
    matched_index: int = None
    matched_kind: str = None  # "exact" or "variant"

    def __post_init__(self):
        if self.verdict == VERDICT_NONE:
            if self.matched_index is not None or self.matched_kind is not None:
                raise ValueError("none carries no match details")
        elif self.verdict == VERDICT_MATCH:
            if self.matched_index != 0 or self.matched_kind != "exact":
                raise ValueError("match means the queried password hit exactly")
        elif self.verdict != VERDICT_SIMILAR:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def __str__(self):
        if self.verdict == VERDICT_NONE:
            return "none"
        if self.verdict == VERDICT_MATCH:
            return "match"
        return f"similar(index={self.matched_index}, kind={self.matched_kind})"


def classify_offline(username, password, m, client_rules, bucket_entries, prf,
                     entry_mode=oprf.ENTRY_MODE_LAST_BIT):
    """Classify against a bucket using a supplied PRF oracle.

    ``prf`` maps a framed credential input to its 16-byte PRF value (or
    an iterable of candidate values, for salted deployments).  Priority:
    the queried password's exact entry, then its variant-flagged entry,
    then each client variant in rank order, exact entry before variant
    entry at the same index.
    """
    username = canonicalize_username(username)
    queried = [password] + generate_variants(client_rules, password, m)
    entries = set(bucket_entries)
    for index, candidate_password in enumerate(queried):
        frame = oprf.credential_input(username, candidate_password)
        outputs = prf(frame)
        if isinstance(outputs, (bytes, bytearray)):
            outputs = (bytes(outputs),)
        else:
            outputs = tuple(outputs)
        for variant_entry in (False, True):
            for output in outputs:
                if oprf.encode_entry(output, variant_entry, entry_mode) in entries:
                    if index == 0 and not variant_entry:
                        return QueryOutcome(VERDICT_MATCH, 0, "exact")
                    kind = "variant" if variant_entry else "exact"
                    return QueryOutcome(VERDICT_SIMILAR, index, kind)
    return QueryOutcome(VERDICT_NONE)


def local_blocklist_hits(password, blocklist):
    """True when the password would be absent server-side by policy.

    Blocklisted passwords are missing from the store, so the protocol
    answers none for them; a deployment that ships the blocklist file
    can warn locally instead.
    """
    return password in blocklist


class MigpClient:
    """Shareable handle for one server endpoint.

    Holds a params cache and a per-(epoch, bucket) entry cache, both
    behind a lock; every check blinds with fresh factors.
    """

    def __init__(self, endpoint, client_rules=None, h2=None, session=None,
                 rng=None, timeout=10.0):
        self.endpoint = endpoint.rstrip("/")
        self.client_rules = client_rules if client_rules is not None else dasr_ruleset()
        self.h2 = h2 if h2 is not None else FastHash()
        self._session = session or requests.Session()
        self._rng = rng
        self.timeout = timeout
        self._lock = threading.Lock()
        self._params = None
        self._bucket_cache = {}
        self.transcript = []  # (path, status) pairs; tests assert cache hits

    # -- HTTP ------------------------------------------------------------

    def _get(self, path, headers=None):
        try:
            response = self._session.get(
                self.endpoint + path, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ClientError(f"transport failure: {exc}") from exc
        self.transcript.append((path, response.status_code))
        return response

    def _post(self, path, payload):
        try:
            response = self._session.post(
                self.endpoint + path, json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ClientError(f"transport failure: {exc}") from exc
        self.transcript.append((path, response.status_code))
        return response

    @staticmethod
    def _error_text(response):
        try:
            return response.json().get("error", response.reason)
        except ValueError:
            return response.reason

    def params(self, refresh=False):
        with self._lock:
            if self._params is not None and not refresh:
                return self._params
        response = self._get("/v1/params")
        if response.status_code != 200:
            raise ClientError(f"params fetch failed: {self._error_text(response)}")
        params = response.json()
        with self._lock:
            self._params = params
        return params

    def _accept_params(self, params):
        with self._lock:
            self._params = params

    # -- bucket cache ------------------------------------------------------

    def _cached_bucket(self, epoch, bid):
        with self._lock:
            return self._bucket_cache.get((epoch, bid))

    def _store_bucket(self, epoch, bid, entries):
        with self._lock:
            # one epoch in the cache at a time: a rotation invalidates
            # every bucket, so stale epochs are dead weight
            if any(key[0] != epoch for key in self._bucket_cache):
                self._bucket_cache = {
                    k: v for k, v in self._bucket_cache.items() if k[0] == epoch
                }
            self._bucket_cache[(epoch, bid)] = entries

    def _fetch_bucket(self, params, bid):
        entries = self._cached_bucket(params["epoch"], bid)
        if entries is not None:
            return entries
        response = self._get("/v1/bucket/" + bucket_hex(bid, params["l"]))
        if response.status_code != 200:
            raise ClientError(f"bucket fetch failed: {self._error_text(response)}")
        blob = response.content
        size = oprf.entry_size(params["entry_mode"])
        if len(blob) % size:
            raise ClientError("bucket blob is not a whole number of entries")
        entries = tuple(blob[i:i + size] for i in range(0, len(blob), size))
        self._store_bucket(params["epoch"], bid, entries)
        return entries

    # -- the protocol round --------------------------------------------------

    def check(self, username, password, m=0):
        """One full query; returns a QueryOutcome."""
        if not valid_password(password):
            raise ConfigurationError("password fails the corpus validity rules")
        if m < 0:
            raise ConfigurationError("m must be non-negative")
        params = self.params()
        if m + 1 > params["m_max"]:
            raise ConfigurationError(
                f"m={m} needs {m + 1} elements but the server caps at {params['m_max']}"
            )
        if m > 0 and not params.get("allow_client_variants", True):
            raise ConfigurationError(
                "server policy disallows client-side variants; retry with m=0"
            )
        username = canonicalize_username(username)
        queried = [password] + generate_variants(self.client_rules, password, m)
        frames = [oprf.credential_input(username, w) for w in queried]
        blinded = []
        factors = []
        for frame in frames:
            element, factor = oprf.blind(
                frame, rng=self._rng, group_id=params["group_id"]
            )
            assert factor not in factors  # fresh blinding per element
            blinded.append(element)
            factors.append(factor)

        bid = bucket_id(username, params["l"])
        payload = {
            "bucket": bucket_hex(bid, params["l"]),
            "elements": [base64.b64encode(el.to_bytes()).decode("ascii") for el in blinded],
        }
        response = self._post("/v1/evaluate", payload)
        if response.status_code == 429:
            raise ClientError("rate limited; retry later")
        if response.status_code == 400:
            raise ConfigurationError(f"server rejected query: {self._error_text(response)}")
        if response.status_code != 200:
            raise ClientError(f"evaluate failed: {self._error_text(response)}")
        body = response.json()
        echo = body["params"]
        if echo["epoch"] != params["epoch"] or echo["l"] != params["l"]:
            # raced a rotation: adopt the fresh params and run again
            self._accept_params(echo)
            return self.check(username, password, m)
        group = get_group(params["group_id"])
        try:
            evaluated = [
                group.decode(base64.b64decode(item, validate=True))
                for item in body["evaluated"]
            ]
        except (binascii.Error, ValueError) as exc:
            raise ClientError(f"server returned bad elements: {exc}") from exc
        if len(evaluated) != len(frames):
            raise ClientError("server returned a mismatched evaluation count")

        entries = self._fetch_bucket(params, bid)
        prf_by_frame = {}
        for frame, raw, factor in zip(frames, evaluated, factors):
            prf_by_frame[frame] = list(
                oprf.finalize_candidates(
                    frame, raw, factor, h2=self.h2, group_id=params["group_id"]
                )
            )
        return classify_offline(
            username,
            password,
            m,
            self.client_rules,
            entries,
            lambda frame: prf_by_frame[frame],
            entry_mode=params["entry_mode"],
        )
