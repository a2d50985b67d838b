"""Loopback end-to-end tests of the query protocol."""

import base64
import random

import pytest
import requests

from migp import oprf
from migp.client import (
    ClientError,
    ConfigurationError,
    MigpClient,
    QueryOutcome,
    classify_offline,
    local_blocklist_hits,
)
from migp.oprf import ENTRY_MODE_FLAG_BYTE, PrfKey
from migp.pipeline import Credential, bucket_hex, bucket_id, build_store, rotate_store
from migp.server import MigpServer, ServerConfig
from migp.similarity import dasr_ruleset

RULES = dasr_ruleset()

CORPUS = [
    Credential("alice@example.com", "summer2019"),
    Credential("alice@example.com", "hunter2!"),
    Credential("bob@example.com", "monkey12"),
    Credential("carol@example.com", "pass"),
    Credential("carol@example.com", "pass1"),
]


@pytest.fixture(scope="module")
def key():
    return PrfKey.generate(epoch=1, rng=random.Random(1001))


@pytest.fixture(scope="module")
def store(key):
    return build_store(CORPUS, key, l=8, rules=RULES, n=3)


@pytest.fixture(scope="module")
def server(store, key):
    with MigpServer(store, key) as srv:
        yield srv


@pytest.fixture()
def client(server):
    return MigpClient(server.url, client_rules=RULES, rng=random.Random(42))


# --- plain HTTP surface ---------------------------------------------------

def test_health_and_params(server, store):
    health = requests.get(server.url + "/v1/health", timeout=5)
    assert health.status_code == 200 and health.json() == {"status": "ok"}
    params = requests.get(server.url + "/v1/params", timeout=5).json()
    assert params["l"] == 8
    assert params["n"] == 3
    assert params["epoch"] == 1
    assert params["entry_mode"] == oprf.ENTRY_MODE_LAST_BIT
    assert params["ruleset_id"] == "dasr"
    assert params["m_max"] == 11
    assert params["allow_client_variants"] is True
    assert requests.get(server.url + "/v1/nope", timeout=5).status_code == 404


def test_evaluate_round_trip(server, key):
    x = oprf.credential_input("alice@example.com", "whatever1")
    element, factor = oprf.blind(x, rng=random.Random(7))
    payload = {
        "bucket": bucket_hex(bucket_id("alice@example.com", 8), 8),
        "elements": [base64.b64encode(element.to_bytes()).decode()],
    }
    body = requests.post(server.url + "/v1/evaluate", json=payload, timeout=5).json()
    assert len(body["evaluated"]) == 1
    from migp.group import get_group

    evaluated = get_group().decode(base64.b64decode(body["evaluated"][0]))
    assert oprf.finalize(x, evaluated, factor) == oprf.direct_prf(key, x)


def test_evaluate_rejections(server):
    url = server.url + "/v1/evaluate"
    ok_element = base64.b64encode(
        oprf.blind(b"x", rng=random.Random(1))[0].to_bytes()
    ).decode()

    def post(payload):
        return requests.post(url, json=payload, timeout=5)

    assert post({"bucket": "ab"}).status_code == 400
    assert post({"bucket": "ab", "elements": []}).status_code == 400
    assert post({"bucket": "ab", "elements": ["!!!"]}).status_code == 400
    assert post({"bucket": "ab", "elements": [base64.b64encode(b"\x01" * 32).decode()]}).status_code == 400
    assert post({"bucket": "zz", "elements": [ok_element]}).status_code == 400
    assert post({"bucket": "abcd", "elements": [ok_element]}).status_code == 400
    too_many = {"bucket": "ab", "elements": [ok_element] * 12}
    assert post(too_many).status_code == 400
    raw = requests.post(url, data=b"not json", timeout=5)
    assert raw.status_code == 400
    empty = requests.post(url, data=b"", timeout=5)
    assert empty.status_code == 400


def test_bucket_endpoint_and_etag(server, store):
    bid = bucket_id("alice@example.com", 8)
    url = server.url + "/v1/bucket/" + bucket_hex(bid, 8)
    first = requests.get(url, timeout=5)
    assert first.status_code == 200
    entries = store.fetch(bid)
    assert first.content == b"".join(entries)
    assert len(first.content) == 16 * len(entries)
    etag = first.headers["ETag"]
    again = requests.get(url, headers={"If-None-Match": etag}, timeout=5)
    assert again.status_code == 304
    assert requests.get(server.url + "/v1/bucket/zz", timeout=5).status_code == 400


def test_query_combined_endpoint(server, store):
    bid = bucket_id("bob@example.com", 8)
    element, _ = oprf.blind(b"anything", rng=random.Random(3))
    payload = {
        "bucket": bucket_hex(bid, 8),
        "elements": [base64.b64encode(element.to_bytes()).decode()],
    }
    body = requests.post(server.url + "/v1/query", json=payload, timeout=5).json()
    assert base64.b64decode(body["bucket_entries"]) == b"".join(store.fetch(bid))
    assert body["params"]["epoch"] == 1
    assert len(body["evaluated"]) == 1


def test_bucket_is_element_independent(server):
    bid_hex = bucket_hex(bucket_id("carol@example.com", 8), 8)
    blobs = []
    for seed in (10, 11):
        element, _ = oprf.blind(b"probe%d" % seed, rng=random.Random(seed))
        payload = {
            "bucket": bid_hex,
            "elements": [base64.b64encode(element.to_bytes()).decode()],
        }
        body = requests.post(server.url + "/v1/query", json=payload, timeout=5).json()
        blobs.append(body["bucket_entries"])
    assert blobs[0] == blobs[1]


def test_response_deterministic_for_fixed_request(server):
    element, _ = oprf.blind(b"fixed", rng=random.Random(5))
    payload = {
        "bucket": "ab",
        "elements": [base64.b64encode(element.to_bytes()).decode()],
    }
    one = requests.post(server.url + "/v1/evaluate", json=payload, timeout=5)
    two = requests.post(server.url + "/v1/evaluate", json=payload, timeout=5)
    assert one.content == two.content


# --- rate limiting --------------------------------------------------------

def test_rate_limit_counts_elements(store, key):
    config = ServerConfig(m_max=11, rate_capacity=10, rate_refill_per_second=1000.0)
    with MigpServer(store, key, config) as srv:
        element = base64.b64encode(
            oprf.blind(b"x", rng=random.Random(1))[0].to_bytes()
        ).decode()
        payload = {"bucket": "ab", "elements": [element] * 11}
        response = requests.post(srv.url + "/v1/evaluate", json=payload, timeout=5)
        assert response.status_code == 429
        assert "Retry-After" in response.headers
        # refill at 1000/s restores the budget almost immediately
        import time

        time.sleep(0.05)
        ok = requests.post(
            srv.url + "/v1/evaluate", json={"bucket": "ab", "elements": [element] * 10},
            timeout=5,
        )
        assert ok.status_code == 200


def test_rate_limit_tokens_are_independent(store, key):
    config = ServerConfig(m_max=4, rate_capacity=3, rate_refill_per_second=0.001)
    with MigpServer(store, key, config) as srv:
        element = base64.b64encode(
            oprf.blind(b"x", rng=random.Random(1))[0].to_bytes()
        ).decode()
        payload = {"bucket": "ab", "elements": [element] * 3}

        def post(token):
            return requests.post(
                srv.url + "/v1/evaluate",
                json=payload,
                headers={"Authorization": token},
                timeout=5,
            ).status_code

        assert post("client-a") == 200
        assert post("client-a") == 429
        assert post("client-b") == 200


# --- offline classification ------------------------------------------------

def test_classify_offline_basics(key):
    username, password = "u@x.com", "secret9"
    frame = oprf.credential_input(username, password)
    prf = oprf.direct_prf(key, frame)
    oracle = lambda f: oprf.direct_prf(key, f)
    mode = oprf.ENTRY_MODE_LAST_BIT
    assert classify_offline(username, password, 0, RULES, (), oracle, mode).verdict == "none"
    exact_entry = oprf.encode_entry(prf, False, mode)
    tagged_entry = oprf.encode_entry(prf, True, mode)
    assert classify_offline(
        username, password, 0, RULES, (exact_entry,), oracle, mode
    ) == QueryOutcome("match", 0, "exact")
    assert classify_offline(
        username, password, 0, RULES, (tagged_entry,), oracle, mode
    ) == QueryOutcome("similar", 0, "variant")
    # exact interpretation outranks variant at the same index
    assert classify_offline(
        username, password, 0, RULES, (exact_entry, tagged_entry), oracle, mode
    ).verdict == "match"


def test_query_outcome_validation():
    with pytest.raises(ValueError):
        QueryOutcome("none", 1, "exact")
    with pytest.raises(ValueError):
        QueryOutcome("match", 1, "exact")
    with pytest.raises(ValueError):
        QueryOutcome("verdict", 0, "exact")
    assert str(QueryOutcome("similar", 2, "variant")) == "similar(index=2, kind=variant)"
    assert str(QueryOutcome("match", 0, "exact")) == "match"


def test_local_blocklist_hits():
    assert local_blocklist_hits("123456", {"123456", "qwerty"})
    assert not local_blocklist_hits("rare-one", {"123456"})


# --- full client rounds -----------------------------------------------------

def test_check_exact_match(client):
    outcome = client.check("alice@example.com", "summer2019")
    assert outcome == QueryOutcome("match", 0, "exact")


def test_check_stored_variant_rule_two(client):
    # breached "summer2019" stores variant "summer201" (rank-1 del-last)
    outcome = client.check("alice@example.com", "summer201", m=0)
    assert outcome == QueryOutcome("similar", 0, "variant")


def test_check_client_variant_hits_exact(client):
    # querying "monkey12 " style tweak: client variant 1 of "monkey123"
    # is "monkey12", which is breached for bob
    outcome = client.check("bob@example.com", "monkey123", m=3)
    assert outcome == QueryOutcome("similar", 1, "exact")


def test_check_client_variant_hits_stored_variant(client):
    # variants of breached "monkey12" include "Monkey12" (rank 2); the
    # client variant "Monkey12" of queried "Monkey123" hits that tagged
    # entry via the double-sided rule (3)
    outcome = client.check("bob@example.com", "Monkey123", m=1)
    assert outcome == QueryOutcome("similar", 1, "variant")


def test_check_match_outranks_similar(client):
    # carol has both "pass" and "pass1" breached; querying "pass1" must
    # report the exact hit even though "pass" is one edit away
    outcome = client.check("carol@example.com", "pass1", m=5)
    assert outcome == QueryOutcome("match", 0, "exact")


def test_check_miss(client):
    outcome = client.check("alice@example.com", "zzz-unrelated", m=10)
    assert outcome == QueryOutcome("none")


def test_check_username_canonicalization(client):
    outcome = client.check("  ALICE@example.com ", "summer2019")
    assert outcome.verdict == "match"


def test_check_rejects_bad_requests(client):
    with pytest.raises(ConfigurationError):
        client.check("alice@example.com", "p\xe4ss")
    with pytest.raises(ConfigurationError):
        client.check("alice@example.com", "fine1", m=-1)
    with pytest.raises(ConfigurationError):
        client.check("alice@example.com", "fine1", m=11)  # 12 elements > m_max


def test_check_respects_variant_policy(store, key):
    config = ServerConfig(allow_client_variants=False)
    with MigpServer(store, key, config) as srv:
        client = MigpClient(srv.url, client_rules=RULES, rng=random.Random(9))
        assert client.check("alice@example.com", "summer2019", m=0).verdict == "match"
        with pytest.raises(ConfigurationError):
            client.check("alice@example.com", "summer2019", m=2)


def test_bucket_cache_reused_per_username(client):
    client.check("alice@example.com", "first-try1", m=0)
    client.check("alice@example.com", "second-try2", m=0)
    fetches = [p for p, _ in client.transcript if p.startswith("/v1/bucket/")]
    assert len(fetches) == 1


def test_fresh_blinding_factors_across_checks(server):
    class RecordingRng(random.Random):
        def __init__(self, seed):
            super().__init__(seed)
            self.draws = []

        def randrange(self, *args):
            value = super().randrange(*args)
            self.draws.append(value)
            return value

    rng = RecordingRng(31)
    client = MigpClient(server.url, client_rules=RULES, rng=rng)
    client.check("alice@example.com", "one-pass1", m=2)
    client.check("alice@example.com", "one-pass1", m=2)
    assert len(rng.draws) == len(set(rng.draws)) >= 6


def test_client_differential_against_offline(server, key, store):
    rnd = random.Random(99)
    client = MigpClient(server.url, client_rules=RULES, rng=rnd)
    pool = ["summer2019", "summer201", "monkey12", "monkey1", "pass", "pass1",
            "Pass", "hunter2!", "нет", "zzz9", "a1b2c3"]
    usernames = ["alice@example.com", "bob@example.com", "carol@example.com", "dan@x.org"]
    mode = store.header.entry_mode
    for _ in range(25):
        username = rnd.choice(usernames)
        password = rnd.choice(pool)
        if password == "нет":
            continue
        m = rnd.choice([0, 1, 3, 10])
        got = client.check(username, password, m=m)
        bucket = store.fetch(bucket_id(username, 8))
        want = classify_offline(
            username, password, m, RULES, bucket,
            lambda f: oprf.direct_prf(key, f), mode,
        )
        assert got == want


def test_rotation_swap_and_cache_invalidation(key):
    corpus = CORPUS
    store, sidecar = build_store(corpus, key, l=8, rules=RULES, n=3, with_sidecar=True)
    with MigpServer(store, key) as srv:
        client = MigpClient(srv.url, client_rules=RULES, rng=random.Random(77))
        assert client.check("alice@example.com", "summer2019").verdict == "match"
        new_key = PrfKey.generate(epoch=2, rng=random.Random(1002))
        rotated, _ = rotate_store(store, key, new_key, sidecar)
        srv.swap(rotated, new_key)
        assert client.check("alice@example.com", "summer2019").verdict == "match"
        assert client.params()["epoch"] == 2
        fetches = [p for p, _ in client.transcript if p.startswith("/v1/bucket/")]
        assert len(fetches) == 2  # cache could not serve the new epoch


def test_flag_byte_mode_end_to_end(key):
    store = build_store(
        CORPUS, key, l=8, rules=RULES, n=3, entry_mode=ENTRY_MODE_FLAG_BYTE
    )
    with MigpServer(store, key) as srv:
        client = MigpClient(srv.url, client_rules=RULES, rng=random.Random(13))
        assert client.params()["entry_mode"] == ENTRY_MODE_FLAG_BYTE
        assert client.check("alice@example.com", "summer2019").verdict == "match"
        assert client.check("alice@example.com", "summer201").verdict == "similar"
        assert client.check("alice@example.com", "no-hit-at-all1", m=10).verdict == "none"


def test_client_transport_error():
    client = MigpClient("http://127.0.0.1:9", timeout=0.2)
    with pytest.raises(ClientError):
        client.check("a@b.c", "xyz1")
