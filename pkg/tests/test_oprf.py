"""PRF layer: protocol equation, tagging, rotation, entry codec."""

import hashlib
import os
import random
import secrets
import stat

import pytest

from migp.group import ORDER, get_group
from migp import oprf
from migp.oprf import (
    ENTRY_MODE_FLAG_BYTE,
    ENTRY_MODE_LAST_BIT,
    PRF_LEN,
    PrfKey,
    blind,
    credential_input,
    direct_prf,
    encode_entry,
    entry_candidates,
    entry_size,
    evaluate,
    finalize,
    hash_to_group,
    rotate_delta,
    rotate_stored,
    variant_tag,
)

G = get_group()


def independent_prf(key_scalar, x):
    """Recompute F_k(x) from primitives, bypassing the oprf module's
    composition: the test oracle for direct_prf."""
    for ctr in range(256):
        uniform = hashlib.sha512(b"MIGP1-H1" + bytes([ctr]) + x).digest()
        p = G.from_uniform_bytes(uniform)
        if not G.is_identity(p):
            break
    q = G.mul(p, key_scalar)
    msg = b"MIGP1-H2" + len(x).to_bytes(2, "big") + x + q.to_bytes()
    return hashlib.sha256(msg).digest()[:PRF_LEN]


def test_direct_prf_against_independent_oracle():
    key = PrfKey(key=7, epoch=0)
    for u, w in [("alice", "hunter2"), ("bob@example.com", "p@ss w0rd!"), ("x", "y")]:
        x = credential_input(u, w)
        assert direct_prf(key, x) == independent_prf(7, x)


def test_protocol_equation():
    # finalize(evaluate(blind(x))) == direct_prf(x) for random keys/factors
    for _ in range(20):
        key = PrfKey.generate(epoch=0)
        x = credential_input("user%d" % secrets.randbelow(1000), "pw%d" % secrets.randbelow(1000))
        blinded, r = blind(x)
        assert finalize(x, evaluate(key, blinded), r) == direct_prf(key, x)


def test_blind_forced_factor_one():
    x = credential_input("alice", "hunter2")
    blinded, r = blind(x, factor=1)
    assert r == 1
    assert blinded == hash_to_group(x)
    with pytest.raises(ValueError):
        blind(x, factor=0)
    with pytest.raises(ValueError):
        blind(x, factor=ORDER)


def test_identity_key_path():
    x = credential_input("alice", "hunter2")
    key = PrfKey(key=1, epoch=0)  # explicit test-only construction
    assert evaluate(key, hash_to_group(x)) == hash_to_group(x)
    with pytest.raises(ValueError):
        PrfKey(key=0, epoch=0)
    with pytest.raises(ValueError):
        PrfKey(key=ORDER, epoch=0)


def test_generate_rejects_degenerate_scalars():
    class FakeRng:
        def __init__(self):
            self.values = [0, 1, 42]
        def randrange(self, _order):
            return self.values.pop(0)
    key = PrfKey.generate(epoch=3, rng=FakeRng())
    assert key.key == 42 and key.epoch == 3


def test_blinding_factors_fresh():
    x = credential_input("alice", "hunter2")
    seen_factors, seen_elements = set(), set()
    for _ in range(100):
        blinded, r = blind(x)
        seen_factors.add(r)
        seen_elements.add(blinded.to_bytes())
    assert len(seen_factors) == 100
    assert len(seen_elements) == 100


def test_hash_to_group_deterministic_and_collision_free():
    a = hash_to_group(b"same input")
    b = hash_to_group(b"same input")
    assert a == b
    seen = set()
    for i in range(10_000):
        seen.add(hash_to_group(b"input-%d" % i).to_bytes())
    assert len(seen) == 10_000


def test_prf_outputs_distinct_and_spread():
    key = PrfKey(key=1234567, epoch=0)
    outs = [direct_prf(key, b"x-%d" % i) for i in range(1000)]
    assert len(set(outs)) == 1000
    # nibble histogram should be roughly flat
    counts = [0] * 16
    for o in outs:
        for byte in o:
            counts[byte >> 4] += 1
            counts[byte & 0xF] += 1
    total = sum(counts)
    for c in counts:
        assert abs(c - total / 16) < total / 16 * 0.15


def test_avalanche():
    key = PrfKey(key=987654321, epoch=0)
    rnd = random.Random(7)
    distances = []
    for _ in range(1000):
        x = bytes(rnd.randrange(256) for _ in range(12))
        bit = rnd.randrange(len(x) * 8)
        flipped = bytearray(x)
        flipped[bit // 8] ^= 1 << (bit % 8)
        a = direct_prf(key, x)
        b = direct_prf(key, bytes(flipped))
        distances.append(sum(bin(p ^ q).count("1") for p, q in zip(a, b)))
    mean = sum(distances) / len(distances)
    assert 62 < mean < 66
    assert min(distances) >= 32 and max(distances) <= 96


def test_variant_tag():
    out = bytes.fromhex("00112233445566778899aabbccddee00")
    tagged = variant_tag(out)
    assert tagged.hex().endswith("01")
    assert tagged[:-1] == out[:-1]
    assert variant_tag(tagged) == out  # involution
    with pytest.raises(ValueError):
        variant_tag(out + b"\x00")


def test_rotation_equation():
    old = PrfKey.generate(epoch=0)
    new = PrfKey.generate(epoch=1)
    x = credential_input("carol", "correct horse")
    stored = evaluate(old, hash_to_group(x))
    rotated = rotate_stored(old, new, stored)
    assert rotated == evaluate(new, hash_to_group(x))
    # and the PRF output after rotation equals a fresh evaluation
    msg = b"MIGP1-H2" + len(x).to_bytes(2, "big") + x + rotated.to_bytes()
    assert hashlib.sha256(msg).digest()[:PRF_LEN] == direct_prf(new, x)
    delta = rotate_delta(old, new)
    assert (delta * old.key) % ORDER == new.key % ORDER


def test_credential_input_injective_framing():
    assert credential_input("ab", "c") != credential_input("a", "bc")
    assert credential_input("", "abc") == b"\x00\x00abc"
    with pytest.raises(ValueError):
        credential_input("a" * 70000, "pw")
    with pytest.raises(UnicodeEncodeError):
        credential_input("user", "pässword")


def test_entry_codec_last_bit():
    prf = secrets.token_bytes(PRF_LEN)
    assert entry_size(ENTRY_MODE_LAST_BIT) == 16
    exact = encode_entry(prf, False, ENTRY_MODE_LAST_BIT)
    var = encode_entry(prf, True, ENTRY_MODE_LAST_BIT)
    assert exact == prf and var == variant_tag(prf) and exact != var
    cands = entry_candidates(prf, ENTRY_MODE_LAST_BIT)
    assert cands == ((exact, False), (var, True))


def test_entry_codec_flag_byte():
    prf = secrets.token_bytes(PRF_LEN)
    assert entry_size(ENTRY_MODE_FLAG_BYTE) == 17
    exact = encode_entry(prf, False, ENTRY_MODE_FLAG_BYTE)
    var = encode_entry(prf, True, ENTRY_MODE_FLAG_BYTE)
    assert len(exact) == len(var) == 17
    assert exact[:16] == var[:16] == prf
    assert exact[16] ^ var[16] == 0x01
    with pytest.raises(ValueError):
        encode_entry(prf, False, "nonsense")


def test_key_file_round_trip(tmp_path):
    key = PrfKey.generate(epoch=5)
    path = tmp_path / "server.key"
    key.save(path)
    mode = stat.S_IMODE(os.stat(path).st_mode)
    assert mode == 0o600
    assert PrfKey.load(path) == key
    with pytest.raises(ValueError):
        (tmp_path / "empty.key").write_text("")
        PrfKey.load(tmp_path / "empty.key")
