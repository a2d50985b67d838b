"""Oblivious PRF core for the credential-checking protocol.

The server holds a scalar key k.  The PRF over an input string x is

    F_k(x) = H2(x, H1(x)^k)

where H1 hashes into the prime-order group and H2 compresses the group
element back to a short bitstring.  A client learns F_k(x) without
revealing x: it sends H1(x)^r for a fresh random r, the server raises
to k, and the client strips r.  Breach-store entries are these PRF
outputs; entries for password variants carry a one-bit flag so a lookup
can distinguish "exact credential" from "variant of a stored credential".

H2 is pluggable so that deliberately expensive constructions (memory-hard
hash, time-lock puzzle, secret salt) can be swapped in to throttle
offline guessing; see migp.ratelimit.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import stat
from dataclasses import dataclass

from .group import GroupElement, get_group

__all__ = [
    "PRF_LEN",
    "H1_LABEL",
    "H2_LABEL",
    "ENTRY_MODES",
    "PrfKey",
    "FastHash",
    "credential_input",
    "hash_to_group",
    "blind",
    "evaluate",
    "finalize",
    "finalize_candidates",
    "direct_prf",
    "variant_tag",
    "rotate_delta",
    "rotate_stored",
    "encode_entry",
    "entry_candidates",
    "entry_size",
]

PRF_LEN = 16  # bits of PRF output kept in the store

H1_LABEL = b"MIGP1-H1"
H2_LABEL = b"MIGP1-H2"
_TAIL_LABEL = b"MIGP1-TAIL"

# Entry modes: how the exact/variant flag is folded into a stored entry.
ENTRY_MODE_LAST_BIT = "last-bit"    # flip the low bit of the last PRF byte
ENTRY_MODE_FLAG_BYTE = "flag-byte"  # append a derived byte XOR the flag
ENTRY_MODES = (ENTRY_MODE_LAST_BIT, ENTRY_MODE_FLAG_BYTE)

_MAX_HASH_ATTEMPTS = 256


class FastHash:
    """Default H2 back-end: a plain SHA-256 truncation."""

    name = "fast"
    deterministic = True

    def digest(self, message):
        return hashlib.sha256(message).digest()[:PRF_LEN]

    def store_digest(self, message, rng=None):
        return self.digest(message)

    def candidates(self, message):
        yield self.digest(message)


_DEFAULT_H2 = FastHash()


@dataclass(frozen=True)
class PrfKey:
    """Server PRF key: a group scalar plus a rotation epoch."""

    key: int
    epoch: int
    group_id: str = "ristretto255"

    def __post_init__(self):
        order = get_group(self.group_id).order
        if not 1 <= self.key < order:
            raise ValueError("PRF key scalar out of range")
        if self.epoch < 0:
            raise ValueError("key epoch must be non-negative")

    @classmethod
    def generate(cls, epoch=0, group_id="ristretto255", rng=None):
        # Production sampling excludes 0 and 1; the identity-key path is
        # reachable only by constructing PrfKey(1, ...) explicitly.
        order = get_group(group_id).order
        randbelow = rng.randrange if rng is not None else None
        while True:
            k = randbelow(order) if randbelow else secrets.randbelow(order)
            if k > 1:
                return cls(key=k, epoch=epoch, group_id=group_id)

    def save(self, path):
        data = f"group = {self.group_id}\nepoch = {self.epoch}\nscalar = {self.key:064x}\n"
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, stat.S_IRUSR | stat.S_IWUSR)
        with os.fdopen(fd, "w") as fh:
            fh.write(data)

    @classmethod
    def load(cls, path):
        fields = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                k, _, v = line.partition("=")
                fields[k.strip()] = v.strip()
        try:
            return cls(
                key=int(fields["scalar"], 16),
                epoch=int(fields["epoch"]),
                group_id=fields.get("group", "ristretto255"),
            )
        except KeyError as exc:
            raise ValueError(f"key file {path} is missing field {exc}") from None


def credential_input(username, password):
    """Frame a (username, password) pair as an injective PRF input."""
    u = username.encode("utf-8")
    w = password.encode("ascii")
    if len(u) > 0xFFFF:
        raise ValueError("username too long to frame")
    return len(u).to_bytes(2, "big") + u + w


def hash_to_group(x, group_id="ristretto255"):
    """Map an input string to a group element (H1)."""
    group = get_group(group_id)
    for ctr in range(_MAX_HASH_ATTEMPTS):
        uniform = hashlib.sha512(H1_LABEL + bytes([ctr]) + x).digest()
        element = group.from_uniform_bytes(uniform)
        if not group.is_identity(element):
            return element
    raise RuntimeError("hash_to_group failed to produce a usable element")


def _h2_message(x, element_bytes):
    return H2_LABEL + len(x).to_bytes(2, "big") + x + element_bytes


def blind(x, factor=None, rng=None, group_id="ristretto255"):
    """Blind an input for the first protocol flow.

    Returns (blinded element, blinding factor).  A caller-supplied
    factor (tests only) may be any scalar in [1, q-1] including 1;
    the production path samples from [2, q-1].
    """
    group = get_group(group_id)
    if factor is None:
        randbelow = rng.randrange if rng is not None else secrets.randbelow
        while True:
            factor = randbelow(group.order)
            if factor > 1:
                break
    elif not 1 <= factor < group.order:
        raise ValueError("blinding factor out of range")
    return group.mul(hash_to_group(x, group_id), factor), factor


def evaluate(key, element):
    """Server side: raise a blinded element to the PRF key."""
    group = get_group(key.group_id)
    return group.mul(element, key.key)


def _unblind(evaluated, factor, group):
    inv = pow(factor, group.order - 2, group.order)
    return group.mul(evaluated, inv)


def finalize(x, evaluated, factor, h2=None, group_id="ristretto255"):
    """Client side: strip the blinding factor and compress to a PRF output."""
    group = get_group(group_id)
    element = _unblind(evaluated, factor, group)
    h2 = h2 or _DEFAULT_H2
    return h2.digest(_h2_message(x, element.to_bytes()))


def finalize_candidates(x, evaluated, factor, h2=None, group_id="ristretto255"):
    """Like finalize, but yields every candidate digest an H2 back-end
    admits (more than one only for the salted construction)."""
    group = get_group(group_id)
    element = _unblind(evaluated, factor, group)
    h2 = h2 or _DEFAULT_H2
    yield from h2.candidates(_h2_message(x, element.to_bytes()))


def direct_prf(key, x, h2=None, rng=None):
    """Server-side direct PRF evaluation (used when building the store)."""
    group = get_group(key.group_id)
    element = group.mul(hash_to_group(x, key.group_id), key.key)
    h2 = h2 or _DEFAULT_H2
    return h2.store_digest(_h2_message(x, element.to_bytes()), rng=rng)


def variant_tag(prf_output):
    """Flip the final bit: the PRF value that marks a variant entry."""
    if len(prf_output) != PRF_LEN:
        raise ValueError("PRF output must be %d bytes" % PRF_LEN)
    return prf_output[:-1] + bytes([prf_output[-1] ^ 0x01])


def rotate_delta(old_key, new_key):
    """Scalar that maps stored elements from the old key to the new one."""
    if old_key.group_id != new_key.group_id:
        raise ValueError("keys belong to different groups")
    order = get_group(old_key.group_id).order
    return (new_key.key * pow(old_key.key, order - 2, order)) % order


def rotate_stored(old_key, new_key, element):
    """Re-key a stored H1(x)^k_old element to H1(x)^k_new."""
    group = get_group(old_key.group_id)
    return group.mul(element, rotate_delta(old_key, new_key))


def _flag_tail(prf_output):
    return hashlib.sha256(_TAIL_LABEL + prf_output).digest()[0]


def entry_size(mode):
    if mode == ENTRY_MODE_LAST_BIT:
        return PRF_LEN
    if mode == ENTRY_MODE_FLAG_BYTE:
        return PRF_LEN + 1
    raise ValueError(f"unknown entry mode: {mode!r}")


def encode_entry(prf_output, variant, mode):
    """Encode a PRF output as a stored bucket entry."""
    if len(prf_output) != PRF_LEN:
        raise ValueError("PRF output must be %d bytes" % PRF_LEN)
    if mode == ENTRY_MODE_LAST_BIT:
        return variant_tag(prf_output) if variant else prf_output
    if mode == ENTRY_MODE_FLAG_BYTE:
        flag = 0x01 if variant else 0x00
        return prf_output + bytes([_flag_tail(prf_output) ^ flag])
    raise ValueError(f"unknown entry mode: {mode!r}")


def entry_candidates(prf_output, mode):
    """Both entries a PRF output could appear as: (bytes, is_variant)."""
    return (
        (encode_entry(prf_output, False, mode), False),
        (encode_entry(prf_output, True, mode), True),
    )
