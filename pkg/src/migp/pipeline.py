"""Offline pre-processing: cleaning, blocklisting, bucketized stores.

The server-side path from a raw breach corpus to a queryable artifact:

    clean_corpus -> build_blocklist -> build_store -> save_store

plus key rotation of an existing store from a sidecar of retained group
elements, which avoids re-hashing every credential to the curve.
"""

import hashlib
import io
import os
import statistics
from dataclasses import dataclass, field

from . import oprf
from .oprf import ENTRY_MODE_FLAG_BYTE, ENTRY_MODE_LAST_BIT, FastHash, PrfKey
from .group import get_group
from .similarity import generate_variants, valid_password

__all__ = [
    "Credential",
    "CleaningReport",
    "CorpusError",
    "canonicalize_username",
    "clean_corpus",
    "parse_corpus_line",
    "format_corpus_line",
    "read_corpus",
    "write_corpus",
    "build_blocklist",
    "write_blocklist",
    "read_blocklist",
    "bucket_id",
    "bucket_hex",
    "parse_bucket_hex",
    "StoreHeader",
    "BucketStore",
    "Sidecar",
    "build_store",
    "rotate_store",
    "fetch_bucket",
    "save_store",
    "load_store",
]

BUCKET_LABEL = b"MIGP1-BUCKET"
MAX_USER_PASSWORDS = 1000

STORE_MAGIC = b"MIGP"
STORE_VERSION = 1
SIDECAR_MAGIC = b"MIGS"
_MODE_CODES = {ENTRY_MODE_LAST_BIT: 0, ENTRY_MODE_FLAG_BYTE: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


class CorpusError(ValueError):
    """Malformed corpus input; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Credential:
    username: str
    password: str


def canonicalize_username(username):
    return username.strip(" \t\r\n\f\v").lower()


# --- corpus text format -------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n"}


def _escape_field(value):
    return "".join(_ESCAPES.get(ch, ch) for ch in value)


def _unescape_field(value, lineno):
    out = []
    it = iter(value)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        try:
            code = next(it)
        except StopIteration:
            raise CorpusError(lineno, "dangling backslash") from None
        if code not in _UNESCAPES:
            raise CorpusError(lineno, f"bad escape \\{code}")
        out.append(_UNESCAPES[code])
    return "".join(out)


def format_corpus_line(username, password):
    return f"{_escape_field(username)}\t{_escape_field(password)}\n"


def parse_corpus_line(line, lineno=0):
    """One `username<TAB>password` record; tabs inside fields are escaped."""
    line = line.rstrip("\n")
    fields = []
    current = []
    escaped = False
    for ch in line:
        if escaped:
            current.append("\\" + ch)
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == "\t":
            fields.append("".join(current))
            current = []
        else:
            current.append(ch)
    if escaped:
        raise CorpusError(lineno, "dangling backslash")
    fields.append("".join(current))
    if len(fields) != 2:
        raise CorpusError(lineno, f"expected 2 tab-separated fields, got {len(fields)}")
    return (
        _unescape_field(fields[0], lineno),
        _unescape_field(fields[1], lineno),
    )


def read_corpus(path):
    """Yield (username, password) rows; malformed lines raise with their
    line number."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            yield parse_corpus_line(line, lineno)


def write_corpus(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for username, password in rows:
            fh.write(format_corpus_line(username, password))


# --- cleaning -----------------------------------------------------------


@dataclass
class CleaningReport:
    total: int = 0
    kept: int = 0
    bad_password: int = 0
    empty_username: int = 0
    heavy_user: int = 0

    @property
    def rejected(self):
        return self.bad_password + self.empty_username + self.heavy_user


def clean_corpus(rows, max_user_passwords=MAX_USER_PASSWORDS):
    """Validate and canonicalize raw rows.

    Drops passwords that are non-ASCII, non-printable, empty, or longer
    than 30 characters; lowercases and trims usernames; then drops every
    credential of any user holding more than ``max_user_passwords``
    passwords (such "users" are almost always aggregation artifacts).
    Returns (credentials, report); counts in the report sum to the
    input row count.
    """
    survivors = []
    report = CleaningReport()
    per_user = {}
    for username, password in rows:
        report.total += 1
        if not valid_password(password):
            report.bad_password += 1
            continue
        username = canonicalize_username(username)
        if not username:
            report.empty_username += 1
            continue
        survivors.append(Credential(username, password))
        per_user[username] = per_user.get(username, 0) + 1
    heavy = {u for u, count in per_user.items() if count > max_user_passwords}
    kept = [c for c in survivors if c.username not in heavy]
    report.heavy_user = len(survivors) - len(kept)
    report.kept = len(kept)
    return kept, report


# --- blocklist ----------------------------------------------------------


def build_blocklist(credentials, beta, rules, n):
    """Top-beta corpus passwords by frequency, plus their variants.

    Frequency ties break lexicographically so the cut is deterministic.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return frozenset()
    counts = {}
    for cred in credentials:
        counts[cred.password] = counts.get(cred.password, 0) + 1
    top = sorted(counts, key=lambda w: (-counts[w], w))[:beta]
    blocked = set(top)
    for password in top:
        blocked.update(generate_variants(rules, password, n))
    return frozenset(blocked)


def write_blocklist(path, blocklist):
    with open(path, "w", encoding="utf-8") as fh:
        for password in sorted(blocklist):
            fh.write(password + "\n")


def read_blocklist(path):
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.rstrip("\n") for line in fh if line.rstrip("\n"))


# --- bucketization ------------------------------------------------------


def bucket_id(username, l):
    """First l bits (big-endian within bytes) of the username hash."""
    if not 8 <= l <= 32:
        raise ValueError("prefix length out of [8, 32]")
    digest = hashlib.sha256(
        BUCKET_LABEL + canonicalize_username(username).encode("utf-8")
    ).digest()
    value = int.from_bytes(digest[:4], "big")
    return value >> (32 - l)


def bucket_hex(bid, l):
    """Wire form: ceil(l/8) bytes, prefix left-aligned, spare low bits 0."""
    if not 8 <= l <= 32:
        raise ValueError("prefix length out of [8, 32]")
    if not 0 <= bid < (1 << l):
        raise ValueError("bucket id out of range")
    width = (l + 7) // 8
    return (bid << (width * 8 - l)).to_bytes(width, "big").hex()


def parse_bucket_hex(text, l):
    if not 8 <= l <= 32:
        raise ValueError("prefix length out of [8, 32]")
    width = (l + 7) // 8
    if len(text) != width * 2:
        raise ValueError("bucket id has the wrong width")
    value = int(text, 16)
    shift = width * 8 - l
    if value & ((1 << shift) - 1):
        raise ValueError("spare bucket-id bits must be zero")
    return value >> shift


# --- store container ----------------------------------------------------


@dataclass(frozen=True)
class StoreHeader:
    l: int
    entry_mode: str
    n: int
    epoch: int
    beta: int
    entry_count: int
    group_id: str = "ristretto255"
    ruleset_id: str = "dasr"
    backend: str = "fast"
    salt_bits: int = 0
    h1_label: bytes = oprf.H1_LABEL
    h2_label: bytes = oprf.H2_LABEL
    version: int = STORE_VERSION

    @property
    def entry_size(self):
        return oprf.entry_size(self.entry_mode)


# byte offset of the epoch field, fixed so rotation comparisons can
# splice it out without parsing
EPOCH_OFFSET = 12


def _pack_var(value):
    data = value.encode("utf-8") if isinstance(value, str) else value
    if len(data) > 0xFFFF:
        raise ValueError("variable header field too long")
    return len(data).to_bytes(2, "big") + data


class _Reader(io.BytesIO):
    def take(self, count):
        data = self.read(count)
        if len(data) != count:
            raise ValueError("truncated store")
        return data

    def take_var(self):
        return self.take(int.from_bytes(self.take(2), "big"))


class BucketStore:
    """Immutable bucketized PRF store.

    ``buckets`` is a tuple of 2^l tuples of fixed-width entry byte
    strings, each strictly sorted.  All mutation happens in the builder
    functions; an instance is safe to share across threads.
    """

    def __init__(self, header, buckets):
        if len(buckets) != 1 << header.l:
            raise ValueError("bucket count does not match prefix length")
        total = 0
        size = header.entry_size
        for bucket in buckets:
            for i, entry in enumerate(bucket):
                if len(entry) != size:
                    raise ValueError("entry width does not match header mode")
                if i and entry <= bucket[i - 1]:
                    raise ValueError("bucket entries must be strictly sorted")
            total += len(bucket)
        if total != header.entry_count:
            raise ValueError("header entry count does not match buckets")
        self.header = header
        self.buckets = tuple(tuple(b) for b in buckets)

    def fetch(self, bid):
        if not 0 <= bid < (1 << self.header.l):
            raise ValueError("bucket id out of range")
        return self.buckets[bid]

    def stats(self):
        sizes = [len(b) for b in self.buckets]
        return {
            "buckets": len(sizes),
            "entries": sum(sizes),
            "mean": statistics.fmean(sizes),
            "std": statistics.pstdev(sizes),
            "max": max(sizes),
        }

    def to_bytes(self):
        header = self.header
        out = [
            STORE_MAGIC,
            header.version.to_bytes(2, "big"),
            header.l.to_bytes(1, "big"),
            _MODE_CODES[header.entry_mode].to_bytes(1, "big"),
            header.n.to_bytes(2, "big"),
            header.salt_bits.to_bytes(1, "big"),
            b"\x00",
            header.epoch.to_bytes(8, "big"),
            header.beta.to_bytes(8, "big"),
            header.entry_count.to_bytes(8, "big"),
            _pack_var(header.group_id),
            _pack_var(header.ruleset_id),
            _pack_var(header.backend),
            _pack_var(header.h1_label),
            _pack_var(header.h2_label),
        ]
        start = 0
        index = []
        for bucket in self.buckets:
            index.append(start.to_bytes(8, "big"))
            start += len(bucket)
        out.extend(index)
        for bucket in self.buckets:
            out.extend(bucket)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob):
        reader = _Reader(blob)
        if reader.take(4) != STORE_MAGIC:
            raise ValueError("not a bucket store")
        version = int.from_bytes(reader.take(2), "big")
        if version != STORE_VERSION:
            raise ValueError(f"unsupported store version {version}")
        l = reader.take(1)[0]
        mode_code = reader.take(1)[0]
        if mode_code not in _MODE_NAMES:
            raise ValueError(f"unknown entry mode code {mode_code}")
        n = int.from_bytes(reader.take(2), "big")
        salt_bits = reader.take(1)[0]
        reader.take(1)
        epoch = int.from_bytes(reader.take(8), "big")
        beta = int.from_bytes(reader.take(8), "big")
        entry_count = int.from_bytes(reader.take(8), "big")
        header = StoreHeader(
            l=l,
            entry_mode=_MODE_NAMES[mode_code],
            n=n,
            epoch=epoch,
            beta=beta,
            entry_count=entry_count,
            group_id=reader.take_var().decode("utf-8"),
            ruleset_id=reader.take_var().decode("utf-8"),
            backend=reader.take_var().decode("utf-8"),
            h1_label=reader.take_var(),
            h2_label=reader.take_var(),
            version=version,
        )
        starts = [
            int.from_bytes(reader.take(8), "big") for _ in range(1 << l)
        ]
        size = header.entry_size
        buckets = []
        for i, start in enumerate(starts):
            end = starts[i + 1] if i + 1 < len(starts) else entry_count
            if end < start:
                raise ValueError("corrupt bucket index")
            bucket = []
            for _ in range(end - start):
                bucket.append(reader.take(size))
            buckets.append(tuple(bucket))
        if reader.read(1):
            raise ValueError("trailing bytes after store payload")
        return cls(header, buckets)

    def __eq__(self, other):
        return (
            isinstance(other, BucketStore)
            and self.header == other.header
            and self.buckets == other.buckets
        )


def fetch_bucket(store, bid):
    return store.fetch(bid)


def save_store(store, path):
    """Write-then-rename so readers never see a partial file."""
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(store.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_store(path):
    with open(path, "rb") as fh:
        return BucketStore.from_bytes(fh.read())


# --- sidecar ------------------------------------------------------------


class Sidecar:
    """Per-entry (PRF input, flag, blinded-by-key group element) records
    in store order.  Retaining these makes key rotation a pure group
    operation instead of a corpus rebuild.
    """

    def __init__(self, epoch, records):
        self.epoch = epoch
        self.records = tuple(records)  # (frame bytes, variant bool, element bytes)

    def to_bytes(self):
        out = [
            SIDECAR_MAGIC,
            STORE_VERSION.to_bytes(2, "big"),
            self.epoch.to_bytes(8, "big"),
            len(self.records).to_bytes(8, "big"),
        ]
        for frame, variant, element in self.records:
            out.append(len(frame).to_bytes(2, "big"))
            out.append(frame)
            out.append(b"\x01" if variant else b"\x00")
            out.append(element)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob):
        reader = _Reader(blob)
        if reader.take(4) != SIDECAR_MAGIC:
            raise ValueError("not a sidecar file")
        if int.from_bytes(reader.take(2), "big") != STORE_VERSION:
            raise ValueError("unsupported sidecar version")
        epoch = int.from_bytes(reader.take(8), "big")
        count = int.from_bytes(reader.take(8), "big")
        records = []
        for _ in range(count):
            frame = reader.take_var()
            variant = reader.take(1) == b"\x01"
            element = reader.take(32)
            records.append((frame, variant, element))
        if reader.read(1):
            raise ValueError("trailing bytes after sidecar payload")
        return cls(epoch, records)

    def save(self, path):
        tmp = f"{path}.tmp.{os.getpid()}"
        try:
            with open(tmp, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def __eq__(self, other):
        return (
            isinstance(other, Sidecar)
            and self.epoch == other.epoch
            and self.records == other.records
        )


# --- store building -----------------------------------------------------


def _expand_user(passwords, rules, n, blocklist):
    """(password, variant?) pairs for one user's password set.

    A string that is both a stored password and a variant of another
    stored password stays exact: demoting it would make a truly
    breached credential look merely similar.
    """
    exact = [w for w in passwords if w not in blocklist]
    exact_set = set(exact)
    out = [(w, False) for w in exact]
    if n == 0:  # no rule table needed for an exact-only store
        return out
    seen_variants = set()
    for w in exact:
        for variant in generate_variants(rules, w, n):
            if variant in blocklist or variant in exact_set:
                continue
            if variant not in seen_variants:
                seen_variants.add(variant)
                out.append((variant, True))
    return out


def build_store(
    credentials,
    key,
    l,
    rules,
    n,
    blocklist=frozenset(),
    entry_mode=ENTRY_MODE_LAST_BIT,
    h2=None,
    rng=None,
    beta=0,
    ruleset_id=None,
    with_sidecar=False,
):
    """Evaluate the PRF over a cleaned corpus and bucketize.

    With ``with_sidecar`` returns (store, sidecar); the sidecar holds
    one record per stored entry, in store order.
    """
    h2 = h2 if h2 is not None else FastHash()
    group = get_group(key.group_id)
    mode = entry_mode
    by_user = {}
    for cred in credentials:
        by_user.setdefault(cred.username, []).append(cred.password)

    # entry -> (frame, variant, element bytes), keyed for dedup; exact
    # entries are inserted first so a colliding variant never replaces one
    staged = [dict() for _ in range(1 << l)]
    for username, passwords in by_user.items():
        bid = bucket_id(username, l)
        bucket = staged[bid]
        for password, variant in _expand_user(passwords, rules, n, blocklist):
            frame = oprf.credential_input(username, password)
            element = oprf.hash_to_group(frame, group_id=key.group_id)
            raised = group.mul(element, key.key)
            prf = h2.store_digest(
                oprf._h2_message(frame, raised.to_bytes()), rng=rng
            )
            entry = oprf.encode_entry(prf, variant, mode)
            if entry not in bucket:
                bucket[entry] = (frame, variant, raised.to_bytes())

    buckets = []
    records = []
    total = 0
    for bucket in staged:
        ordered = sorted(bucket)
        buckets.append(tuple(ordered))
        total += len(ordered)
        if with_sidecar:
            records.extend(bucket[entry] for entry in ordered)

    header = StoreHeader(
        l=l,
        entry_mode=mode,
        n=n,
        epoch=key.epoch,
        beta=beta,
        entry_count=total,
        group_id=key.group_id,
        ruleset_id=ruleset_id if ruleset_id is not None
        else (rules.name if rules is not None else "none"),
        backend=getattr(h2, "name", "fast"),
        salt_bits=getattr(getattr(h2, "params", None), "bits", 0)
        if getattr(h2, "name", "") == "salted"
        else 0,
    )
    store = BucketStore(header, buckets)
    if with_sidecar:
        return store, Sidecar(key.epoch, records)
    return store


def rotate_store(store, old_key, new_key, sidecar, h2=None):
    """Re-key a store from its sidecar without touching the corpus.

    Every retained element is raised to new/old; entries are re-derived
    and re-sorted per bucket.  Returns (store, sidecar) under the new
    key.  Bucket membership depends only on usernames, so it never
    changes.
    """
    if sidecar.epoch != store.header.epoch:
        raise ValueError("sidecar epoch does not match store epoch")
    if len(sidecar.records) != store.header.entry_count:
        raise ValueError("sidecar record count does not match store")
    if old_key.epoch != store.header.epoch:
        raise ValueError("old key epoch does not match store")
    h2 = h2 if h2 is not None else FastHash()
    group = get_group(old_key.group_id)
    delta = oprf.rotate_delta(old_key, new_key)
    mode = store.header.entry_mode

    buckets = []
    records = []
    cursor = 0
    for bucket in store.buckets:
        staged = {}
        for _ in bucket:
            frame, variant, element_bytes = sidecar.records[cursor]
            cursor += 1
            rotated = group.mul(group.decode(element_bytes), delta)
            prf = h2.store_digest(oprf._h2_message(frame, rotated.to_bytes()))
            entry = oprf.encode_entry(prf, variant, mode)
            if entry not in staged:
                staged[entry] = (frame, variant, rotated.to_bytes())
        ordered = sorted(staged)
        buckets.append(tuple(ordered))
        records.extend(staged[entry] for entry in ordered)

    header = StoreHeader(
        l=store.header.l,
        entry_mode=mode,
        n=store.header.n,
        epoch=new_key.epoch,
        beta=store.header.beta,
        entry_count=sum(len(b) for b in buckets),
        group_id=store.header.group_id,
        ruleset_id=store.header.ruleset_id,
        backend=store.header.backend,
        salt_bits=store.header.salt_bits,
        h1_label=store.header.h1_label,
        h2_label=store.header.h2_label,
        version=store.header.version,
    )
    return BucketStore(header, buckets), Sidecar(new_key.epoch, records)
