"""Client-cost H2 back-ends and server-side query throttling.

Three interchangeable ways to make bulk PRF evaluation expensive for a
client while keeping the server's own pre-processing cheap:

* ``SlowHash``: a memory-hard password hash (scrypt) paid equally by
  both sides per evaluation.
* ``TimelockHash``: v sequential modular squarings in an RSA group for
  anyone without the factorization; one trapdoor exponentiation with it.
* ``SaltedHash``: the server hashes with a random salt it then discards,
  so a matching client must brute-force the salt space.

All three plug into the ``h2`` slot of the OPRF functions: they expose
``digest`` / ``store_digest`` / ``candidates`` like the default fast
back-end.  ``TokenBucket`` is unrelated to hashing and throttles the
query endpoints by element count.
"""

import hashlib
import secrets
import threading
import time

try:
    from gmpy2 import mpz
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    def mpz(value):
        return value

from .oprf import PRF_LEN, FastHash

__all__ = [
    "SlowHash",
    "TimelockParams",
    "TimelockHash",
    "SaltParams",
    "SaltedHash",
    "salted_digest_server",
    "salted_match_client",
    "timelock_fast",
    "timelock_slow",
    "generate_timelock_params",
    "calibrate_timelock",
    "calibrate_slow_hash",
    "TokenBucket",
    "BACKENDS",
    "make_backend",
]

_fast = FastHash()


# --- memory-hard slow hash --------------------------------------------

_SCRYPT_SALT = b"MIGP1-SLOWHASH"


class SlowHash:
    """scrypt-based H2: deterministic, tunable time and memory cost.

    ``log2_n`` is the CPU/memory cost exponent (scrypt N = 2^log2_n);
    doubling N roughly doubles both.  The salt is a fixed label: H2
    must stay a pure function of its input or stored digests would be
    unmatchable.
    """

    name = "slow"
    deterministic = True

    def __init__(self, log2_n=14, block_size=8, parallelism=1, max_mem_bytes=1 << 26):
        if not 1 <= log2_n <= 24:
            raise ValueError("log2_n out of range")
        needed = 128 * block_size * (1 << log2_n) * parallelism
        if needed > max_mem_bytes:
            raise ValueError(
                f"scrypt cost needs {needed} bytes, over the {max_mem_bytes} budget"
            )
        self.log2_n = log2_n
        self.block_size = block_size
        self.parallelism = parallelism
        self._maxmem = needed + (1 << 20)

    def digest(self, message):
        return hashlib.scrypt(
            message,
            salt=_SCRYPT_SALT,
            n=1 << self.log2_n,
            r=self.block_size,
            p=self.parallelism,
            maxmem=self._maxmem,
            dklen=PRF_LEN,
        )

    def store_digest(self, message, rng=None):
        return self.digest(message)

    def candidates(self, message):
        yield self.digest(message)


def calibrate_slow_hash(target_ms=100.0, max_mem_bytes=1 << 26):
    """Time successive cost doublings and keep the one closest to the
    target latency.  Costs quantize to powers of two, so the result can
    sit anywhere in roughly [2/3, 4/3] of the target."""
    if target_ms <= 0:
        raise ValueError("target must be positive")
    best = None
    for log2_n in range(10, 25):
        try:
            h = SlowHash(log2_n=log2_n, max_mem_bytes=max_mem_bytes)
        except ValueError:
            break
        elapsed_ms = float("inf")
        for _ in range(2):  # first call pays the allocation, time the min
            start = time.perf_counter()
            h.digest(b"calibration probe")
            elapsed_ms = min(elapsed_ms, (time.perf_counter() - start) * 1000.0)
        distance = abs(elapsed_ms - target_ms)
        if best is None or distance < best[0]:
            best = (distance, h)
        if elapsed_ms > target_ms:
            break
    return best[1]


# --- RSA time-lock puzzle ---------------------------------------------

_TIMELOCK_LABEL = b"MIGP1-TIMELOCK"


class TimelockParams:
    """Public puzzle parameters, optionally with the factorization.

    The modulus owner keeps (p, q); everyone else gets only (N, v).
    phi is derived on demand.  The factored form enables the CRT fast
    path, which is what makes server pre-processing cheap.
    """

    __slots__ = ("modulus", "cost", "_p", "_q")

    def __init__(self, modulus, cost, p=None, q=None):
        if cost < 1:
            raise ValueError("squaring count must be at least 1")
        if modulus.bit_length() < 2048:
            raise ValueError("modulus below 2048 bits")
        if (p is None) != (q is None):
            raise ValueError("supply both primes or neither")
        if p is not None and p * q != modulus:
            raise ValueError("primes do not multiply to the modulus")
        self.modulus = modulus
        self.cost = cost
        self._p = p
        self._q = q

    @property
    def has_trapdoor(self):
        return self._p is not None

    @property
    def phi(self):
        if not self.has_trapdoor:
            raise ValueError("trapdoor not available")
        return (self._p - 1) * (self._q - 1)

    def public(self):
        """Strip the trapdoor for distribution to clients."""
        return TimelockParams(self.modulus, self.cost)

    def with_cost(self, cost):
        return TimelockParams(self.modulus, cost, self._p, self._q)

    def save(self, path):
        """Write the factored form to a private key file."""
        if not self.has_trapdoor:
            raise ValueError("refusing to save public-only params as a key file")
        import os

        data = (
            f"modulus = {self.modulus:x}\n"
            f"cost = {self.cost}\n"
            f"p = {self._p:x}\n"
            f"q = {self._q:x}\n"
        ).encode("ascii")
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)

    @classmethod
    def load(cls, path):
        fields = {}
        with open(path, "rb") as fh:
            for line in fh.read().decode("ascii").splitlines():
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        try:
            modulus = int(fields["modulus"], 16)
            cost = int(fields["cost"])
        except KeyError as exc:
            raise ValueError(f"key file missing field: {exc}") from None
        p = int(fields["p"], 16) if "p" in fields else None
        q = int(fields["q"], 16) if "q" in fields else None
        return cls(modulus, cost, p, q)

    def __eq__(self, other):
        return (
            isinstance(other, TimelockParams)
            and self.modulus == other.modulus
            and self.cost == other.cost
            and self._p == other._p
        )

    def __repr__(self):
        role = "trapdoor" if self.has_trapdoor else "public"
        return f"TimelockParams({self.modulus.bit_length()} bits, v={self.cost}, {role})"


def generate_timelock_params(cost, bits=2048):
    """Fresh RSA modulus with the factorization retained."""
    from cryptography.hazmat.primitives.asymmetric import rsa

    key = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    numbers = key.private_numbers()
    return TimelockParams(
        numbers.public_numbers.n, cost, numbers.p, numbers.q
    )


def _hash_to_residue(message, modulus):
    """Map bytes to [2, N-2] by counter-mode expansion of SHA-256.

    A raw 256-bit hash would be a structurally tiny element of a
    2048-bit group, so the hash is widened to the modulus size first.
    """
    width = (modulus.bit_length() + 7) // 8
    for attempt in range(256):
        blocks = []
        for counter in range((width + 31) // 32):
            blocks.append(
                hashlib.sha256(
                    _TIMELOCK_LABEL
                    + attempt.to_bytes(2, "big")
                    + counter.to_bytes(2, "big")
                    + message
                ).digest()
            )
        value = int.from_bytes(b"".join(blocks)[:width], "big") % modulus
        if value not in (0, 1, modulus - 1):
            return value
    raise RuntimeError("hash-to-residue failed to land in the group")


def _compress(message, residue, modulus):
    width = (modulus.bit_length() + 7) // 8
    return _fast.digest(message + residue.to_bytes(width, "big"))


def timelock_fast(params, message):
    """Trapdoor evaluation: one short exponentiation instead of v
    squarings.  CRT halves the width when the primes are at hand."""
    if not params.has_trapdoor:
        raise ValueError("fast path needs the trapdoor")
    base = _hash_to_residue(message, params.modulus)
    p, q = params._p, params._q
    ep = pow(2, params.cost, p - 1)
    eq = pow(2, params.cost, q - 1)
    rp = int(pow(mpz(base % p), mpz(ep), mpz(p)))
    rq = int(pow(mpz(base % q), mpz(eq), mpz(q)))
    # Garner's recombination
    q_inv = pow(q, -1, p)
    residue = (rq + q * (((rp - rq) * q_inv) % p)) % params.modulus
    return _compress(message, residue, params.modulus)


def timelock_slow(params, message, counter=None):
    """The client path: v strictly sequential modular squarings.

    ``counter`` (a one-element list) receives the number of squarings
    actually performed; sequentiality is the security property, so no
    batching or windowing is applied.
    """
    n = mpz(params.modulus)
    value = mpz(_hash_to_residue(message, params.modulus))
    ops = 0
    for _ in range(params.cost):
        value = value * value % n
        ops += 1
    if counter is not None:
        counter[0] = ops
    return _compress(message, int(value), params.modulus)


class TimelockHash:
    """H2 back-end wrapping the puzzle: evaluates via the trapdoor when
    the params carry one, otherwise by sequential squaring."""

    name = "timelock"
    deterministic = True

    def __init__(self, params):
        self.params = params
        self.last_squarings = 0

    def digest(self, message):
        if self.params.has_trapdoor:
            return timelock_fast(self.params, message)
        counter = [0]
        out = timelock_slow(self.params, message, counter)
        self.last_squarings = counter[0]
        return out

    def store_digest(self, message, rng=None):
        return self.digest(message)

    def candidates(self, message):
        yield self.digest(message)


def calibrate_timelock(params, target_ms=100.0, probe=4096):
    """Measure the local squaring rate and set v for a target latency.

    Returns params with the new cost.  The probe burns a few
    milliseconds; rates are stable enough that one run suffices.
    """
    if target_ms <= 0:
        raise ValueError("target must be positive")
    n = mpz(params.modulus)
    value = mpz(_hash_to_residue(b"calibration probe", params.modulus))
    start = time.perf_counter()
    for _ in range(probe):
        value = value * value % n
    elapsed = time.perf_counter() - start
    rate = probe / elapsed
    cost = max(1, int(rate * target_ms / 1000.0))
    return params.with_cost(cost)


# --- secret-salt construction -----------------------------------------


class SaltParams:
    """Size of the per-entry secret salt, in bits."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        if not 1 <= bits <= 32:
            raise ValueError("salt bits out of [1, 32]")
        self.bits = bits

    def __eq__(self, other):
        return isinstance(other, SaltParams) and self.bits == other.bits

    def __repr__(self):
        return f"SaltParams(bits={self.bits})"


def _salted(message, params, r):
    width = (params.bits + 7) // 8
    return _fast.digest(message + r.to_bytes(width, "big"))


def salted_digest_server(params, message, rng=None):
    """Hash under a fresh salt and forget it.

    The salt never leaves this frame; recovering it costs the client an
    expected 2^(v-1) hash attempts.
    """
    if rng is None:
        r = secrets.randbits(params.bits)
    else:
        r = rng.getrandbits(params.bits)
    return _salted(message, params, r)


def salted_match_client(params, message, candidate):
    """Scan the salt space for the candidate digest.

    Returns the matching salt, or None when the space is exhausted
    (meaning the digest was not produced from this message).  The scan
    is embarrassingly parallel; that is the construction's documented
    weakness and is left as-is.
    """
    for r in range(1 << params.bits):
        if _salted(message, params, r) == candidate:
            assert _salted(message, params, r) == candidate
            return r
    return None


class SaltedHash:
    """H2 back-end for the salted construction.

    Not deterministic: a stored digest embeds a discarded salt, so
    matching goes through ``candidates`` (every possible salt), never
    through ``digest``.
    """

    name = "salted"
    deterministic = False

    def __init__(self, params, rng=None):
        self.params = params
        self._rng = rng

    def digest(self, message):
        raise TypeError(
            "salted H2 has no single digest; use store_digest or candidates"
        )

    def store_digest(self, message, rng=None):
        return salted_digest_server(self.params, message, rng or self._rng)

    def candidates(self, message):
        for r in range(1 << self.params.bits):
            yield _salted(message, self.params, r)


# --- request throttling -------------------------------------------------


class TokenBucket:
    """Element-count token bucket.

    Queries spend one token per group element they ask the server to
    evaluate, so a batch of m+1 variants costs m+1 tokens and batching
    gives no rate-limit discount.
    """

    def __init__(self, capacity, refill_per_second, clock=time.monotonic):
        if capacity < 1 or refill_per_second <= 0:
            raise ValueError("capacity and refill rate must be positive")
        self.capacity = float(capacity)
        self.refill_per_second = float(refill_per_second)
        self._clock = clock
        self._tokens = float(capacity)
        self._last = clock()
        self._lock = threading.Lock()

    def try_acquire(self, tokens=1):
        """Spend tokens if available; never blocks."""
        if tokens < 0:
            raise ValueError("token count must be non-negative")
        with self._lock:
            now = self._clock()
            self._tokens = min(
                self.capacity,
                self._tokens + (now - self._last) * self.refill_per_second,
            )
            self._last = now
            if tokens <= self._tokens:
                self._tokens -= tokens
                return True
            return False

    def available(self):
        with self._lock:
            now = self._clock()
            return min(
                self.capacity,
                self._tokens + (now - self._last) * self.refill_per_second,
            )


# --- back-end registry -------------------------------------------------

BACKENDS = ("fast", "slow", "timelock", "salted")


def make_backend(name, **options):
    """Build an H2 back-end from config-style options.

    fast: no options.  slow: log2_n, block_size, parallelism.
    timelock: params (TimelockParams).  salted: bits.
    """
    if name == "fast":
        return FastHash()
    if name == "slow":
        allowed = {"log2_n", "block_size", "parallelism", "max_mem_bytes"}
        return SlowHash(**{k: v for k, v in options.items() if k in allowed})
    if name == "timelock":
        return TimelockHash(options["params"])
    if name == "salted":
        return SaltedHash(SaltParams(options["bits"]), rng=options.get("rng"))
    raise ValueError(f"unknown H2 back-end: {name}")
