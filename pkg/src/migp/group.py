"""Prime-order group arithmetic for the OPRF layer.

Implements ristretto255 (RFC 9496): the prime-order group built on top of
the twisted Edwards curve edwards25519, with canonical 32-byte encodings
and a one-way map from 64 uniform bytes.  Pure Python, optionally
accelerated by gmpy2 big integers.  At ~0.5 ms per scalar multiplication
on one core this is far from libsodium speed but comfortably fast enough
for a breach store of a few hundred thousand entries.

Internal point representation is extended homogeneous coordinates
(X : Y : Z : T) with x = X/Z, y = Y/Z, x*y = T/Z.  Field elements are
kept as mpz (or plain int) and only reduced when encoding.
"""

from __future__ import annotations

import hashlib

try:
    from gmpy2 import mpz
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    def mpz(x):
        return x

__all__ = [
    "GroupElement",
    "PrimeOrderGroup",
    "Ristretto255",
    "get_group",
    "GROUP_IDS",
]

# Field prime and curve constants for edwards25519.
P = 2**255 - 19
ORDER = 2**252 + 27742317777372353535851937790883648493  # group order, prime

_P = mpz(P)
_D = mpz((-121665 * pow(121666, P - 2, P)) % P)
_SQRT_M1 = mpz(pow(2, (P - 1) // 4, P))

def _sqrt_ratio_constants():
    # sqrt(a*d - 1) with a = -1 (odd root, the reference convention) and
    # 1/sqrt(a - d) (even root).  Signs validated against libsodium.
    ad_minus_one = (-_D - 1) % _P
    a_minus_d = (-1 - _D) % _P
    def _sqrt(u, odd):
        cand = pow(mpz(u), (_P + 3) // 8, _P)
        if (cand * cand) % _P != u % _P:
            cand = (cand * _SQRT_M1) % _P
        assert (cand * cand) % _P == u % _P
        if bool(cand & 1) != odd:
            cand = _P - cand
        return cand
    inv = pow(mpz(a_minus_d), _P - 2, _P)
    return _sqrt(ad_minus_one, True), _sqrt(inv, False)

_SQRT_AD_MINUS_ONE, _INVSQRT_A_MINUS_D = _sqrt_ratio_constants()
_ONE_MINUS_D_SQ = (1 - _D * _D) % _P
_D_MINUS_ONE_SQ = ((_D - 1) * (_D - 1)) % _P

# Basepoint of edwards25519: y = 4/5, x the even root.
_BASE_Y = mpz((4 * pow(5, P - 2, P)) % P)

def _recover_x_even(y):
    # x^2 = (y^2 - 1) / (d y^2 + 1)
    yy = (y * y) % _P
    u = (yy - 1) % _P
    v = (_D * yy + 1) % _P
    xx = (u * pow(v, _P - 2, _P)) % _P
    x = pow(xx, (_P + 3) // 8, _P)
    if (x * x) % _P != xx:
        x = (x * _SQRT_M1) % _P
    if (x * x) % _P != xx:
        raise ValueError("not a square")
    if x & 1:
        x = _P - x
    return x

_BASE_X = _recover_x_even(_BASE_Y)
assert _BASE_X == 15112221349535400772501151409588531511454012693041857206046113283949847762202

_IDENTITY = (mpz(0), mpz(1), mpz(1), mpz(0))
_BASEPOINT = (_BASE_X, _BASE_Y, mpz(1), (_BASE_X * _BASE_Y) % _P)


def _point_add(p, q):
    # add-2008-hwcd-3 for a = -1 twisted Edwards, complete.
    x1, y1, z1, t1 = p
    x2, y2, z2, t2 = q
    a = ((y1 - x1) * (y2 - x2)) % _P
    b = ((y1 + x1) * (y2 + x2)) % _P
    c = (2 * t1 * t2 * _D) % _P
    d = (2 * z1 * z2) % _P
    e = b - a
    f = d - c
    g = d + c
    h = b + a
    return ((e * f) % _P, (g * h) % _P, (f * g) % _P, (e * h) % _P)


def _point_double(p):
    x1, y1, z1, _ = p
    a = (x1 * x1) % _P
    b = (y1 * y1) % _P
    c = (2 * z1 * z1) % _P
    h = (a + b) % _P
    e = (h - (x1 + y1) * (x1 + y1)) % _P
    g = (a - b) % _P
    f = (c + g) % _P
    return ((e * f) % _P, (g * h) % _P, (f * g) % _P, (e * h) % _P)


def _point_neg(p):
    x, y, z, t = p
    return ((-x) % _P, y, z, (-t) % _P)


def _point_mul(k, p):
    # Fixed 4-bit window; k must already be reduced mod the group order.
    if k == 0:
        return _IDENTITY
    table = [_IDENTITY, p]
    for _ in range(14):
        table.append(_point_add(table[-1], p))
    acc = None
    for shift in range(252, -4, -4):
        if acc is not None:
            acc = _point_double(_point_double(_point_double(_point_double(acc))))
        nib = (k >> shift) & 0xF
        if nib:
            acc = table[nib] if acc is None else _point_add(acc, table[nib])
    return _IDENTITY if acc is None else acc


def _point_equal(p, q):
    # Coset equality: X1*Y2 == Y1*X2 or Y1*Y2 == X1*X2 (covers the
    # 4-torsion shifts that decode may introduce).
    x1, y1, _, _ = p
    x2, y2, _, _ = q
    if (x1 * y2 - y1 * x2) % _P == 0:
        return True
    return (y1 * y2 - x1 * x2) % _P == 0


def _is_negative(x):
    return bool(x & 1)


def _abs_field(x):
    return (_P - x) if (x & 1) else x


def _sqrt_ratio_m1(u, v):
    """Return (was_square, r) with r = sqrt(u/v) or sqrt(SQRT_M1*u/v)."""
    v3 = (v * v * v) % _P
    v7 = (v3 * v3 * v) % _P
    r = (u * v3 * pow((u * v7) % _P, (_P - 5) // 8, _P)) % _P
    check = (v * r * r) % _P
    u = u % _P
    correct = check == u
    flipped = check == (_P - u) % _P
    flipped_i = check == ((_P - u) * _SQRT_M1) % _P
    if flipped or flipped_i:
        r = (r * _SQRT_M1) % _P
    r = _abs_field(r)
    return (correct or flipped), r


def _decode(data):
    if len(data) != 32:
        raise ValueError("group element encoding must be 32 bytes")
    s = int.from_bytes(data, "little")
    if s >= P or (s & 1):
        raise ValueError("non-canonical group element encoding")
    s = mpz(s)
    ss = (s * s) % _P
    u1 = (1 - ss) % _P
    u2 = (1 + ss) % _P
    u2_sqr = (u2 * u2) % _P
    v = (-(_D * u1 * u1) - u2_sqr) % _P
    was_square, invsqrt = _sqrt_ratio_m1(mpz(1), (v * u2_sqr) % _P)
    den_x = (invsqrt * u2) % _P
    den_y = (invsqrt * den_x * v) % _P
    x = _abs_field((2 * s * den_x) % _P)
    y = (u1 * den_y) % _P
    t = (x * y) % _P
    if not was_square or _is_negative(t) or y == 0:
        raise ValueError("invalid group element encoding")
    return (x, y, mpz(1), t)


def _encode(p):
    x0, y0, z0, t0 = p
    u1 = ((z0 + y0) * (z0 - y0)) % _P
    u2 = (x0 * y0) % _P
    _, invsqrt = _sqrt_ratio_m1(mpz(1), (u1 * u2 * u2) % _P)
    den1 = (invsqrt * u1) % _P
    den2 = (invsqrt * u2) % _P
    z_inv = (den1 * den2 * t0) % _P
    if _is_negative((t0 * z_inv) % _P):
        x = (y0 * _SQRT_M1) % _P
        y = (x0 * _SQRT_M1) % _P
        den_inv = (den1 * _INVSQRT_A_MINUS_D) % _P
    else:
        x = x0
        y = y0
        den_inv = den2
    if _is_negative((x * z_inv) % _P):
        y = (_P - y) % _P
    s = _abs_field((den_inv * ((z0 - y) % _P)) % _P)
    return int(s).to_bytes(32, "little")


def _elligator_map(t):
    r = (_SQRT_M1 * t * t) % _P
    u = ((r + 1) * _ONE_MINUS_D_SQ) % _P
    v = ((-1 - r * _D) * (r + _D)) % _P
    was_square, s = _sqrt_ratio_m1(u, v)
    if was_square:
        c = _P - 1
    else:
        s = (_P - _abs_field((s * t) % _P)) % _P
        c = r
    n = (c * ((r - 1) % _P) * _D_MINUS_ONE_SQ - v) % _P
    w0 = (2 * s * v) % _P
    w1 = (n * _SQRT_AD_MINUS_ONE) % _P
    w2 = (1 - s * s) % _P
    w3 = (1 + s * s) % _P
    return ((w0 * w3) % _P, (w2 * w1) % _P, (w1 * w3) % _P, (w0 * w2) % _P)


def _from_uniform(data):
    if len(data) != 64:
        raise ValueError("one-way map needs 64 bytes")
    t1 = mpz(int.from_bytes(data[:32], "little") & ((1 << 255) - 1))
    t2 = mpz(int.from_bytes(data[32:], "little") & ((1 << 255) - 1))
    return _point_add(_elligator_map(t1 % _P), _elligator_map(t2 % _P))


class GroupElement:
    """Element of a prime-order group, compared by canonical encoding."""

    __slots__ = ("_point", "_encoding", "group_id")

    def __init__(self, point, group_id, encoding=None):
        self._point = point
        self._encoding = encoding
        self.group_id = group_id

    def to_bytes(self):
        if self._encoding is None:
            self._encoding = _encode(self._point)
        return self._encoding

    def __eq__(self, other):
        if not isinstance(other, GroupElement):
            return NotImplemented
        if self.group_id != other.group_id:
            return False
        return _point_equal(self._point, other._point)

    def __hash__(self):
        return hash((self.group_id, self.to_bytes()))

    def __repr__(self):
        return f"GroupElement({self.group_id}, {self.to_bytes().hex()[:16]}...)"


class PrimeOrderGroup:
    """Interface every registered group implements."""

    group_id = "abstract"
    order = 0
    element_size = 0

    def from_uniform_bytes(self, data):
        raise NotImplementedError

    def decode(self, data):
        raise NotImplementedError

    def mul(self, element, scalar):
        raise NotImplementedError

    def is_identity(self, element):
        raise NotImplementedError


class Ristretto255(PrimeOrderGroup):
    group_id = "ristretto255"
    order = ORDER
    element_size = 32
    uniform_size = 64

    def basepoint(self):
        return GroupElement(_BASEPOINT, self.group_id)

    def identity(self):
        return GroupElement(_IDENTITY, self.group_id)

    def from_uniform_bytes(self, data):
        return GroupElement(_from_uniform(data), self.group_id)

    def decode(self, data):
        return GroupElement(_decode(data), self.group_id, encoding=bytes(data))

    def mul(self, element, scalar):
        if not isinstance(element, GroupElement) or element.group_id != self.group_id:
            raise ValueError("element does not belong to this group")
        k = scalar % self.order
        return GroupElement(_point_mul(mpz(k), element._point), self.group_id)

    def add(self, a, b):
        return GroupElement(_point_add(a._point, b._point), self.group_id)

    def is_identity(self, element):
        return _point_equal(element._point, _IDENTITY)


GROUP_IDS = {"ristretto255": Ristretto255()}

# The one blessed default; everything downstream reads it from here.
DEFAULT_GROUP_ID = "ristretto255"


def get_group(group_id=DEFAULT_GROUP_ID):
    """Look up a registered prime-order group by id."""
    try:
        return GROUP_IDS[group_id]
    except KeyError:
        raise ValueError(f"unknown group id: {group_id!r}") from None
