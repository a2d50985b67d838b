"""Password similarity engine.

Passwords are modeled as keypress sequences: what a user types rather
than the final string.  Uppercase letters expand to a shift modifier
plus the lowercase letter, and an all-caps password becomes a single
caps modifier plus the lowered string.  Password tweaks then become
short edit scripts over keypress sequences (insert/delete/substitute of
one symbol), which generalize across passwords because edit locations
are stored in a signed, length-relative form: +1 means "first symbol",
-1 means "last symbol" (or "append" for inserts), whichever form has
the smaller magnitude.

The module derives canonical minimal edit scripts between password
pairs, mines the most common scripts from a corpus of same-user pairs,
ships a built-in ten-rule table of the classic tweaks, and generates
ranked variant lists used by both the server (store expansion) and the
client (query expansion).
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass

__all__ = [
    "SHIFT",
    "CAPS",
    "Edit",
    "RuleSet",
    "keypress_encode",
    "keypress_decode",
    "valid_password",
    "apply_path",
    "derive_path",
    "edit_distance",
    "serialize_path",
    "parse_path",
    "mine_rules",
    "dasr_ruleset",
    "generate_variants",
    "hybrid_similar",
    "evaluate_coverage",
    "split_rules_greedy",
    "load_ruleset",
    "save_ruleset",
    "parse_ruleset",
]

# Modifier symbols; control characters so they can never collide with
# the printable-ASCII password alphabet.
SHIFT = "\x0e"
CAPS = "\x0f"

MAX_PASSWORD_LEN = 30

_PRINTABLE = set(string.printable) - set("\t\n\r\x0b\x0c")
_OPS = ("ins", "del", "sub")
_OP_RANK = {"sub": 0, "del": 1, "ins": 2}


def valid_password(password):
    """Printable ASCII, 1..30 characters."""
    return (
        isinstance(password, str)
        and 1 <= len(password) <= MAX_PASSWORD_LEN
        and all(c in _PRINTABLE for c in password)
    )


def keypress_encode(password):
    """Expand a password into the keypress symbols that produce it."""
    if not valid_password(password):
        raise ValueError(f"not a valid password: {password!r}")
    letters = [c for c in password if c.isalpha()]
    if len(letters) >= 2 and all(c.isupper() for c in letters):
        return CAPS + password.lower()
    out = []
    for ch in password:
        if ch.isupper():
            out.append(SHIFT)
            out.append(ch.lower())
        else:
            out.append(ch)
    return "".join(out)


def keypress_decode(seq):
    """Replay a keypress sequence into the password it types.

    The caps symbol toggles case inversion for the letters after it;
    shift uppercases the next letter and is dropped on anything else.
    """
    out = []
    caps = False
    shift = False
    for sym in seq:
        if sym == CAPS:
            caps = not caps
        elif sym == SHIFT:
            shift = True
        else:
            ch = sym
            if ch.isalpha():
                if caps:
                    ch = ch.swapcase()
                if shift:
                    ch = ch.upper()
            shift = False
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class Edit:
    """One keypress edit.

    loc is 1-based and signed: positive counts from the front, negative
    from the back (-1 = last symbol; for inserts, -1 = append).  Zero is
    invalid.  char is None for deletes.
    """

    op: str
    char: str | None
    loc: int

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown edit op: {self.op!r}")
        if self.loc == 0:
            raise ValueError("edit location 0 is invalid")
        if self.op == "del":
            if self.char is not None:
                raise ValueError("delete carries no symbol")
        else:
            if not isinstance(self.char, str) or len(self.char) != 1:
                raise ValueError("insert/substitute need one symbol")
            if self.char not in _PRINTABLE and self.char not in (SHIFT, CAPS):
                raise ValueError(f"symbol out of alphabet: {self.char!r}")


def _resolve(edit, length):
    """Map a signed location onto the current sequence; None if invalid."""
    if edit.op == "ins":
        slot = edit.loc if edit.loc > 0 else length + 2 + edit.loc
        return slot if 1 <= slot <= length + 1 else None
    idx = edit.loc if edit.loc > 0 else length + 1 + edit.loc
    return idx if 1 <= idx <= length else None


def _canonical_loc(op, pos, length):
    """Signed form with the smaller magnitude; ties go positive."""
    neg = pos - (length + 2 if op == "ins" else length + 1)
    return neg if abs(neg) < pos else pos


def apply_path(path, password):
    """Apply an edit script to a password; None if it does not apply.

    A script does not apply when an edit location falls outside the
    sequence, a substitute would write the symbol already there, or the
    result decodes to the input itself or to an invalid password.
    """
    try:
        seq = list(keypress_encode(password))
    except ValueError:
        return None
    for edit in path:
        pos = _resolve(edit, len(seq))
        if pos is None:
            return None
        if edit.op == "ins":
            seq.insert(pos - 1, edit.char)
        elif edit.op == "del":
            del seq[pos - 1]
        else:
            if seq[pos - 1] == edit.char:
                return None
            seq[pos - 1] = edit.char
    result = keypress_decode("".join(seq))
    if result == password or not valid_password(result):
        return None
    return result


def edit_distance(w1, w2):
    """Levenshtein distance between keypress encodings."""
    a, b = keypress_encode(w1), keypress_encode(w2)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def derive_path(w1, w2):
    """Canonical minimal edit script turning w1 into w2.

    Among all minimal scripts the canonical one is lexicographically
    least by per-edit key (source position, then substitute < delete <
    insert, then symbol).  Applying the result to w1 yields w2.
    """
    if w1 == w2:
        raise ValueError("passwords must differ")
    a, b = keypress_encode(w1), keypress_encode(w2)
    n, m = len(a), len(b)
    # suffix distances: S[i][j] = distance(a[i:], b[j:])
    S = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        S[i][m] = n - i
    for j in range(m + 1):
        S[n][j] = m - j
    for i in range(n - 1, -1, -1):
        row, below = S[i], S[i + 1]
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                row[j] = below[j + 1]
            else:
                row[j] = 1 + min(below[j + 1], below[j], row[j + 1])
    # forward greedy walk: take the smallest-keyed minimal edit first
    ops = []  # (source position, op, symbol)
    i = j = 0
    while i < n or j < m:
        s = S[i][j]
        if i < n and j < m and a[i] != b[j] and s == S[i + 1][j + 1] + 1:
            ops.append((i + 1, "sub", b[j]))
            i += 1
            j += 1
        elif i < n and s == S[i + 1][j] + 1:
            ops.append((i + 1, "del", None))
            i += 1
        elif j < m and s == S[i][j + 1] + 1:
            ops.append((i + 1, "ins", b[j]))
            j += 1
        else:
            i += 1
            j += 1
    # convert to sequential application order with signed locations
    edits = []
    shift = 0
    length = n
    for src, op, ch in ops:
        pos = src + shift
        edits.append(Edit(op, ch, _canonical_loc(op, pos, length)))
        if op == "ins":
            shift += 1
            length += 1
        elif op == "del":
            shift -= 1
            length -= 1
    return tuple(edits)


# --- serialization ---------------------------------------------------

_UNSAFE = {"%", ":", ";", "|", "<", ">"}


def _escape_symbol(ch):
    if ch is None:
        return ""
    if ch == SHIFT:
        return "<shift>"
    if ch == CAPS:
        return "<caps>"
    if ch in _UNSAFE or ch == " ":
        return "%%%02x" % ord(ch)
    return ch


def _unescape_symbol(field):
    if field == "":
        return None
    if field == "<shift>":
        return SHIFT
    if field == "<caps>":
        return CAPS
    if field.startswith("%") and len(field) == 3:
        return chr(int(field[1:], 16))
    if len(field) != 1:
        raise ValueError(f"bad symbol field: {field!r}")
    return field


def serialize_path(path):
    return ";".join(f"{e.op}:{_escape_symbol(e.char)}:{e.loc}" for e in path)


def parse_path(text):
    edits = []
    for part in text.split(";"):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ValueError(f"bad edit: {part!r}")
        op, char_field, loc = pieces
        edits.append(Edit(op, _unescape_symbol(char_field), int(loc)))
    return tuple(edits)


class RuleSet:
    """Ordered transformation rules.

    Each rank slot holds one or more alternative scripts tried in order;
    a slot contributes at most one variant.  Mined rule sets have
    single-script slots; the built-in table uses a two-script slot for
    the leading-case toggle.
    """

    def __init__(self, name, slots, supports=None):
        self.name = name
        self.slots = tuple(tuple(s) for s in slots)
        self.supports = tuple(supports) if supports is not None else (0,) * len(self.slots)
        if len(self.supports) != len(self.slots):
            raise ValueError("one support count per rank slot")
        # Scripts may repeat across slots (a fallback alternative can
        # coincide with a later rule; generation dedups by result) but
        # not within one slot.
        for slot in self.slots:
            if not slot:
                raise ValueError("empty rank slot")
            if len(set(slot)) != len(slot):
                raise ValueError("duplicate script within a rank slot")

    @property
    def paths(self):
        return tuple(p for slot in self.slots for p in slot)

    def __len__(self):
        return len(self.slots)

    def __eq__(self, other):
        return (
            isinstance(other, RuleSet)
            and self.name == other.name
            and self.slots == other.slots
        )

    def __repr__(self):
        return f"RuleSet({self.name!r}, {len(self.slots)} slots)"


def mine_rules(pairs, max_rules, name=None):
    """Count canonical edit scripts over same-user password pairs and
    keep the most frequent.

    Ties rank shorter scripts first, then serialized text.  Pairs with
    equal members are skipped; an input with no usable pair is an error.
    """
    if max_rules < 1:
        raise ValueError("max_rules must be positive")
    counts = Counter()
    for w1, w2 in pairs:
        if w1 == w2 or not valid_password(w1) or not valid_password(w2):
            continue
        counts[derive_path(w1, w2)] += 1
    if not counts:
        raise ValueError("no usable pairs to mine")
    ranked = sorted(
        counts.items(), key=lambda kv: (-kv[1], len(kv[0]), serialize_path(kv[0]))
    )[:max_rules]
    return RuleSet(
        name or f"mined-{len(ranked)}",
        [(path,) for path, _ in ranked],
        [count for _, count in ranked],
    )


def dasr_ruleset():
    """The built-in ten-rule tweak table, in rank order."""
    del_last = Edit("del", None, -1)
    slots = (
        ((del_last,),),
        ((Edit("ins", SHIFT, 1),), (Edit("del", None, 1),)),  # toggle leading case
        ((del_last, del_last),),
        ((del_last, del_last, del_last),),
        ((Edit("ins", "0", 1),),),
        ((Edit("ins", "1", -1),),),
        ((Edit("ins", "a", 1),),),
        ((Edit("ins", "q", 1),),),
        ((Edit("del", None, 1),),),
        ((Edit("ins", "0", -1),),),
    )
    return RuleSet("dasr", slots)


def generate_variants(rules, password, n):
    """Up to n variants of a password, in rule rank order.

    Walks the rank slots once; a slot's first applicable, previously
    unseen result is kept.  Inapplicable rules are skipped, so fewer
    than n variants may come back.
    """
    if n < 0:
        raise ValueError("variant count must be non-negative")
    out = []
    seen = {password}
    for slot in rules.slots:
        if len(out) >= n:
            break
        for path in slot:
            variant = apply_path(path, password)
            if variant is not None and variant not in seen:
                out.append(variant)
                seen.add(variant)
                break
    return out


def hybrid_similar(queried, breached, server_rules, n, client_rules, m):
    """Ground-truth similarity predicate for a query/breach pair.

    True when the queried password or one of its m client-side variants
    collides with the breached password or one of its n server-side
    variants, and the two passwords are not identical.
    """
    if queried == breached:
        return False
    client_side = {queried, *generate_variants(client_rules, queried, m)}
    server_side = {breached, *generate_variants(server_rules, breached, n)}
    return not client_side.isdisjoint(server_side)


# --- offline rule-split analysis -------------------------------------


def _covered(pair, client_paths, server_paths):
    w, bw = pair
    client_side = {w}
    for p in client_paths:
        v = apply_path(p, w)
        if v is not None:
            client_side.add(v)
    server_side = {bw}
    for p in server_paths:
        v = apply_path(p, bw)
        if v is not None:
            server_side.add(v)
    return w != bw and not client_side.isdisjoint(server_side)


def evaluate_coverage(labeled_pairs, client_paths, server_paths):
    """(true positive rate, false positive rate) of a client/server rule
    split against pairs labeled vulnerable or safe."""
    tp = fp = pos = neg = 0
    for w, bw, vulnerable in labeled_pairs:
        hit = _covered((w, bw), client_paths, server_paths)
        if vulnerable:
            pos += 1
            tp += hit
        else:
            neg += 1
            fp += hit
    return (tp / pos if pos else 0.0), (fp / neg if neg else 0.0)


def split_rules_greedy(vulnerable_pairs, candidate_paths, client_quota, server_quota):
    """Assign candidate scripts to the client or server side, greedily
    maximizing how many vulnerable pairs the hybrid predicate covers.

    Returns (client paths, server paths).  Each step adds the single
    script/side combination with the largest marginal coverage;
    remaining quota is filled in candidate order when no script adds
    coverage.
    """
    pairs = [tuple(p) for p in vulnerable_pairs]
    client, server = [], []
    uncovered = set(range(len(pairs)))

    def gain(path, side):
        trial_client = client + [path] if side == "c" else client
        trial_server = server + [path] if side == "s" else server
        return sum(
            1 for idx in uncovered if _covered(pairs[idx], trial_client, trial_server)
        )

    while (len(client) < client_quota or len(server) < server_quota):
        best = None
        for rank, path in enumerate(candidate_paths):
            for side, quota, chosen in (("c", client_quota, client), ("s", server_quota, server)):
                if len(chosen) >= quota or path in chosen:
                    continue
                key = (-gain(path, side), rank, side)
                if best is None or key < best[0]:
                    best = (key, path, side)
        if best is None:
            break
        _, path, side = best
        (client if side == "c" else server).append(path)
        uncovered = {
            idx for idx in uncovered if not _covered(pairs[idx], client, server)
        }
    return client, server


# --- rule-set files ---------------------------------------------------


def parse_ruleset(text, name=None):
    slots, supports = [], []
    declared = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("name"):
            key, _, value = line.partition("=")
            if key.strip() == "name":
                declared = value.strip()
                continue
        support_field, _, slot_field = line.partition("\t")
        if not slot_field:
            raise ValueError(f"bad rule line: {line!r}")
        supports.append(int(support_field))
        slots.append(tuple(parse_path(p) for p in slot_field.split("|")))
    if not slots:
        raise ValueError("empty rule set")
    return RuleSet(name or declared or "unnamed", slots, supports)


def load_ruleset(path):
    with open(path, encoding="utf-8") as fh:
        return parse_ruleset(fh.read())


def save_ruleset(rules, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"name = {rules.name}\n")
        for support, slot in zip(rules.supports, rules.slots):
            fh.write(f"{support}\t" + "|".join(serialize_path(p) for p in slot) + "\n")
