"""Security-evaluation harness: the ideal query oracle, ball weights,
the greedy extraction attack, grid simulation, and synthetic corpora.

Everything here works over an abstract password distribution, not the
wire protocol: the oracle is the ideal functionality the server's
bucket answers reduce to, which keeps simulations at desk scale.
"""

import heapq
import math
import random
import statistics
from dataclasses import dataclass, field

from .similarity import generate_variants

__all__ = [
    "PasswordDistribution",
    "OracleAnswer",
    "MigpOracle",
    "Ball",
    "BallTable",
    "compute_balls",
    "AttackResult",
    "greedy_attack",
    "attack_blocklist",
    "simulate_extraction",
    "synth_distribution",
    "synth_pair_corpus",
    "candidate_set",
    "format_cells",
    "render_cells",
]


class PasswordDistribution:
    """Finite password distribution with normalized probabilities."""

    def __init__(self, support, probs):
        support = tuple(support)
        probs = tuple(float(p) for p in probs)
        if len(support) != len(probs):
            raise ValueError("support and probs must align")
        if not support:
            raise ValueError("distribution must be nonempty")
        if len(set(support)) != len(support):
            raise ValueError("support has duplicates")
        if any(p < 0 for p in probs):
            raise ValueError("probabilities must be non-negative")
        total = math.fsum(probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")
        self.support = support
        self.probs = probs
        self._index = {w: p for w, p in zip(support, probs)}

    @classmethod
    def from_weights(cls, weighted):
        """Normalize a (password, weight) mapping or pair iterable."""
        items = list(weighted.items() if hasattr(weighted, "items") else weighted)
        total = math.fsum(w for _, w in items)
        if total <= 0:
            raise ValueError("total weight must be positive")
        return cls([w for w, _ in items], [p / total for _, p in items])

    def prob(self, password):
        return self._index.get(password, 0.0)

    def sample(self, rng, count):
        return rng.choices(self.support, weights=self.probs, k=count)

    def without(self, removed):
        """Drop a set of passwords and renormalize."""
        kept = [(w, p) for w, p in zip(self.support, self.probs) if w not in removed]
        if not kept:
            raise ValueError("removal would empty the distribution")
        return PasswordDistribution.from_weights(kept)

    def __len__(self):
        return len(self.support)

    def __contains__(self, password):
        return password in self._index


def candidate_set(dist, top_k):
    """The attacker's working set: the top_k most probable passwords,
    renormalized.  Ties break lexicographically for determinism."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    ranked = sorted(zip(dist.support, dist.probs), key=lambda wp: (-wp[1], wp[0]))
    return PasswordDistribution.from_weights(ranked[:top_k])


# --- the ideal oracle ---------------------------------------------------


@dataclass(frozen=True)
class OracleAnswer:
    kind: str  # "match" | "similar" | "none"
    index: int = None  # 1-based guess index for match/similar
    exhausted: bool = False


class MigpOracle:
    """Ideal query functionality for one target credential.

    A query is a nonempty ordered guess list; the scan walks indexes in
    order checking match before similar at each one.  Blocklisted
    guesses are skipped, and a blocklisted target answers none forever.
    One query costs one budget unit regardless of batch size.
    """

    def __init__(self, target, rules, n, budget, m_max=None, blocklist=frozenset()):
        if budget < 1:
            raise ValueError("budget must be at least 1")
        self.target = target
        self.budget = budget
        self.m_max = m_max
        self.blocklist = frozenset(blocklist)
        self._target_blocked = target in self.blocklist
        self._tau = (
            frozenset(generate_variants(rules, target, n)) if n > 0 else frozenset()
        )
        self.transcript = []

    def query(self, guesses):
        guesses = tuple(guesses)
        if not guesses:
            raise ValueError("guess list must be nonempty")
        if self.m_max is not None and len(guesses) > self.m_max:
            raise ValueError(f"at most {self.m_max} guesses per query")
        if self.budget <= 0:
            answer = OracleAnswer("none", exhausted=True)
            self.transcript.append((guesses, answer))
            return answer
        self.budget -= 1
        answer = OracleAnswer("none")
        if not self._target_blocked:
            for i, guess in enumerate(guesses, start=1):
                if guess in self.blocklist:
                    continue
                if guess == self.target:
                    answer = OracleAnswer("match", i)
                    break
                if guess in self._tau:
                    answer = OracleAnswer("similar", i)
                    break
        self.transcript.append((guesses, answer))
        return answer


# --- balls ---------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: str
    members: tuple
    weight: float


class BallTable:
    """Inverted variant relation over a distribution's support.

    ``members[c]`` lists every support password whose variant set (plus
    itself) contains c; ``variants[w]`` is the memoized forward map.
    """

    def __init__(self, members, variants):
        self.members = members
        self.variants = variants

    def ball(self, center, prob):
        mem = self.members.get(center, ())
        return Ball(center, mem, math.fsum(prob(w) for w in mem))


def compute_balls(dist, rules, n):
    """Materialize every center in W' and its preimage set.

    A password is always a member of its own center's ball: guessing
    the string itself can return match, so its mass belongs to the
    center's pull.
    """
    variants = {}
    members = {}
    for w in dist.support:
        vs = tuple(generate_variants(rules, w, n)) if n > 0 else ()
        variants[w] = vs
        members.setdefault(w, []).append(w)
        for v in vs:
            members.setdefault(v, []).append(w)
    return BallTable(
        {c: tuple(ms) for c, ms in members.items()}, variants
    )


# --- the greedy attack -----------------------------------------------------


@dataclass
class AttackResult:
    success: bool
    matched: str = None
    rounds: list = field(default_factory=list)  # (guesses, OracleAnswer)
    final_output: str = None
    final_guess_used: bool = False
    queries_spent: int = 0


def greedy_attack(
    dist,
    rules,
    n,
    q,
    m=1,
    target=None,
    oracle=None,
    blocklist=frozenset(),
    balls=None,
    final_guess_counts=True,
):
    """Weight-greedy guessing against the query oracle.

    Per round the m heaviest distinct centers (ties: lexicographically
    smaller first) go out as one query.  similar at index i restricts
    the world to that ball; none eliminates every guessed ball's
    members.  When the candidate pool empties before the budget does,
    the returned final argmax may count as one last free guess
    (``final_guess_counts``); a final output produced at exact budget
    exhaustion never does.
    """
    if len(dist) == 0:
        raise ValueError("empty distribution")
    if q < 1 or m < 1:
        raise ValueError("q and m must be at least 1")
    if oracle is None:
        if target is None:
            raise ValueError("supply either an oracle or a target")
        oracle = MigpOracle(target, rules, n, q, m_max=m, blocklist=blocklist)
    if balls is None:
        balls = compute_balls(dist, rules, n)

    prob = dict(zip(dist.support, dist.probs))
    for w in blocklist:
        prob.pop(w, None)

    def weight(center):
        return math.fsum(
            prob.get(w, 0.0) for w in balls.members.get(center, ())
        )

    guessed = set()
    heap = []
    for center in balls.members:
        if center in blocklist:
            continue
        w = weight(center)
        if w > 0:
            heap.append((-w, center))
    heapq.heapify(heap)

    result = AttackResult(success=False)

    def pop_batch():
        batch = []
        while heap and len(batch) < m:
            neg, center = heapq.heappop(heap)
            if center in guessed:
                continue
            current = weight(center)
            if current <= 0:
                continue
            if current != -neg:
                heapq.heappush(heap, (-current, center))
                continue
            batch.append(center)
        return batch

    spent = 0
    dry = False
    while spent < q:
        batch = pop_batch()
        if not batch:
            break
        answer = oracle.query(batch)
        result.rounds.append((tuple(batch), answer))
        if answer.exhausted:
            # a shared oracle ran dry: no information, stop cleanly
            dry = True
            break
        spent += 1
        guessed.update(batch)
        if answer.kind == "match":
            result.success = True
            result.matched = batch[answer.index - 1]
            result.queries_spent = spent
            return result
        if answer.kind == "similar":
            hit = batch[answer.index - 1]
            keep = set(balls.members.get(hit, ()))
            for w in list(prob):
                if w not in keep:
                    prob[w] = 0.0
            # W' shrinks to the hit ball's closure; rebuild the heap
            shrunk = set()
            for w in keep:
                if prob.get(w, 0.0) > 0:
                    shrunk.add(w)
                    shrunk.update(balls.variants.get(w, ()))
            heap = []
            for center in shrunk:
                if center in guessed or center in blocklist:
                    continue
                cw = weight(center)
                if cw > 0:
                    heap.append((-cw, center))
            heapq.heapify(heap)
        else:  # none: every guessed ball is free of the target
            for center in batch:
                for w in balls.members.get(center, ()):
                    prob[w] = 0.0

    result.queries_spent = spent
    alive = [(p, w) for w, p in prob.items() if p > 0]
    if alive:
        # lexicographic tie-break needs the smaller string at equal mass
        top = max(p for p, _ in alive)
        result.final_output = min(w for p, w in alive if p == top)
        if final_guess_counts and spent < q and not dry:
            result.final_guess_used = True
            result.success = result.final_output == oracle.target
            if result.success:
                result.matched = result.final_output
    return result


# --- blocklist for the game ----------------------------------------------


def attack_blocklist(dist, beta, rules, n):
    """Top-beta support passwords plus their variants, mirroring the
    server-side blocklist build."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return frozenset()
    ranked = sorted(
        zip(dist.support, dist.probs), key=lambda wp: (-wp[1], wp[0])
    )
    top = [w for w, _ in ranked[:beta]]
    blocked = set(top)
    if n > 0:
        for w in top:
            blocked.update(generate_variants(rules, w, n))
    return frozenset(blocked)


# --- grid simulation --------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    n: int
    beta: int
    q: int
    m: int
    success_pct: float
    std_pct: float
    targets: int
    seed: int


def simulate_extraction(
    dist,
    rules,
    n,
    q_grid,
    beta_grid,
    targets,
    m=1,
    folds=5,
    seed=0,
    final_guess_counts=True,
    include_blocklisted_targets=True,
    candidate_k=None,
):
    """Run the greedy attack over a (q, beta) grid.

    Targets are sampled from the full distribution with replacement;
    the attacker's working set drops blocklisted passwords (and
    optionally truncates to the top candidate_k).  Success rates are
    percentages with a standard deviation across ``folds`` random
    folds of the target sample.
    """
    if not q_grid or not beta_grid:
        raise ValueError("grids must be nonempty")
    if targets < folds:
        raise ValueError("need at least one target per fold")
    rng = random.Random(seed)
    sampled = dist.sample(rng, targets)
    fold_of = [i % folds for i in range(targets)]
    rng.shuffle(fold_of)

    cells = []
    for beta in beta_grid:
        blocked = attack_blocklist(dist, beta, rules, n)
        attacker_view = dist.without(blocked & set(dist.support)) if blocked else dist
        if candidate_k is not None:
            attacker_view = candidate_set(attacker_view, candidate_k)
        balls = compute_balls(attacker_view, rules, n)
        eligible = [
            (w, fold_of[i])
            for i, w in enumerate(sampled)
            if include_blocklisted_targets or w not in blocked
        ]
        for q in q_grid:
            fold_hits = [0] * folds
            fold_sizes = [0] * folds
            for w, fold in eligible:
                fold_sizes[fold] += 1
                result = greedy_attack(
                    attacker_view,
                    rules,
                    n,
                    q,
                    m=m,
                    target=w,
                    blocklist=blocked,
                    balls=balls,
                    final_guess_counts=final_guess_counts,
                )
                if result.success:
                    fold_hits[fold] += 1
            rates = [
                100.0 * h / s for h, s in zip(fold_hits, fold_sizes) if s
            ]
            total = sum(fold_sizes)
            cells.append(
                Cell(
                    n=n,
                    beta=beta,
                    q=q,
                    m=m,
                    success_pct=100.0 * sum(fold_hits) / total if total else 0.0,
                    std_pct=statistics.stdev(rates) if len(rates) > 1 else 0.0,
                    targets=total,
                    seed=seed,
                )
            )
    return cells


def format_cells(cells):
    """Machine-readable table, one tab-separated row per cell."""
    lines = ["n\tbeta\tq\tm\tsuccess_pct\tstd_pct\ttargets\tseed"]
    for c in cells:
        lines.append(
            f"{c.n}\t{c.beta}\t{c.q}\t{c.m}\t{c.success_pct:.4f}"
            f"\t{c.std_pct:.4f}\t{c.targets}\t{c.seed}"
        )
    return "\n".join(lines) + "\n"


def render_cells(cells):
    """Aligned human-readable table."""
    headers = ("n", "beta", "q", "m", "success%", "std", "targets")
    rows = [
        (
            str(c.n), str(c.beta), str(c.q), str(c.m),
            f"{c.success_pct:.2f}", f"{c.std_pct:.2f}", str(c.targets),
        )
        for c in cells
    ]
    widths = [
        max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
        for i, h in enumerate(headers)
    ]
    out = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for r in rows:
        out.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    return "\n".join(out) + "\n"


# --- synthetic data ---------------------------------------------------------

_WORDS = (
    "password monkey dragon shadow master sunshine princess football baseball "
    "superman batman trustno liverpool charlie jordan freedom ginger summer "
    "winter spring autumn purple orange silver golden cookie banana pepper "
    "diamond flower rocket soccer hockey tiger eagle panda koala zebra "
    "coffee guitar piano violin turtle rabbit falcon phoenix wizard knight "
    "castle bridge forest river mountain ocean island desert meadow valley "
    "thunder lightning storm cloud rainbow comet planet galaxy cosmos nebula "
    "apple cherry grape lemon mango peach plum berry melon kiwi "
    "happy lucky sunny funny crazy super mega ultra hyper turbo "
    "alpha bravo delta omega sigma gamma zulu tango romeo victor "
    "london paris berlin madrid vienna dublin oslo cairo tokyo sydney"
).split()

_LEET = str.maketrans({"a": "4", "e": "3", "i": "1", "o": "0", "s": "5"})


def synth_distribution(seed, size, s=1.0):
    """Deterministic Zipf-shaped password distribution.

    Rank-r probability is proportional to r^(-s); strings come from a
    small pattern vocabulary (word+digits, word+year, leet tweaks) and
    are unique.
    """
    if size < 1:
        raise ValueError("size must be at least 1")
    if s <= 0:
        raise ValueError("zipf exponent must be positive")
    rng = random.Random(seed)
    seen = set()
    support = []
    while len(support) < size:
        word = rng.choice(_WORDS)
        style = rng.randrange(4)
        if style == 0:
            pw = word + str(rng.randrange(10 ** rng.randrange(1, 4)))
        elif style == 1:
            pw = word + str(rng.randrange(1950, 2026))
        elif style == 2:
            pw = word.translate(_LEET) + (str(rng.randrange(10)) if rng.random() < 0.5 else "")
        else:
            pw = word.capitalize() + rng.choice("!@#$") + str(rng.randrange(100))
        if pw not in seen:
            seen.add(pw)
            support.append(pw)
    weights = [(r + 1) ** (-s) for r in range(size)]
    return PasswordDistribution.from_weights(zip(support, weights))


def synth_pair_corpus(seed, pairs, tweak_path, dist=None):
    """Same-user password pairs where one member is the other tweaked
    by ``tweak_path``; feeds rule-mining round-trip tests."""
    from .similarity import apply_path

    rng = random.Random(seed)
    dist = dist or synth_distribution(seed ^ 0x5EED, max(pairs * 2, 64))
    out = []
    attempts = 0
    while len(out) < pairs:
        attempts += 1
        if attempts > pairs * 1000:
            raise ValueError("tweak path applies to too few passwords")
        base = rng.choice(dist.support)
        tweaked = apply_path(tweak_path, base)
        if tweaked is not None:
            out.append((base, tweaked))
    return out
