"""Shard formation: committee sizing, assignment, reconfiguration and beacon rounds.

The probability functions use exact integer arithmetic (``math.comb``) and
a single correctly rounded division, so tails near 2^-20 and below keep full
double precision.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np


class InvalidParams(ValueError):
    pass


class Infeasible(Exception):
    pass


# -- committee sizing ---------------------------------------------------------


def _check_hyper(N: int, F: int, n: int, f: int) -> None:
    if not (0 <= F <= N and 1 <= n <= N and 0 <= f):
        raise InvalidParams(f"N={N} F={F} n={n} f={f}")


def faulty_committee_probability(N: int, F: int, n: int, f: int) -> float:
    """Pr[X >= f] for X ~ Hypergeometric(N, F, n): a random n-subset holds at least f of F bad nodes."""
    _check_hyper(N, F, n, f)
    if f > n:
        return 0.0
    num = sum(math.comb(F, x) * math.comb(N - F, n - x) for x in range(f, min(n, F) + 1))
    return num / math.comb(N, n)


def faulty_committee_probability_exact(N: int, F: int, n: int, f: int) -> Fraction:
    _check_hyper(N, F, n, f)
    num = sum(math.comb(F, x) * math.comb(N - F, n - x) for x in range(f, min(n, F) + 1))
    return Fraction(num, math.comb(N, n))


def tolerated_faults(n: int, resilience: str) -> int:
    if resilience == "half":
        return (n - 1) // 2
    if resilience == "third":
        return (n - 1) // 3
    raise InvalidParams(f"unknown resilience {resilience!r}")


@dataclass(frozen=True)
class SizingQuery:
    N: int
    s: float
    resilience: str = "half"  # "half": f = (n-1)//2 ; "third": f = (n-1)//3
    target: float = 2.0 ** -20

    @property
    def F(self) -> int:
        return math.floor(self.s * self.N)


@dataclass(frozen=True)
class SizingResult:
    n: int
    f: int
    failure_probability: float


def min_committee_size(query: SizingQuery) -> SizingResult:
    """Smallest n whose chance of holding more than f(n) Byzantine members is within target."""
    if not 0 <= query.s < 1 or query.N < 1:
        raise InvalidParams(str(query))
    F = query.F
    for n in range(1, query.N + 1):
        f = tolerated_faults(n, query.resilience)
        p = faulty_committee_probability(query.N, F, n, f + 1)
        if p <= query.target:
            return SizingResult(n, f, p)
    raise Infeasible(f"no committee size within N={query.N} meets {query.target:g}")


def intermediate_committee_count(n: int, k: int, B: int) -> int:
    if B < 1 or k < 1 or n < 1:
        raise InvalidParams(f"n={n} k={k} B={B}")
    return max(1, math.ceil(n * (k - 1) / (k * B)))


def transition_failure_probability(N: int, F: int, n: int, f: int, k: int, B: int) -> float:
    """Boole bound over the intermediate committees of one epoch transition.

    ``f`` is the tail start (first violating Byzantine count).
    """
    _check_hyper(N, F, n, f)
    m = intermediate_committee_count(n, k, B)
    return m * faulty_committee_probability(N, F, n, f)


def repeat_probability(l: float, N: int) -> float:
    """Chance that no node among N draws q = 0 with an l-bit filter."""
    if l < 0 or N < 1:
        raise InvalidParams(f"l={l} N={N}")
    return (1.0 - 2.0 ** (-l)) ** N


def sizing_table(N: int, fractions: Sequence[float], resiliences=("half", "third"),
                 target: float = 2.0 ** -20) -> list[dict]:
    rows = []
    for res in resiliences:
        for s in fractions:
            try:
                r = min_committee_size(SizingQuery(N, s, res, target))
                rows.append({"N": N, "s": s, "resilience": res, "target": target, "n": r.n, "f": r.f,
                             "probability": r.failure_probability})
            except Infeasible:
                rows.append({"N": N, "s": s, "resilience": res, "target": target, "n": None, "f": None,
                             "probability": None})
    return rows


# -- cross-shard probability --------------------------------------------------


def _stirling2_row(d: int) -> list[int]:
    """S(d, x) for x = 0..d."""
    row = [1]
    for i in range(1, d + 1):
        new = [0] * (i + 1)
        for x in range(1, i + 1):
            new[x] = x * (row[x] if x < len(row) else 0) + row[x - 1]
        row = new
    return row


def cross_shard_counts(d: int, k: int) -> dict[int, int]:
    """Number of the k^d argument→shard maps that touch exactly x shards (closed form)."""
    S = _stirling2_row(d)
    return {x: math.comb(k, x) * S[x] * math.factorial(x) for x in range(1, min(d, k) + 1)}


def cross_shard_counts_enumerated(d: int, k: int, chunk: int = 1 << 18) -> dict[int, int]:
    """Same counts by walking every one of the k^d maps."""
    total = k ** d
    counts = np.zeros(min(d, k) + 1, dtype=np.int64)
    powers = k ** np.arange(d, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % k
        digits.sort(axis=1)
        distinct = 1 + np.count_nonzero(np.diff(digits, axis=1), axis=1)
        counts += np.bincount(distinct, minlength=len(counts))[: len(counts)]
    return {x: int(counts[x]) for x in range(1, len(counts))}


def cross_shard_probability(d: int, k: int, exact: bool = False) -> dict:
    """Distribution of the number of distinct shards touched by a d-argument transaction."""
    if d < 1 or k < 1:
        raise InvalidParams(f"d={d} k={k}")
    if d * math.log2(max(k, 2)) <= 24:
        counts = cross_shard_counts_enumerated(d, k)
    else:
        counts = cross_shard_counts(d, k)
    total = k ** d
    if exact:
        return {x: Fraction(c, total) for x, c in counts.items()}
    return {x: c / total for x, c in counts.items()}


def cross_shard_monte_carlo(d: int, k: int, samples: int, seed: int = 0) -> dict[int, float]:
    rng = np.random.default_rng(seed)
    out = np.zeros(min(d, k) + 1, dtype=np.int64)
    left = samples
    while left:
        m = min(left, 1 << 18)
        draws = rng.integers(0, k, size=(m, d))
        draws.sort(axis=1)
        distinct = 1 + np.count_nonzero(np.diff(draws, axis=1), axis=1)
        out += np.bincount(distinct, minlength=len(out))[: len(out)]
        left -= m
    return {x: out[x] / samples for x in range(1, len(out))}


# -- committee assignment -----------------------------------------------------


class RndStream:
    """SHA-256 in counter mode over the 256-bit beacon value."""

    def __init__(self, rnd: int, label: bytes = b"perm"):
        self._seed = label + b"|" + (rnd % (1 << 256)).to_bytes(32, "big")
        self._ctr = 0
        self._buf = b""

    def _u64(self) -> int:
        if len(self._buf) < 8:
            self._buf += hashlib.sha256(self._seed + self._ctr.to_bytes(8, "big")).digest()
            self._ctr += 1
        out, self._buf = self._buf[:8], self._buf[8:]
        return int.from_bytes(out, "big")

    def below(self, m: int) -> int:
        """Uniform integer in [0, m) by rejection sampling."""
        if m <= 0:
            raise InvalidParams("m must be positive")
        limit = (1 << 64) - ((1 << 64) % m)
        while True:
            r = self._u64()
            if r < limit:
                return r % m


def seeded_permutation(rnd: int, items: Sequence, label: bytes = b"perm") -> list:
    out = list(items)
    stream = RndStream(rnd, label)
    for i in range(len(out) - 1, 0, -1):
        j = stream.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True)
class CommitteeAssignment:
    epoch: int
    rnd: int
    permutation: tuple
    committees: tuple[tuple, ...]
    reference: int = 0

    def committee_of(self, node) -> int:
        for c, members in enumerate(self.committees):
            if node in members:
                return c
        raise KeyError(node)

    def mapping(self) -> dict:
        return {node: c for c, members in enumerate(self.committees) for node in members}

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "rnd": f"{self.rnd:064x}", "reference": self.reference,
                "committees": [list(c) for c in self.committees]}


def assign_committees(rnd: int, node_ids: Sequence, k: int, epoch: int = 0) -> CommitteeAssignment:
    N = len(node_ids)
    if k < 1 or N < k:
        raise InvalidParams(f"N={N} k={k}")
    perm = seeded_permutation(rnd, sorted(node_ids))
    base, extra = divmod(N, k)
    committees, pos = [], 0
    for c in range(k):
        size = base + (1 if c < extra else 0)
        committees.append(tuple(perm[pos:pos + size]))
        pos += size
    return CommitteeAssignment(epoch, rnd, tuple(perm), tuple(committees), 0)


# -- reconfiguration ----------------------------------------------------------


@dataclass(frozen=True)
class Move:
    node: object
    src: int
    dst: int


@dataclass(frozen=True)
class TransitionSchedule:
    epochs: tuple[int, int]
    batches: tuple[tuple[Move, ...], ...]
    B: int

    @property
    def moves(self) -> list[Move]:
        return [m for b in self.batches for m in b]


class ScheduleError(Exception):
    pass


def reconfiguration_schedule(old: CommitteeAssignment, new: CommitteeAssignment, B: int) -> TransitionSchedule:
    """Batches of at most B moves, in the order of a permutation seeded by the new beacon value.

    Batches run one after another, so no committee ever has more than B
    members in transit.
    """
    if B < 1:
        raise InvalidParams("B must be >= 1")
    old_map, new_map = old.mapping(), new.mapping()
    if set(old_map) != set(new_map):
        raise InvalidParams("assignments cover different node sets")
    movers = [n for n in sorted(old_map) if old_map[n] != new_map[n]]
    order = seeded_permutation(new.rnd, movers, label=b"moves")
    moves = [Move(n, old_map[n], new_map[n]) for n in order]
    batches = tuple(tuple(moves[i:i + B]) for i in range(0, len(moves), B))
    return TransitionSchedule((old.epoch, new.epoch), batches, B)


def replay_schedule(old: CommitteeAssignment, new: CommitteeAssignment, sched: TransitionSchedule) -> int:
    """Apply the schedule batch by batch; return the peak per-committee in-transit count.

    Raises ScheduleError if the bound is exceeded or the end state differs from ``new``.
    """
    cur = old.mapping()
    peak = 0
    for batch in sched.batches:
        if len(batch) > sched.B:
            raise ScheduleError(f"batch of {len(batch)} > B={sched.B}")
        transit: dict[int, int] = {}
        for mv in batch:
            if cur[mv.node] != mv.src:
                raise ScheduleError(f"{mv.node} not in committee {mv.src}")
            transit[mv.src] = transit.get(mv.src, 0) + 1
            if mv.dst != mv.src:
                transit[mv.dst] = transit.get(mv.dst, 0) + 1
        worst = max(transit.values(), default=0)
        if worst > sched.B:
            raise ScheduleError(f"{worst} in transit > B={sched.B}")
        peak = max(peak, worst)
        for mv in batch:
            cur[mv.node] = mv.dst
    if cur != new.mapping():
        raise ScheduleError("schedule does not reach the new assignment")
    return peak


# -- randomness beacon round --------------------------------------------------


@dataclass
class BeaconOutcome:
    rnd: Optional[int]
    epoch: int
    issuer: Optional[int]
    locked: dict = field(default_factory=dict)  # node -> (rnd, issuer)
    repeats: int = 0
    certs: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def agreed(self) -> bool:
        return len(set(self.locked.values())) <= 1


def run_beacon_round(enclaves: Sequence, delta: float, epoch: int = 0, l: int = 0,
                     delay: Optional[Callable[[int, int], float]] = None,
                     selective: Optional[Mapping[int, Iterable[int]]] = None,
                     silent: Iterable[int] = (), rebroadcast: bool = True,
                     start_time: float = 0.0, max_epochs: int = 10_000) -> BeaconOutcome:
    """Run beacon epochs until some node holds a certificate; honest nodes lock the lowest rnd.

    ``delay(src, dst)`` gives per-hop latency and must stay within ``delta``.
    Every honest node relays a newly lowest certificate once, and locks at
    ``2 * delta`` after the epoch starts, which covers one relay hop.
    ``selective`` maps a Byzantine node to the subset it sends its
    certificate to; ``silent`` nodes never send.
    """
    from .enclave import verify_beacon_cert

    delay = delay or (lambda a, b: delta)
    selective = dict(selective or {})
    silent = set(silent)
    byz = silent | set(selective)
    ids = [e.node_id for e in enclaves]
    keys = {e.node_id: e.public_key for e in enclaves}
    out = BeaconOutcome(None, epoch, None)
    t0 = start_time
    for rep in range(max_epochs):
        e = epoch + rep
        clock_value = [t0]
        for enc in enclaves:
            enc.clock = lambda cv=clock_value: cv[0]
        certs = []
        for enc in enclaves:
            cert = enc.beacon_invoke(e, l)
            if cert is not None:
                certs.append(cert)
        out.certs.extend(certs)
        if not certs:
            out.events.append((t0, None, "repeat", e))
            out.repeats += 1
            t0 += 2 * delta
            continue
        # event loop over certificate deliveries
        heap: list = []
        seq = 0
        for cert in certs:
            src = cert.node_id
            if src in silent:
                continue
            targets = selective.get(src, ids)
            for dst in targets:
                d = delay(src, dst)
                if d > delta + 1e-12:
                    raise InvalidParams(f"delay {d} exceeds synchronous bound {delta}")
                heapq.heappush(heap, (t0 + d, dst, seq, cert))
                seq += 1
        best: dict[int, tuple] = {}
        for enc in enclaves:
            own = [c for c in certs if c.node_id == enc.node_id]
            if own:
                best[enc.node_id] = (own[0].rnd, own[0].node_id)
        deadline = t0 + 2 * delta
        while heap and heap[0][0] <= deadline:
            t, dst, _, cert = heapq.heappop(heap)
            if not verify_beacon_cert(cert, keys[cert.node_id]) or cert.epoch != e:
                continue
            key = (cert.rnd, cert.node_id)
            out.events.append((t, dst, "recv", key))
            if dst in byz:
                continue
            if dst not in best or key < best[dst]:
                had_better = dst in best and best[dst] < key
                best[dst] = key
                if rebroadcast and not had_better:
                    for nxt in ids:
                        if nxt != dst:
                            heapq.heappush(heap, (t + delay(dst, nxt), nxt, seq, cert))
                            seq += 1
        for nid in ids:
            if nid not in byz and nid in best:
                out.locked[nid] = best[nid]
        if not out.locked:
            out.events.append((t0, None, "repeat", e))
            out.repeats += 1
            t0 += 2 * delta
            continue
        rnd, issuer = min(out.locked.values())
        out.rnd, out.issuer, out.epoch = rnd, issuer, e
        return out
    raise RuntimeError("beacon did not terminate")


def beacon_repeat_monte_carlo(l: int, N: int, rounds: int, seed: int = 0) -> float:
    """Fraction of beacon epochs in which no enclave issued a certificate."""
    from .enclave import Enclave

    enclaves = [Enclave(i, b"beacon-mc|%d|%d" % (seed, i)) for i in range(N)]
    empty = 0
    for e in range(rounds):
        if not any(enc.beacon_invoke(e, l) is not None for enc in enclaves):
            empty += 1
    return empty / rounds
