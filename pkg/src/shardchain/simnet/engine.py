"""Deterministic discrete-event core: event heap, trace and metrics."""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional


class ConfigError(ValueError):
    pass


def actor_rank(actor) -> tuple:
    """Total order on actor ids: integer nodes first, then named actors."""
    if isinstance(actor, int):
        return (0, actor, "")
    if actor is None:
        return (-1, 0, "")
    return (1, 0, str(actor))


def _jsonable(x):
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in (sorted(x, key=repr) if isinstance(x, (set, frozenset)) else x)]
    if hasattr(x, "value") and not isinstance(x, (int, float, str, bool)):
        return _jsonable(x.value)
    return x


@dataclass
class TraceRecord:
    time: float
    actor: Any
    kind: str
    payload: dict
    digest: str = ""

    def to_json(self) -> dict:
        return {"time": round(self.time, 9), "actor": self.actor, "kind": self.kind,
                "payload": _jsonable(self.payload), "digest": self.digest}


class Trace:
    """Totally ordered event log with a running hash chain.

    Each record stores the chained digest up to and including itself, so
    editing any record (or dropping one) breaks every later link.
    ``keep`` limits which kinds are retained in memory; all kinds feed the
    chain either way.
    """

    def __init__(self, keep: Optional[Iterable[str]] = None):
        self.records: list[TraceRecord] = []
        self.keep = None if keep is None else set(keep)
        self._h = hashlib.sha256(b"trace-genesis").digest()
        self.count = 0

    def add(self, time: float, actor, kind: str, payload: Optional[dict] = None) -> None:
        payload = payload or {}
        line = json.dumps([round(time, 9), _jsonable(actor), kind, _jsonable(payload)], sort_keys=True,
                          separators=(",", ":")).encode()
        self._h = hashlib.sha256(self._h + line).digest()
        self.count += 1
        if self.keep is None or kind in self.keep:
            self.records.append(TraceRecord(time, actor, kind, payload, self._h.hex()))

    @property
    def digest(self) -> str:
        return self._h.hex()

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        ks = set(kinds)
        return [r for r in self.records if r.kind in ks]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r.to_json(), sort_keys=True) for r in self.records) + ("\n" if self.records else "")

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def verify_trace_chain(lines: Iterable[dict]) -> tuple[bool, Optional[int]]:
    """Recompute the hash chain of a full (unfiltered) JSON-lines trace.

    Returns (ok, index of the first bad record).
    """
    h = hashlib.sha256(b"trace-genesis").digest()
    prev_time = float("-inf")
    for i, rec in enumerate(lines):
        line = json.dumps([rec["time"], rec["actor"], rec["kind"], rec["payload"]], sort_keys=True,
                          separators=(",", ":")).encode()
        h = hashlib.sha256(h + line).digest()
        if h.hex() != rec.get("digest") or rec["time"] < prev_time:
            return False, i
        prev_time = rec["time"]
    return True, None


@dataclass
class Metrics:
    issued: int = 0
    committed: int = 0
    aborted: int = 0
    latencies: list = field(default_factory=list)
    commit_times: list = field(default_factory=list)
    view_changes: int = 0
    dropped: int = 0
    queue_drops: int = 0
    stale_blocks: int = 0
    invalid_proofs: int = 0
    messages: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def pending(self) -> int:
        return self.issued - self.committed - self.aborted

    def throughput_series(self, window: float, start: float, end: float) -> list[float]:
        """Committed transactions per second in consecutive windows over [start, end)."""
        if window <= 0 or end <= start:
            return []
        nbins = int(round((end - start) / window))
        counts = [0] * nbins
        for t in self.commit_times:
            if start <= t < start + nbins * window:
                counts[min(nbins - 1, int((t - start) / window))] += 1
        return [c / window for c in counts]

    def throughput(self, start: float, end: float) -> float:
        if end <= start:
            return 0.0
        return sum(1 for t in self.commit_times if start <= t < end) / (end - start)

    def latency_percentiles(self) -> dict:
        if not self.latencies:
            return {"p50": None, "p95": None, "p99": None}
        xs = sorted(self.latencies)

        def pct(p):
            return xs[min(len(xs) - 1, int(p * len(xs)))]

        return {"p50": pct(0.50), "p95": pct(0.95), "p99": pct(0.99)}

    def summary(self) -> dict:
        return {"issued": self.issued, "committed": self.committed, "aborted": self.aborted,
                "pending": self.pending, "view_changes": self.view_changes, "dropped": self.dropped,
                "queue_drops": self.queue_drops, "stale_blocks": self.stale_blocks,
                "invalid_proofs": self.invalid_proofs, "messages": self.messages,
                "latency": self.latency_percentiles(), **self.extra}


class Simulator:
    """Single-threaded event loop.

    Events are ordered by (time, actor rank, insertion sequence); that order
    is the only source of scheduling nondeterminism, so equal seeds give
    byte-identical traces.
    """

    def __init__(self, seed: int = 0, trace_keep: Optional[Iterable[str]] = None):
        self.seed = seed
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.rng = random.Random(seed)
        self.trace = Trace(trace_keep)
        self.metrics = Metrics()
        self.events_run = 0
        self.stopped = False

    def fork_rng(self, label: str) -> random.Random:
        h = hashlib.sha256(f"{self.seed}|{label}".encode()).digest()
        return random.Random(int.from_bytes(h[:8], "big"))

    def schedule(self, time: float, actor, fn: Callable, *args) -> None:
        if time < self.now:
            time = self.now
        self._seq += 1
        heapq.heappush(self._heap, (time, actor_rank(actor), self._seq, fn, args))

    def after(self, delay: float, actor, fn: Callable, *args) -> None:
        self.schedule(self.now + max(0.0, delay), actor, fn, *args)

    def record(self, actor, kind: str, payload: Optional[dict] = None) -> None:
        self.trace.add(self.now, actor, kind, payload)

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None,
            stop_when: Optional[Callable[[], bool]] = None) -> None:
        while self._heap and not self.stopped:
            t = self._heap[0][0]
            if until is not None and t > until:
                self.now = until
                break
            time, _, _, fn, args = heapq.heappop(self._heap)
            assert time >= self.now - 1e-12, "clock went backwards"
            self.now = time
            fn(*args)
            self.events_run += 1
            if max_events is not None and self.events_run >= max_events:
                break
            if stop_when is not None and stop_when():
                break
        else:
            if until is not None and not self.stopped and not self._heap:
                self.now = max(self.now, until)

    @property
    def idle(self) -> bool:
        return not self._heap
