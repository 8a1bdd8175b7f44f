"""Workload generation: KVStore (3 updates per tx) and SmallBank payments over Zipf-distributed keys."""

from __future__ import annotations

import bisect
import itertools
import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence

from ..ledger import KvUpdate, SmallBankPayment, Transaction, encode_int, shard_of


class SpecError(ValueError):
    pass


class Benchmark(str, Enum):
    KVSTORE = "KVStore"
    SMALLBANK = "SmallBank"


@dataclass(frozen=True)
class WorkloadSpec:
    benchmark: Benchmark = Benchmark.SMALLBANK
    clients: int = 4
    mode: str = "closed"
    theta: float = 0.0
    key_space: int = 1000
    duration: float = 10.0
    outstanding: int = 128
    rate: float = 500.0
    initial_balance: int = 1_000_000
    max_amount: int = 10
    updates_per_tx: int = 3

    def validate(self) -> None:
        if Benchmark(self.benchmark) not in Benchmark:
            raise SpecError("unknown benchmark")
        if self.mode not in ("open", "closed"):
            raise SpecError("mode must be open or closed")
        if self.theta < 0:
            raise SpecError("zipf theta must be >= 0")
        if self.key_space < 2 or self.clients < 1 or self.duration <= 0:
            raise SpecError("key_space >= 2, clients >= 1 and duration > 0 required")
        if self.updates_per_tx < 1 or self.updates_per_tx > self.key_space:
            raise SpecError("updates_per_tx out of range")


class ZipfSampler:
    """Ranks 0..n-1 with P(k) proportional to 1/(k+1)^theta (theta = 0 is uniform)."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        self.n = n
        self.theta = theta
        self.rng = rng
        weights = [1.0 / (k + 1) ** theta for k in range(n)]
        self.norm = sum(weights)
        self.cdf = list(itertools.accumulate(w / self.norm for w in weights))
        self.cdf[-1] = 1.0

    def pmf(self, k: int) -> float:
        return 1.0 / (k + 1) ** self.theta / self.norm

    def sample(self) -> int:
        return bisect.bisect_left(self.cdf, self.rng.random())

    def distinct(self, count: int) -> list[int]:
        out: list[int] = []
        while len(out) < count:
            k = self.sample()
            if k not in out:
                out.append(k)
        return out


def account_name(i: int) -> str:
    return "acc%05d" % i


def key_name(i: int) -> bytes:
    return b"key%05d" % i


def initial_balances(spec: WorkloadSpec) -> dict[str, int]:
    return {account_name(i): spec.initial_balance for i in range(spec.key_space)}


def shard_keys(spec: WorkloadSpec, shard: int, num_shards: int) -> list[int]:
    """Key indices owned by one shard (names depend on the benchmark)."""
    name = (lambda i: account_name(i).encode()) if Benchmark(spec.benchmark) is Benchmark.SMALLBANK else key_name
    return [i for i in range(spec.key_space) if shard_of(name(i), num_shards) == shard]


def generate_workload(spec: WorkloadSpec, seed, client: str = "client0",
                      restrict: Optional[Sequence[int]] = None, limit: Optional[int] = None) -> Iterator[Transaction]:
    """Deterministic transaction stream for one client.

    ``restrict`` limits the key space to the given indices (Zipf ranks map
    onto that list in order), which keeps a client on one shard.
    """
    spec.validate()
    rng = seed if isinstance(seed, random.Random) else random.Random(f"workload|{seed}|{client}")
    universe = list(restrict) if restrict is not None else list(range(spec.key_space))
    if len(universe) < 2:
        raise SpecError("key universe needs at least two keys")
    zipf = ZipfSampler(len(universe), spec.theta, rng)
    bench = Benchmark(spec.benchmark)
    for i in itertools.count():
        if limit is not None and i >= limit:
            return
        txid = f"{client}-{i}"
        if bench is Benchmark.SMALLBANK:
            a, b = zipf.distinct(2)
            amount = rng.randint(1, spec.max_amount)
            yield Transaction(txid, SmallBankPayment(account_name(universe[a]).encode(),
                                                     account_name(universe[b]).encode(), amount), client)
        else:
            ks = zipf.distinct(min(spec.updates_per_tx, len(universe)))
            yield Transaction(txid, KvUpdate(tuple((key_name(universe[k]), encode_int(i)) for k in ks)), client)


def cross_only(stream: Iterator[Transaction], num_shards: int) -> Iterator[Transaction]:
    """Drop transactions that touch a single shard (txids keep their original numbering)."""
    for tx in stream:
        if tx.is_cross_shard(num_shards):
            yield tx
