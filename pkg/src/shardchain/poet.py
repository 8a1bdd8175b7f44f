"""PoET and PoET+ longest-chain simulation: fork and stale-block rates.

Every node runs an enclave that hands out wait certificates.  A node asks
for a wait time, lets it elapse, and then gets a certificate; under PoET+
the certificate is only valid when the enclave's random l-bit value ``q``
is zero, otherwise the node starts a fresh wait.  A node with a valid
certificate publishes a block on its current tip.  Blocks propagate in one
hop with region latency plus transmission time; a node switches to a
received branch when it is heavier.  Blocks that end up off the final
canonical chain are stale.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .enclave import Enclave, WaitCertificate, verify_wait_certificate
from .simnet.engine import Simulator
from .simnet.network import DelayModel, Fixed, RegionMatrix

CSV_COLUMNS = ("n", "l", "block_time", "block_size", "throughput_proxy", "stale_rate")


class NoWinner(Exception):
    """No node passed the q filter this round."""


@dataclass(frozen=True)
class PoetConfig:
    n: int = 128
    l: float = 0.0
    block_time: float = 24.0  # mean wait per competing enclave, seconds
    block_size: int = 2_000_000  # bytes
    bandwidth: float = 1e9  # bits/s per link
    delay: DelayModel = field(default_factory=RegionMatrix)
    delay_scale: float = 1.0

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n >= 1 required")
        if self.l < 0:
            raise ValueError("l >= 0 required")
        if self.block_time <= 0:
            raise ValueError("block time must be positive")
        if self.block_size < 0 or self.bandwidth <= 0 or self.delay_scale < 0:
            raise ValueError("block size >= 0, bandwidth > 0 and delay scale >= 0 required")

    @property
    def expected_competitors(self) -> float:
        return self.n * 2.0 ** -self.l

    @property
    def transmit_time(self) -> float:
        return self.block_size * 8 / self.bandwidth

    def propagation(self, src: int, dst: int, rng: random.Random) -> float:
        if src == dst:
            return 0.0
        return self.delay_scale * (self.delay.delay(src, dst, rng) + self.transmit_time)


def poet_plus_l(n: int) -> float:
    """Filter length that shrinks the expected competitor set to sqrt(n)."""
    return math.log2(n) / 2 if n > 1 else 0.0


@dataclass(frozen=True)
class Block:
    bid: int
    parent: Optional[int]
    height: int
    miner: int
    total_wait: float
    created: float
    cert: Optional[WaitCertificate] = None

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(b"blk|%d|%d|%d|%r" % (self.bid, self.parent or 0, self.miner, self.total_wait)).digest()


def branch_key(b: Block) -> tuple:
    """Heavier branch wins: height (uniform resource per block), then larger total weight, then hash."""
    return (b.height, b.total_wait, b.hash)


class ChainView:
    """One node's block tree and its preferred tip."""

    def __init__(self, genesis: Block):
        self.blocks: dict[int, Block] = {genesis.bid: genesis}
        self.tip = genesis
        self.orphans: dict[int, list[Block]] = {}

    def receive(self, b: Block) -> bool:
        """Add a block; returns True if the preferred tip changed."""
        if b.bid in self.blocks:
            return False
        if b.parent not in self.blocks:
            self.orphans.setdefault(b.parent, []).append(b)
            return False
        changed = False
        stack = [b]
        while stack:
            blk = stack.pop()
            self.blocks[blk.bid] = blk
            if branch_key(blk) > branch_key(self.tip):
                self.tip = blk
                changed = True
            stack.extend(self.orphans.pop(blk.bid, []))
        return changed

    def branch(self, tip: Optional[Block] = None) -> list[int]:
        """Root-to-leaf path of block ids ending at ``tip`` (default: preferred tip)."""
        out = []
        b = tip or self.tip
        while b is not None:
            out.append(b.bid)
            b = self.blocks.get(b.parent) if b.parent is not None else None
        return out[::-1]


class _Node:
    def __init__(self, node_id: int, sim: Simulator, cfg: PoetConfig, genesis: Block, seed: int):
        self.node_id = node_id
        self.sim = sim
        self.cfg = cfg
        self.enclave = Enclave(node_id, "poet|%d" % seed, clock=lambda: sim.now,
                               rng=sim.fork_rng("poet-enclave|%d" % node_id))
        self.view = ChainView(genesis)
        self.token = 0

    def restart(self) -> None:
        self.token += 1
        wait = self.enclave.poet_begin(self.cfg.l, self.cfg.block_time)
        self.sim.after(wait, self.node_id, self._expire, self.token)


@dataclass
class PoetRun:
    config: PoetConfig
    seed: int
    produced: int
    canonical: list
    stale: int
    duration: float
    converged: bool
    blocks: dict = field(default_factory=dict, repr=False)

    @property
    def stale_rate(self) -> float:
        return self.stale / self.produced if self.produced else 0.0

    @property
    def throughput_proxy(self) -> float:
        """Canonical payload bytes per second of simulated time."""
        if self.duration <= 0:
            return 0.0
        return (len(self.canonical) - 1) * self.config.block_size / self.duration

    def csv_row(self) -> dict:
        return {"n": self.config.n, "l": round(self.config.l, 6), "block_time": self.config.block_time,
                "block_size": self.config.block_size, "throughput_proxy": round(self.throughput_proxy, 3),
                "stale_rate": round(self.stale_rate, 6)}


def simulate_chain(config: PoetConfig, rounds: int, seed: int = 0) -> PoetRun:
    """Mine until ``rounds`` blocks exist, deliver everything in flight, then pick the canonical chain."""
    config.validate()
    if rounds < 1:
        raise ValueError("rounds >= 1 required")
    sim = Simulator(seed, trace_keep=())
    prop_rng = sim.fork_rng("poet-propagation")
    genesis = Block(0, None, 0, -1, 0.0, 0.0)
    nodes = [_Node(i, sim, config, genesis, seed) for i in range(config.n)]
    keys = {nd.node_id: nd.enclave.public_key for nd in nodes}
    registry: dict[int, Block] = {0: genesis}
    verified: set[int] = set()
    state = {"mining": True}

    def deliver(nd: _Node, blk: Block) -> None:
        if blk.bid not in verified:
            if not verify_wait_certificate(blk.cert, keys[blk.miner]):
                return
            verified.add(blk.bid)
        if nd.view.receive(blk) and state["mining"]:
            nd.restart()

    def expire(nd: _Node, token: int) -> None:
        if token != nd.token or not state["mining"]:
            return
        cert = nd.enclave.poet_certificate()
        if cert is None:
            nd.restart()
            return
        parent = nd.view.tip
        blk = Block(len(registry), parent.bid, parent.height + 1, nd.node_id, parent.total_wait + cert.wait_time,
                    sim.now, cert)
        registry[blk.bid] = blk
        verified.add(blk.bid)
        if len(registry) - 1 >= rounds:
            state["mining"] = False
        nd.view.receive(blk)
        if state["mining"]:
            nd.restart()
        for other in nodes:
            if other is not nd:
                sim.after(config.propagation(nd.node_id, other.node_id, prop_rng), other.node_id, deliver, other, blk)

    for nd in nodes:
        nd._expire = lambda token, nd=nd: expire(nd, token)
        nd.restart()
    sim.run(stop_when=lambda: not state["mining"])
    end_of_mining = sim.now
    sim.run()
    tips = [nd.view.tip for nd in nodes]
    best = max(tips, key=branch_key)
    canonical = nodes[0].view.branch(best) if best.bid in nodes[0].view.blocks else []
    on_chain = set(canonical)
    produced = len(registry) - 1
    stale = sum(1 for bid in registry if bid != 0 and bid not in on_chain)
    converged = len({t.bid for t in tips}) == 1
    return PoetRun(config, seed, produced, canonical, stale, end_of_mining, converged, registry)


def measure_stale_rate(config: PoetConfig, rounds: int, seed: int = 0) -> float:
    """Fraction of produced blocks that are not on the final canonical chain."""
    return simulate_chain(config, rounds, seed).stale_rate


def run_poet_round(config: PoetConfig, seed: int = 0) -> list[tuple[int, float]]:
    """One election from a common start: the leader plus every valid competitor that fires before hearing it.

    Returns (node, wait_time) pairs sorted by wait.  Raises NoWinner when no
    certificate passes the q filter.
    """
    config.validate()
    rng = random.Random("poet-round|%d" % seed)
    prop_rng = random.Random("poet-round-prop|%d" % seed)
    t = [0.0]
    valid: list[tuple[int, float]] = []
    for i in range(config.n):
        enc = Enclave(i, "poet-round|%d" % seed, clock=lambda: t[0], rng=random.Random(rng.getrandbits(64)))
        wait = enc.poet_begin(config.l, config.block_time)
        t[0] = wait
        cert = enc.poet_certificate()
        t[0] = 0.0
        if cert is not None:
            valid.append((i, wait))
    if not valid:
        raise NoWinner("no certificate passed the filter")
    valid.sort(key=lambda p: (p[1], p[0]))
    leader, w0 = valid[0]
    return [(i, w) for i, w in valid if i == leader or w < w0 + config.propagation(leader, i, prop_rng)]


def competitor_counts(config: PoetConfig, rounds: int, seed: int = 0) -> list[int]:
    """Number of nodes passing the q filter in each of ``rounds`` independent draws."""
    rng = random.Random("poet-filter|%d" % seed)
    p = 2.0 ** -config.l if config.l > 0 else 1.0
    return [sum(1 for _ in range(config.n) if rng.random() < p) for _ in range(rounds)]


def compare_poet(n: int = 128, seeds=range(30), rounds: int = 300, **overrides) -> dict:
    """Stale rates of PoET (l = 0) and PoET+ (l = log2(n)/2) on matched configs, with a one-sided Welch test."""
    from scipy import stats

    base = PoetConfig(n=n, l=0.0, **overrides)
    plus = PoetConfig(n=n, l=poet_plus_l(n), **overrides)
    runs_base = [simulate_chain(base, rounds, s) for s in seeds]
    runs_plus = [simulate_chain(plus, rounds, s) for s in seeds]
    a = [r.stale_rate for r in runs_plus]
    b = [r.stale_rate for r in runs_base]
    test = stats.ttest_ind(a, b, equal_var=False, alternative="less")
    return {"poet": sum(b) / len(b), "poet_plus": sum(a) / len(a), "p_value": float(test.pvalue),
            "runs": runs_base + runs_plus}


def delay_sweep(config: PoetConfig, scales=(0.5, 1.0, 2.0), seeds=range(10), rounds: int = 200) -> list[tuple[float, float]]:
    """Mean stale rate per propagation-delay scale over a fixed seed set."""
    from dataclasses import replace

    out = []
    for sc in scales:
        cfg = replace(config, delay_scale=sc)
        rates = [measure_stale_rate(cfg, rounds, s) for s in seeds]
        out.append((sc, sum(rates) / len(rates)))
    return out


def runs_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for r in runs:
        w.writerow(r.csv_row())
    return buf.getvalue()


__all__ = ["PoetConfig", "NoWinner", "Block", "ChainView", "PoetRun", "simulate_chain", "measure_stale_rate",
           "run_poet_round", "competitor_counts", "compare_poet", "delay_sweep", "poet_plus_l", "runs_csv", "Fixed"]
