"""Delay models for message delivery."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional


def load_region_table(path: Optional[str] = None) -> tuple[list[str], list[list[float]]]:
    """Inter-region one-way latency (ms), rows = source region, columns = destination."""
    if path is None:
        text = resources.files("shardchain").joinpath("data/region_latency.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    return list(raw["regions"]), [list(map(float, row)) for row in raw["latency_ms"]]


REGIONS, REGION_LATENCY_MS = load_region_table()


class DelayModel:
    """Base class: ``delay(src, dst, rng)`` in seconds.  ``bound`` is the worst case, if finite."""

    bound: float = float("inf")

    def delay(self, src, dst, rng: random.Random) -> float:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass
class Fixed(DelayModel):
    d: float = 0.001

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("delay must be >= 0")
        self.bound = self.d

    def delay(self, src, dst, rng) -> float:
        return self.d

    def to_json(self):
        return {"type": "Fixed", "d": self.d}


@dataclass
class Uniform(DelayModel):
    lo: float = 0.0005
    hi: float = 0.002

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ValueError("need 0 <= lo <= hi")
        self.bound = self.hi

    def delay(self, src, dst, rng) -> float:
        return rng.uniform(self.lo, self.hi)

    def to_json(self):
        return {"type": "Uniform", "lo": self.lo, "hi": self.hi}


@dataclass
class RegionMatrix(DelayModel):
    """Nodes are pinned to regions; delay is the table entry (ms → s) plus optional jitter.

    Nodes without an explicit region are spread round-robin over the regions.
    Co-located nodes get ``local`` seconds.
    """

    region_of: Mapping = field(default_factory=dict)
    jitter: float = 0.0
    local: float = 0.0002
    regions: list = field(default_factory=lambda: list(REGIONS))
    table_ms: list = field(default_factory=lambda: [row[:] for row in REGION_LATENCY_MS])

    def __post_init__(self):
        self.bound = max(max(r) for r in self.table_ms) / 1000.0 + self.jitter + self.local
        self._index = {r: i for i, r in enumerate(self.regions)}

    def region(self, node) -> str:
        if node in self.region_of:
            return self.region_of[node]
        key = node if isinstance(node, int) else sum(map(ord, str(node)))
        return self.regions[key % len(self.regions)]

    def latency(self, src_region: str, dst_region: str) -> float:
        return self.table_ms[self._index[src_region]][self._index[dst_region]] / 1000.0

    def delay(self, src, dst, rng) -> float:
        a, b = self.region(src), self.region(dst)
        base = self.latency(a, b) if a != b else self.local
        return base + (rng.uniform(0, self.jitter) if self.jitter else 0.0)

    def to_json(self):
        return {"type": "RegionMatrix", "jitter": self.jitter, "local": self.local,
                "region_of": {str(k): v for k, v in self.region_of.items()}}


def delay_model_from_json(d: Mapping) -> DelayModel:
    kind = d.get("type", "Fixed")
    if kind == "Fixed":
        return Fixed(float(d.get("d", 0.001)))
    if kind == "Uniform":
        return Uniform(float(d.get("lo", 0.0005)), float(d.get("hi", 0.002)))
    if kind == "RegionMatrix":
        region_of = {int(k) if str(k).isdigit() else k: v for k, v in d.get("region_of", {}).items()}
        return RegionMatrix(region_of, float(d.get("jitter", 0.0)), float(d.get("local", 0.0002)))
    raise ValueError(f"unknown delay model {kind!r}")
