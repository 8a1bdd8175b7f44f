"""Adversary specification: which actors misbehave and how."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class EquivocateSeq:
    """Send conflicting digests for one slot to different halves of the committee."""


@dataclass(frozen=True)
class Crash:
    at: float = 0.0


@dataclass(frozen=True)
class Drop:
    p: float = 1.0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise SpecError("drop probability outside [0, 1]")


@dataclass(frozen=True)
class DelayMax:
    """Hold every outgoing message for the maximum the delivery contract allows."""

    extra: float = 0.5


@dataclass(frozen=True)
class StaleSealOnRestart:
    """Seal at ``seal_at``, crash at ``crash_at``, relaunch at ``restart_at`` fed the old seal."""

    seal_at: float
    crash_at: float
    restart_at: float


@dataclass(frozen=True)
class StallingClient:
    """Client relays nothing after ``after`` relay steps (0 = only submits BeginTx)."""

    after: int = 0


@dataclass(frozen=True)
class SelectiveBeaconSend:
    targets: tuple = ()


Behavior = Union[EquivocateSeq, Crash, Drop, DelayMax, StaleSealOnRestart, StallingClient, SelectiveBeaconSend]

NODE_BEHAVIORS = (EquivocateSeq, Crash, Drop, DelayMax, StaleSealOnRestart, SelectiveBeaconSend)


@dataclass
class AdversarySpec:
    byzantine: frozenset = frozenset()
    behaviors: dict = field(default_factory=dict)  # actor -> tuple of behaviours

    def __post_init__(self):
        self.byzantine = frozenset(self.byzantine)
        self.behaviors = {a: tuple(b) if isinstance(b, (list, tuple)) else (b,) for a, b in self.behaviors.items()}

    def of(self, actor) -> tuple:
        return self.behaviors.get(actor, ())

    def has(self, actor, kind) -> Optional[Behavior]:
        for b in self.of(actor):
            if isinstance(b, kind):
                return b
        return None

    def validate(self, nodes: Iterable, clients: Iterable = (), max_byzantine: Optional[int] = None,
                 committees: Optional[Iterable[Iterable]] = None, f: Optional[int] = None) -> None:
        nodes, clients = set(nodes), set(clients)
        for actor, bs in self.behaviors.items():
            for b in bs:
                if isinstance(b, StallingClient):
                    if actor not in clients:
                        raise SpecError(f"StallingClient attached to non-client {actor!r}")
                elif actor not in self.byzantine:
                    raise SpecError(f"{type(b).__name__} attached to non-Byzantine actor {actor!r}")
        if not self.byzantine <= nodes:
            raise SpecError("Byzantine set names unknown nodes")
        if max_byzantine is not None and len(self.byzantine) > max_byzantine:
            raise SpecError(f"{len(self.byzantine)} Byzantine nodes exceed the bound {max_byzantine}")
        if committees is not None and f is not None:
            for members in committees:
                bad = len(self.byzantine & set(members))
                if bad > f:
                    raise SpecError(f"committee has {bad} Byzantine members > f={f}")

    @staticmethod
    def none() -> "AdversarySpec":
        return AdversarySpec()
