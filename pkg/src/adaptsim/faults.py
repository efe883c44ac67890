"""Seeded fault injection: lossy watches, failing adaptation calls,
controller restarts, and scripted broadcast events.

Each fault class draws from its own RNG stream derived from the run seed,
so enabling one fault never shifts the draws of another.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any


@dataclass
class FaultSpec:
    watch_drop_probability: float = 0.0
    adapt_call_failure_probability: float = 0.0
    controller_restarts: list[tuple[str, int]] = field(default_factory=list)  # (controller, at_seconds)
    scripted_events: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, obj: dict[str, Any] | None) -> "FaultSpec":
        obj = obj or {}
        return cls(
            watch_drop_probability=float(obj.get("watchDropProbability", 0.0)),
            adapt_call_failure_probability=float(obj.get("adaptCallFailureProbability", 0.0)),
            controller_restarts=[
                (r["controller"], int(r["atSeconds"])) for r in obj.get("controllerRestarts", [])
            ],
            scripted_events=list(obj.get("scriptedEvents", [])),
        )


class FaultHarness:
    def __init__(self, spec: FaultSpec, seed: int) -> None:
        self.spec = spec
        # String seeds hash via SHA-512 inside random.Random: stable across runs.
        self._watch_rng = random.Random(f"{seed}:watch-drop")
        self._adapt_rng = random.Random(f"{seed}:adapt-failure")

    def should_drop_watch(self, _notification, _subscriber: str) -> bool:
        p = self.spec.watch_drop_probability
        if p <= 0.0:
            return False
        return self._watch_rng.random() < p

    def should_fail_adapt_call(self) -> bool:
        p = self.spec.adapt_call_failure_probability
        if p <= 0.0:
            return False
        return self._adapt_rng.random() < p
