"""Actions emitted by the sans-IO state machines.

Machines never touch a transport or a clock: they consume one
(message, now) event at a time and return a list of actions for the
caller (the simulator, or a test) to interpret.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .messages import SignedEnvelope


@dataclass(frozen=True)
class Send:
    dst: str  # principal name or endpoint reference ("ep:<name>")
    env: SignedEnvelope


@dataclass(frozen=True)
class StartTimer:
    delay: float
    tag: str


Action = Send | StartTimer

# tracer(kind, principal, detail) -> None; the harness stamps seq/time.
Tracer = Callable[[str, str, dict], None]


def null_tracer(kind: str, principal: str, detail: dict) -> None:
    return None
