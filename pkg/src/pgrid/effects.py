"""What a node handler asks its host to do.

Handlers never touch sockets or clocks; they return a list of these and the
host (simulator or UDP daemon) carries them out in order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Union

if TYPE_CHECKING:
    from .balancer import MigrationDecision
    from .discovery import Resolution
    from .model import Endpoint
    from .protocol import Message


@dataclass(frozen=True)
class Send:
    dest: Endpoint
    message: Message


@dataclass(frozen=True)
class StartTimer:
    """(Re)arm the named timer; an armed timer of the same name is replaced."""

    name: str
    delay: float


@dataclass(frozen=True)
class StopTimer:
    name: str


@dataclass(frozen=True)
class Decided:
    decision: MigrationDecision


@dataclass(frozen=True)
class Resolved:
    qid: int
    resolution: Resolution


@dataclass(frozen=True)
class Note:
    event: str
    detail: dict[str, Any] = field(default_factory=dict)


Effect = Union[Send, StartTimer, StopTimer, Decided, Resolved, Note]


def sends(effects) -> list[Send]:
    return [e for e in effects if isinstance(e, Send)]
