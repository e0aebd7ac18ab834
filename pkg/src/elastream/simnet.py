"""Logical-time network simulator.

Links are FIFO: a message never overtakes an earlier one on the same link,
however its delay is drawn.  Each link draws delays and duplication from its
own random stream derived from ``(seed, from, to)``, so adding traffic on one
link leaves every other link's timing untouched.  Senders may split a link
into named channels; each channel then has its own random stream and FIFO
order, so traffic between one pair of endpoints does not perturb another
pair sharing the same nodes.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, TextIO

NodeId = int


class UnknownLink(KeyError):
    pass


@dataclass(frozen=True)
class Delay:
    lo: int = 0
    hi: int | None = None

    def __post_init__(self) -> None:
        hi = self.lo if self.hi is None else self.hi
        if self.lo < 0 or hi < self.lo:
            raise ValueError(f"invalid delay range {self.lo}..{hi}")

    @classmethod
    def fixed(cls, steps: int) -> Delay:
        return cls(steps, steps)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> Delay:
        return cls(lo, hi)

    @classmethod
    def parse(cls, spec: int | str | dict) -> Delay:
        """Accepts ``3``, ``"fixed(3)"``, ``"uniform(1,5)"`` or ``{"lo": 1, "hi": 5}``."""
        if isinstance(spec, int):
            return cls.fixed(spec)
        if isinstance(spec, dict):
            return cls(int(spec["lo"]), int(spec.get("hi", spec["lo"])))
        text = str(spec).strip().replace(" ", "")
        if text.isdigit():
            return cls.fixed(int(text))
        name, _, rest = text.partition("(")
        args = [int(a) for a in rest.rstrip(")").split(",") if a]
        if name == "fixed" and len(args) == 1:
            return cls.fixed(args[0])
        if name == "uniform" and len(args) == 2:
            return cls.uniform(*args)
        raise ValueError(f"unrecognised delay {spec!r}")

    def sample(self, rng: random.Random) -> int:
        hi = self.lo if self.hi is None else self.hi
        return self.lo if hi == self.lo else rng.randint(self.lo, hi)


@dataclass(frozen=True)
class LinkConfig:
    src: NodeId
    dst: NodeId
    delay: Delay = field(default_factory=Delay)
    duplicate_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise ValueError(f"duplicate_prob {self.duplicate_prob} outside [0, 1]")


@dataclass
class _Link:
    config: LinkConfig
    rng: random.Random
    tail: int = 0
    sent: int = 0


@dataclass(order=True)
class Delivery:
    step: int
    seq: int
    src: NodeId = field(compare=False)
    dst: NodeId = field(compare=False)
    message: Any = field(compare=False)
    duplicate: bool = field(default=False, compare=False)


class SimNetwork:
    """Scheduler plus links.

    ``links`` lists explicit link configs; ``default`` (if given) is used for
    any other pair of distinct nodes, re-addressed to that pair.  A node can
    always send to itself with zero delay.
    """

    def __init__(self, seed: int, links: list[LinkConfig] = (), default: LinkConfig | None = None,
                 trace: TextIO | None = None, describe: Callable[[Any], str] = repr):
        self.seed = seed
        self.step = 0
        self.default = default
        self.trace = trace
        self.describe = describe
        self.delivered = 0
        self._configs = {(c.src, c.dst): c for c in links}
        self._links: dict[tuple[NodeId, NodeId, Hashable], _Link] = {}
        self._pending: list[Delivery] = []
        self._seq = itertools.count()

    def link(self, src: NodeId, dst: NodeId, channel: Hashable = None) -> _Link:
        link = self._links.get((src, dst, channel))
        if link is not None:
            return link
        config = self._configs.get((src, dst))
        if config is None:
            if src == dst:
                config = LinkConfig(src, dst)
            elif self.default is not None:
                config = LinkConfig(src, dst, self.default.delay, self.default.duplicate_prob)
            else:
                raise UnknownLink(f"no link configured from node {src} to node {dst}")
        label = f"{self.seed}:{src}->{dst}" if channel is None else f"{self.seed}:{src}->{dst}#{channel}"
        link = _Link(config, random.Random(label))
        self._links[(src, dst, channel)] = link
        return link

    def send(self, src: NodeId, dst: NodeId, message: Any, channel: Hashable = None) -> int:
        """Queue ``message``; returns the step it will be delivered at."""
        link = self.link(src, dst, channel)
        at = max(self.step + link.config.delay.sample(link.rng), link.tail)
        link.tail = at
        link.sent += 1
        heapq.heappush(self._pending, Delivery(at, next(self._seq), src, dst, message))
        if link.config.duplicate_prob and link.rng.random() < link.config.duplicate_prob:
            heapq.heappush(self._pending, Delivery(at, next(self._seq), src, dst, message, True))
        return at

    def pending(self) -> int:
        return len(self._pending)

    def next_due(self) -> int | None:
        return self._pending[0].step if self._pending else None

    def pop_due(self) -> Delivery | None:
        """Next delivery due at or before the current step, or None."""
        if self._pending and self._pending[0].step <= self.step:
            delivery = heapq.heappop(self._pending)
            self.delivered += 1
            if self.trace is not None:
                dup = " dup" if delivery.duplicate else ""
                self.trace.write(
                    f"{self.step} {delivery.src}->{delivery.dst}{dup} {self.describe(delivery.message)}\n"
                )
            return delivery
        return None

    def deliver_step(self, handler: Callable[[Delivery], None]) -> int:
        """Deliver everything due this step, including zero-delay sends made by ``handler``."""
        count = 0
        while (delivery := self.pop_due()) is not None:
            handler(delivery)
            count += 1
        return count

    def advance(self) -> None:
        self.step += 1


def send(net: SimNetwork, src: NodeId, dst: NodeId, message: Any, channel: Hashable = None) -> int:
    return net.send(src, dst, message, channel)


def step(net: SimNetwork, handler: Callable[[Delivery], None]) -> list[Delivery]:
    """Deliver this step's messages to ``handler``, then move the clock forward."""
    seen: list[Delivery] = []

    def record(delivery: Delivery) -> None:
        seen.append(delivery)
        handler(delivery)

    net.deliver_step(record)
    net.advance()
    return seen
