"""Discrete-event message bus between the control center and outlets.

Single logical timeline, no sockets. Latency and drops come from one seeded
RNG per bus, so a run is fully reproducible from its seed.
"""

from __future__ import annotations

import csv
import heapq
import random
from dataclasses import dataclass
from enum import Enum
from typing import Any, Hashable, Iterable

BROADCAST = "*"
TRACE_HEADER = ("t_send", "t_deliver", "kind", "src", "dst", "dropped")


class MessageKind(str, Enum):
    BUNDLE = "Bundle"
    TELEMETRY = "Telemetry"
    COMMAND = "Command"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    src: Hashable
    dst: Hashable
    payload: Any
    send_time: float


@dataclass(frozen=True)
class DeliverySpec:
    """Latency is a fixed float or a (lo, hi) uniform range, in seconds."""

    latency: float | tuple[float, float] = 0.0
    drop_probability: float = 0.0
    fifo: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.latency, tuple):
            lo, hi = self.latency
            if not (0 <= lo <= hi):
                raise ValueError(f"latency range must satisfy 0 <= lo <= hi, got {self.latency}")
        elif self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not (0.0 <= self.drop_probability <= 1.0):
            raise ValueError("drop_probability must lie in [0, 1]")


@dataclass(frozen=True)
class Delivery:
    time: float
    seq: int
    message: Message


class Bus:
    def __init__(
        self,
        seed: int = 0,
        default: DeliverySpec | None = None,
        record_trace: bool = True,
    ) -> None:
        self._rng = random.Random(seed)
        self.default = default or DeliverySpec()
        self.specs: dict[MessageKind, DeliverySpec] = {}
        self.clock = float("-inf")
        self._queue: list[tuple[float, int, Message]] = []
        self._seq = 0
        self._last_pair: dict[tuple[Hashable, Hashable], float] = {}
        self.record_trace = record_trace
        self.trace: list[tuple[float, float, str, Hashable, Hashable, bool]] = []

    def set_spec(self, kind: MessageKind, spec: DeliverySpec) -> None:
        self.specs[kind] = spec

    def spec_for(self, kind: MessageKind) -> DeliverySpec:
        return self.specs.get(kind, self.default)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def _latency(self, spec: DeliverySpec) -> float:
        lat = spec.latency
        if isinstance(lat, tuple):
            lo, hi = lat
            return lo if lo == hi else self._rng.uniform(lo, hi)
        return float(lat)

    def schedule(self, msg: Message) -> float | None:
        """Enqueue ``msg``; returns its delivery time, or None if dropped."""
        if msg.send_time < self.clock:
            raise ValueError(f"send_time {msg.send_time} is before bus clock {self.clock}")
        spec = self.spec_for(msg.kind)
        # one draw for the drop decision, always consumed, keeps streams aligned
        u = self._rng.random()
        dropped = spec.drop_probability > 0.0 and u < spec.drop_probability
        if dropped:
            if self.record_trace:
                self.trace.append((msg.send_time, float("nan"), msg.kind.value, msg.src, msg.dst, True))
            return None
        t = msg.send_time + self._latency(spec)
        if spec.fifo:
            pair = (msg.src, msg.dst)
            t = max(t, self._last_pair.get(pair, t))
            self._last_pair[pair] = t
        heapq.heappush(self._queue, (t, self._seq, msg))
        self._seq += 1
        if self.record_trace:
            self.trace.append((msg.send_time, t, msg.kind.value, msg.src, msg.dst, False))
        return t

    def broadcast(
        self, kind: MessageKind, src: Hashable, recipients: Iterable[Hashable], payload: Any, send_time: float
    ) -> int:
        """Fan a broadcast out to one message per recipient; returns the number enqueued."""
        n = 0
        for dst in recipients:
            if self.schedule(Message(kind, src, dst, payload, send_time)) is not None:
                n += 1
        return n

    def advance(self, t: float) -> list[Delivery]:
        """Pop every delivery due at or before ``t`` in (time, sequence) order."""
        if t < self.clock:
            raise ValueError(f"cannot move clock back from {self.clock} to {t}")
        out = []
        q = self._queue
        while q and q[0][0] <= t:
            tt, seq, msg = heapq.heappop(q)
            out.append(Delivery(tt, seq, msg))
        self.clock = t
        return out

    def write_trace(self, path, header_lines: Iterable[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for ts, td, kind, src, dst, dropped in self.trace:
                w.writerow([repr(ts), "" if dropped else repr(td), kind, src, dst, int(dropped)])
