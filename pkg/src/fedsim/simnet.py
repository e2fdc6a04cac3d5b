"""Deterministic discrete-event message delivery and traffic accounting.

Virtual time is real-valued seconds with no wall-clock coupling. Each
send draws its latency offset from a stream keyed by (model seed, event
seq), so a delivery schedule is a pure function of the latency model and
the send sequence. Events with equal delivery times drain in send order
(the monotone seq breaks ties), which is what makes zero-jitter equal
latencies reproduce synchronous client-id ordering exactly.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_seed

HEADER_BYTES = 64
MODEL_TAGS = frozenset({"model_deploy", "model_update"})


class SimnetError(ValueError):
    """Raised for unknown nodes and malformed sends."""


class NetworkExhausted(Exception):
    """Raised when next_event is called with nothing pending."""


def model_payload_bytes(param_count: int) -> int:
    """Wire size of one model message: 8 bytes per float64 plus header."""
    return 8 * param_count + HEADER_BYTES


@dataclass(frozen=True)
class Event:
    deliver_at: float
    seq: int
    src: str
    dst: str
    tag: str
    size_bytes: int
    sent_at: float


@dataclass(frozen=True)
class LatencyModel:
    """Per-node base delay plus uniform jitter, all in virtual seconds."""

    base: dict[str, float]
    jitter: dict[str, float]
    seed: int

    def __post_init__(self):
        for node, value in self.base.items():
            if value < 0:
                raise SimnetError(f"base delay of {node!r} must be >= 0, got {value}")
        for node, value in self.jitter.items():
            if value < 0:
                raise SimnetError(f"jitter of {node!r} must be >= 0, got {value}")

    @classmethod
    def zero(cls, nodes: list[str], seed: int = 0) -> "LatencyModel":
        return cls({n: 0.0 for n in nodes}, {n: 0.0 for n in nodes}, seed)

    @classmethod
    def uniform(cls, nodes: list[str], base: float, jitter: float,
                seed: int) -> "LatencyModel":
        return cls({n: base for n in nodes}, {n: jitter for n in nodes}, seed)

    def nodes(self) -> frozenset[str]:
        return frozenset(self.base)

    def offset(self, src: str, seq: int) -> float:
        """Latency for event `seq` sent by `src`; never negative."""
        if src not in self.base:
            raise SimnetError(f"unknown node {src!r}")
        width = self.jitter.get(src, 0.0)
        draw = 0.0
        if width > 0.0:
            rng = np.random.default_rng(derive_seed(self.seed, "jitter", seq))
            draw = float(rng.uniform(-width, width))
        return max(0.0, self.base[src] + draw)


@dataclass
class Network:
    latency: LatencyModel
    now: float = 0.0
    _seq: int = 0
    _pending: list[tuple[float, int, Event]] = field(default_factory=list)
    trace: list[Event] = field(default_factory=list)

    def send(self, src: str, dst: str, tag: str, size_bytes: int,
             now: float | None = None) -> Event:
        """Schedule a message; delivery time is send time plus latency."""
        nodes = self.latency.nodes()
        if src not in nodes or dst not in nodes:
            raise SimnetError(f"unknown node in send {src!r} -> {dst!r}")
        if size_bytes < 0:
            raise SimnetError(f"size_bytes must be >= 0, got {size_bytes}")
        sent_at = self.now if now is None else float(now)
        if sent_at < 0:
            raise SimnetError(f"send time must be >= 0, got {sent_at}")
        event = Event(
            deliver_at=sent_at + self.latency.offset(src, self._seq),
            seq=self._seq,
            src=src,
            dst=dst,
            tag=tag,
            size_bytes=int(size_bytes),
            sent_at=sent_at,
        )
        self._seq += 1
        heapq.heappush(self._pending, (event.deliver_at, event.seq, event))
        return event

    def next_event(self) -> Event:
        """Pop the earliest pending event; ties resolve by send order."""
        if not self._pending:
            raise NetworkExhausted("no pending events")
        _, _, event = heapq.heappop(self._pending)
        self.now = event.deliver_at
        self.trace.append(event)
        return event

    def drain(self) -> list[Event]:
        out = []
        while self._pending:
            out.append(self.next_event())
        return out


def comm_totals(trace: list[Event], param_count: int) -> dict[str, int]:
    """Message and byte totals; model payloads are sized by param_count."""
    model_bytes = model_payload_bytes(param_count)
    total = 0
    for event in trace:
        total += model_bytes if event.tag in MODEL_TAGS else event.size_bytes
    return {"messages": len(trace), "bytes": total}


def write_trace_jsonl(trace: list[Event], path: str) -> None:
    """One JSON object per line, in delivery order."""
    with open(path, "w", encoding="utf-8") as fh:
        for event in trace:
            fh.write(json.dumps({
                "deliver_at": event.deliver_at,
                "seq": event.seq,
                "src": event.src,
                "dst": event.dst,
                "tag": event.tag,
                "size_bytes": event.size_bytes,
            }, sort_keys=False))
            fh.write("\n")
