"""Sparsely activated LoRA: plateau-driven, top-down unfreezing of LoRA layers."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .lora import LoraModel

DEFAULT_QUEUE_LEN = 5
DEFAULT_THRESHOLD = 0.005


class CapabilityQueue:
    """Bounded FIFO of recent accuracies; pushing past capacity drops the oldest."""

    def __init__(self, max_len: int = DEFAULT_QUEUE_LEN, entries=()):
        if max_len < 1:
            raise ValueError(f"queue length must be >= 1, got {max_len}")
        self.max_len = max_len
        self._items: deque[float] = deque(maxlen=max_len)
        for e in entries:
            self.push(e)

    def push(self, acc: float):
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {acc}")
        self._items.append(float(acc))

    @property
    def full(self) -> bool:
        return len(self._items) == self.max_len

    def mean(self) -> float:
        return sum(self._items) / self.max_len

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __repr__(self):
        return f"CapabilityQueue({list(self._items)}, max_len={self.max_len})"


def incremental_factor(queue: CapabilityQueue, acc_now: float) -> float | None:
    """Current accuracy minus the mean of the stored ones; None until the queue is full."""
    if not queue.full:
        return None
    return acc_now - queue.mean()


@dataclass
class ActivationEvent:
    layer: int
    delta: float


@dataclass
class SalState:
    """Controller state for one client. ``next_layer`` counts down towards 0."""
    queue: CapabilityQueue
    threshold: float = DEFAULT_THRESHOLD
    next_layer: int = -1
    exhausted: bool = False
    history: list[ActivationEvent] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: LoraModel, queue_len: int = DEFAULT_QUEUE_LEN,
              threshold: float = DEFAULT_THRESHOLD) -> "SalState":
        """State for a model whose layers above ``next_layer`` are already active."""
        active = model.active_layers("visual")
        nxt = (min(active) if active else model.depth) - 1
        return cls(CapabilityQueue(queue_len), threshold, nxt, nxt < 0)


def prepare_stage2(model: LoraModel):
    """Freeze every pair, then activate only the top layer of both towers."""
    model.set_all_active(False)
    model.set_layer_active(None, model.depth - 1, True)


def step(state: SalState, model: LoraModel, acc_now: float) -> ActivationEvent | None:
    """Record ``acc_now`` and unfreeze the next lower layer on a plateau.

    The incremental factor is taken against the queue before ``acc_now`` is
    pushed; a bottleneck needs ``delta < threshold`` strictly.
    """
    delta = incremental_factor(state.queue, acc_now)
    state.queue.push(acc_now)
    if state.next_layer < 0:
        state.exhausted = True
    if delta is None or state.exhausted or not delta < state.threshold:
        return None
    event = ActivationEvent(state.next_layer, delta)
    model.set_layer_active(None, state.next_layer, True)
    state.history.append(event)
    state.next_layer -= 1
    if state.next_layer < 0:
        state.exhausted = True
    return event
