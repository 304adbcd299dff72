"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers; ``step`` counts updates applied so far."""
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """Apply one in-place AdamW update to ``param``."""
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.step += 1
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


@dataclass
class Adam:
    """Adam over a fixed parameter list.

    Tensors whose ``requires_grad`` is false are skipped entirely, so layers
    can be frozen and unfrozen between steps without rebuilding the optimizer.
    Moment buffers are created lazily, the first time a parameter is updated.
    """
    params: Sequence[Tensor]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.states:
            self.states = [AdamState() for _ in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            if p.grad is None:
                name = p.name or f"#{i}"
                raise ContractError(f"trainable parameter {name} has no gradient")
            adam_update(p.data, p.grad, self.states[i], self.lr, self.beta1,
                        self.beta2, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.states):
            if st.m is None:
                continue
            out[f"{i}.m"] = st.m
            out[f"{i}.v"] = st.v
            out[f"{i}.step"] = np.array([st.step], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.states = [AdamState() for _ in self.params]
        for i, st in enumerate(self.states):
            if f"{i}.m" in arrays:
                st.m = np.array(arrays[f"{i}.m"], dtype=self.params[i].data.dtype)
                st.v = np.array(arrays[f"{i}.v"], dtype=self.params[i].data.dtype)
                st.step = int(arrays[f"{i}.step"][0])
