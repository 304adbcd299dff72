"""Module containers and the layers needed for small transformer encoders."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor registered on a module. Trainable unless frozen."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Minimal module tree.

    Parameters and child modules are discovered from instance attributes in
    assignment order (lists of modules are indexed). Buffers are plain numpy
    arrays named in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for mname, mod in self.named_modules(prefix):
            for key, val in vars(mod).items():
                if isinstance(val, Parameter) and id(val) not in seen:
                    seen.add(id(val))
                    yield (f"{mname}.{key}" if mname else key), val

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for key in mod._buffers:
                yield (f"{mname}.{key}" if mname else key), getattr(mod, key)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            extra = set(state) - (set(own) | set(bufs))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} "
                               f"unexpected={sorted(extra)[:5]}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                continue
            if target.shape != np.shape(arr):
                raise ShapeError(f"{name}: expected {target.shape}, got {np.shape(arr)}")
            target[...] = arr


class Linear(Module):
    """``y = x @ W.T + b`` with ``W`` stored as [out, in]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02, zero: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        w = np.zeros((out_features, in_features)) if zero else rng.normal(0.0, std, (out_features, in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=T.default_dtype())
        self.running_var = np.ones(dim, dtype=T.default_dtype())
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class MLP(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Bidirectional multi-head self-attention over [B, L, D]."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return t.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
        ctx = T.softmax(scores, axis=-1) @ v
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, d))


class TransformerBlock(Module):
    """Pre-norm residual block: attention then a GELU MLP."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio * width, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
