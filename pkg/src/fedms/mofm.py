"""Mixture of a frozen global expert and a personalized local expert.

A gate (frozen visual backbone + small trainable adapter) emits a per-image
weight ``lam``; the final logits are ``lam * global + (1 - lam) * local``.
"""

from __future__ import annotations

import copy
import warnings
from collections import OrderedDict
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import class_logits
from .errors import ContractError, ShapeError
from .lora import LoraModel
from .nn import BatchNorm1d, Linear, Module
from .sal import prepare_stage2
from .tensor import Tensor

GATE_PREFIX = "gate."


class GateAdapter(Module):
    """Linear -> BN -> GELU -> Linear -> BN -> softmax over the two experts.

    The last linear map starts at zero so both experts begin with weight 0.5.
    """

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(in_features, hidden, rng)
        self.bn1 = BatchNorm1d(hidden)
        self.fc2 = Linear(hidden, 2, rng, zero=True)
        self.bn2 = BatchNorm1d(2)

    def forward(self, features: Tensor) -> Tensor:
        h = T.gelu(self.bn1(self.fc1(features)))
        return T.softmax(self.bn2(self.fc2(h)), axis=-1)

    def payload(self) -> "OrderedDict[str, np.ndarray]":
        """Everything a client uploads: parameters and batch-norm statistics."""
        return OrderedDict((GATE_PREFIX + k, v) for k, v in self.state_dict().items())

    def load_payload(self, payload: dict):
        self.load_state_dict({k[len(GATE_PREFIX):]: v for k, v in payload.items()})

    def payload_size(self) -> int:
        return sum(v.size for v in self.state_dict().values())


class GateModel(Module):
    def __init__(self, backbone: Module, adapter: GateAdapter):
        backbone.requires_grad_(False)
        self.backbone = backbone
        self.adapter = adapter

    def forward(self, images, features: Tensor | None = None) -> Tensor:
        if features is None:
            self.backbone.eval()
            with T.no_grad():
                features = self.backbone(images)
        return self.adapter(Tensor(features.data))

    def total_parameters(self) -> int:
        return self.backbone.num_parameters() + self.adapter.num_parameters()


def gate_lambda(gate: GateModel, images, features: Tensor | None = None) -> Tensor:
    """Weight of the global expert for each image, shape [B]."""
    return gate(images, features)[:, 0]


def _is_frozen(model: Module) -> bool:
    return not any(p.requires_grad for p in model.parameters())


class MixtureModel(Module):
    def __init__(self, global_expert: LoraModel, local_expert: LoraModel, gate: GateModel):
        if global_expert.cfg.feature_dim != local_expert.cfg.feature_dim:
            raise ShapeError("global and local experts must share feature_dim")
        if not _is_frozen(global_expert):
            raise ContractError("global expert must be frozen")
        self.global_expert = global_expert
        self.local_expert = local_expert
        self.gate = gate
        self._global_text: tuple[bytes, Tensor] | None = None

    @classmethod
    def from_global(cls, global_expert: LoraModel, seed: int = 0, hidden_mult: int = 4) -> "MixtureModel":
        """Local expert = exact copy of the global one with only its top layer trainable.

        The gate backbone is the global expert's visual tower itself, shared read-only.
        """
        global_expert.requires_grad_(False)
        local = copy.deepcopy(global_expert)
        prepare_stage2(local)
        fdim = global_expert.cfg.feature_dim
        adapter = GateAdapter(fdim, hidden_mult * fdim, np.random.default_rng(seed))
        return cls(global_expert, local, GateModel(global_expert.visual, adapter))

    def global_text_features(self, class_texts) -> Tensor:
        key = np.asarray(class_texts).tobytes()
        if self._global_text is None or self._global_text[0] != key:
            self.global_expert.eval()
            with T.no_grad():
                self._global_text = (key, self.global_expert.textual(class_texts))
        return self._global_text[1]

    def global_image_features(self, images) -> Tensor:
        self.global_expert.eval()
        with T.no_grad():
            return self.global_expert.visual(images)

    def expert_logits(self, images, class_texts, global_features: Tensor | None = None):
        if global_features is None:
            global_features = self.global_image_features(images)
        g = class_logits(global_features, self.global_text_features(class_texts),
                         self.global_expert.logit_scale)
        le = self.local_expert
        local = class_logits(le.visual(images), le.textual(class_texts), le.logit_scale)
        return g, local, global_features

    def forward(self, images, class_texts, global_features: Tensor | None = None,
                lam: Tensor | float | None = None):
        """Return ``(mixture_logits [B, K], lam [B])``."""
        g, local, gfeat = self.expert_logits(images, class_texts, global_features)
        if lam is None:
            backbone_feats = gfeat if self.gate.backbone is self.global_expert.visual else None
            lam = gate_lambda(self.gate, images, backbone_feats)
        elif not isinstance(lam, Tensor):
            lam = Tensor(np.broadcast_to(np.asarray(lam, dtype=T.default_dtype()), (g.shape[0],)))
        return mix(g, local, lam), lam

    def train(self, mode: bool = True) -> "MixtureModel":
        super().train(mode)
        self.global_expert.eval()   # frozen expert (and the gate backbone it shares) never trains
        return self

    def local_parameters(self) -> list:
        return self.local_expert.parameters() + self.gate.adapter.parameters()


def mix(global_logits: Tensor, local_logits: Tensor, lam: Tensor) -> Tensor:
    """Per-row convex combination ``lam * global + (1 - lam) * local``."""
    if global_logits.shape != local_logits.shape:
        raise ShapeError(f"expert logits differ: {global_logits.shape} vs {local_logits.shape}")
    w = lam.reshape(-1, 1)
    return w * global_logits + (1.0 - w) * local_logits


def mixture_logits(m: MixtureModel, images, class_texts, lam=None) -> Tensor:
    return m(images, class_texts, lam=lam)[0]


# -- aggregation ------------------------------------------------------------------

def weighted_average(states: Sequence[dict], weights: Sequence[float]) -> "OrderedDict[str, np.ndarray]":
    """Name-wise weighted sum, reduced in the given order, accumulated in float64."""
    if not states:
        raise ContractError("nothing to aggregate")
    names = list(states[0])
    for i, s in enumerate(states[1:], 1):
        if list(s) != names:
            raise ShapeError(f"state {i} has different parameter names")
        for k in names:
            if np.shape(s[k]) != np.shape(states[0][k]):
                raise ShapeError(f"state {i}: {k} has shape {np.shape(s[k])}, "
                                 f"expected {np.shape(states[0][k])}")
    out = OrderedDict()
    for k in names:
        acc = np.zeros(np.shape(states[0][k]), dtype=np.float64)
        for w, s in zip(weights, states):
            acc += w * np.asarray(s[k], dtype=np.float64)
        out[k] = acc.astype(np.asarray(states[0][k]).dtype)
    return out


def loss_weights(losses: Sequence[float]) -> list[float]:
    """Weights proportional to client loss; uniform (with a warning) if any loss <= 0."""
    losses = [float(x) for x in losses]
    n = len(losses)
    if any(not x > 0 for x in losses):
        warnings.warn("non-positive client loss; falling back to uniform gate weights",
                      RuntimeWarning, stacklevel=2)
        return [1.0 / n] * n
    total = sum(losses)
    return [x / total for x in losses]


def aggregate_gate_adapters(adapters: Sequence[dict], losses: Sequence[float]) -> "OrderedDict[str, np.ndarray]":
    """Loss-weighted average of gate-adapter payloads (running statistics included)."""
    if len(adapters) != len(losses):
        raise ContractError(f"{len(adapters)} adapters but {len(losses)} losses")
    if len(adapters) == 1:
        return OrderedDict((k, np.array(v)) for k, v in adapters[0].items())
    return weighted_average(adapters, loss_weights(losses))
