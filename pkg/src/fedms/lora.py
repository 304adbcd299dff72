"""Low-rank adapters on frozen dual-encoder weights.

Each adapted weight ``W0`` ([E, F], out x in) gains a pair ``W_A`` [E, H] and
``W_B`` [H, F]; the adapted map is ``y = (W0 + W_A W_B) x``. ``W_B`` starts at
zero so a fresh injection leaves every output unchanged. Pairs can be switched
on and off per layer; an inactive pair neither trains nor contributes.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import tensor as T
from .encoder import DualEncoder
from .errors import ContractError, ShapeError
from .nn import Linear, Module, Parameter
from .tensor import Tensor

ENCODERS = ("visual", "textual")
DEFAULT_SITES = ("q", "v")
INIT_STD = 0.02


class LoraPair(Module):
    def __init__(self, out_features: int, in_features: int, rank: int, dropout_p: float,
                 layer_index: int, rng: np.random.Generator, active: bool = True):
        if rank < 1:
            raise ContractError(f"LoRA rank must be >= 1, got {rank}")
        if rank > min(out_features, in_features):
            raise ContractError(
                f"LoRA rank {rank} exceeds min(E, F) = {min(out_features, in_features)}")
        if not 0.0 <= dropout_p < 1.0:
            raise ContractError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.W_A = Parameter(rng.normal(0.0, INIT_STD, (out_features, rank)))
        self.W_B = Parameter(np.zeros((rank, in_features)))
        self.rank = rank
        self.dropout_p = dropout_p
        self.layer_index = layer_index
        self.rng: np.random.Generator | None = None
        self.active = active

    @property
    def active(self) -> bool:
        return self._active

    @active.setter
    def active(self, flag: bool):
        self._active = bool(flag)
        self.W_A.requires_grad = self._active
        self.W_B.requires_grad = self._active

    @property
    def num_parameters_pair(self) -> int:
        return self.W_A.size + self.W_B.size


def lora_forward(pair: LoraPair, W0: Tensor, x: Tensor, bias: Tensor | None = None,
                 training: bool = False) -> Tensor:
    """Adapted linear map on row-vector inputs ``x`` [..., F].

    Computes ``x W0^T + drop(x) W_B^T W_A^T`` when the pair is active and
    ``x W0^T`` otherwise. Dropout touches only the low-rank path.
    """
    if W0.shape != (pair.W_A.shape[0], pair.W_B.shape[1]):
        raise ShapeError(f"W0 {W0.shape} does not match LoRA pair "
                         f"{pair.W_A.shape} x {pair.W_B.shape}")
    if x.shape[-1] != W0.shape[1]:
        raise ShapeError(f"input {x.shape} does not conform with W0 {W0.shape}")
    y = x @ W0.T
    if bias is not None:
        y = y + bias
    if not pair.active:
        return y
    h = T.dropout(x, pair.dropout_p, training, pair.rng)
    return y + (h @ pair.W_B.T) @ pair.W_A.T


class LoraLinear(Module):
    """A frozen ``Linear`` with a LoRA pair riding on it."""

    def __init__(self, base: Linear, pair: LoraPair):
        self.base = base
        self.pair = pair

    def forward(self, x: Tensor) -> Tensor:
        return lora_forward(self.pair, self.base.weight, x, self.base.bias, self.training)


class LoraModel(Module):
    """A dual encoder with every base weight frozen and LoRA pairs injected."""

    def __init__(self, base: DualEncoder, pairs: "OrderedDict[tuple[str, int, str], LoraPair]"):
        self.base = base
        self.pairs = pairs

    @property
    def cfg(self):
        return self.base.cfg

    @property
    def visual(self):
        return self.base.visual

    @property
    def textual(self):
        return self.base.textual

    @property
    def logit_scale(self):
        return self.base.logit_scale

    @property
    def depth(self) -> int:
        return self.base.cfg.depth

    def forward(self, images, tokens) -> Tensor:
        return self.base(images, tokens)

    def set_dropout_rng(self, rng: np.random.Generator):
        for pair in self.pairs.values():
            pair.rng = rng

    # -- activation control ---------------------------------------------------

    def set_layer_active(self, encoder: str | None, layer_index: int, active: bool):
        """Toggle every pair of ``layer_index``; ``encoder=None`` means both towers."""
        encoders = ENCODERS if encoder is None else (encoder,)
        for enc in encoders:
            if enc not in ENCODERS:
                raise KeyError(f"unknown encoder {enc!r}")
        if not 0 <= layer_index < self.depth:
            raise IndexError(f"layer {layer_index} outside [0, {self.depth})")
        for (enc, layer, _), pair in self.pairs.items():
            if enc in encoders and layer == layer_index:
                pair.active = active

    def set_all_active(self, active: bool):
        for pair in self.pairs.values():
            pair.active = active

    def active_layers(self, encoder: str = "visual") -> list[int]:
        return sorted({layer for (enc, layer, _), p in self.pairs.items() if enc == encoder and p.active})

    # -- parameter views ------------------------------------------------------

    def named_lora_parameters(self, active_only: bool = False) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for (enc, layer, site), pair in self.pairs.items():
            if active_only and not pair.active:
                continue
            out[f"{enc}.{layer}.{site}.A"] = pair.W_A
            out[f"{enc}.{layer}.{site}.B"] = pair.W_B
        return out

    def lora_state(self, active_only: bool = False) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_lora_parameters(active_only).items())

    def load_lora_state(self, state: dict):
        params = self.named_lora_parameters()
        for name, arr in state.items():
            if name not in params:
                raise KeyError(f"unknown LoRA parameter {name!r}")
            if params[name].shape != np.shape(arr):
                raise ShapeError(f"{name}: expected {params[name].shape}, got {np.shape(arr)}")
            params[name].data[...] = arr

    def base_parameters(self) -> list[Parameter]:
        lora_ids = {id(p) for p in self.named_lora_parameters().values()}
        return [p for p in self.parameters() if id(p) not in lora_ids]


def _site_linear(block, site: str) -> Linear:
    attn = block.attn
    if not hasattr(attn, site):
        raise KeyError(f"unknown LoRA site {site!r}")
    return getattr(attn, site)


def inject(model: DualEncoder, rank: int = 1, dropout_p: float = 0.1,
           sites: Iterable[str] = DEFAULT_SITES, seed: int = 0, copy_model: bool = True) -> LoraModel:
    """Freeze ``model`` and attach a LoRA pair to each site of every block.

    All pairs start active. With ``copy_model`` the input is left untouched.
    """
    if rank < 1:
        raise ContractError(f"LoRA rank must be >= 1, got {rank}")
    base = copy.deepcopy(model) if copy_model else model
    base.requires_grad_(False)
    rng = np.random.default_rng(seed)
    pairs: OrderedDict = OrderedDict()
    for enc in ENCODERS:
        tower = base.encoder(enc)
        for layer, block in enumerate(tower.blocks):
            for site in sites:
                lin = _site_linear(block, site)
                if isinstance(lin, LoraLinear):
                    raise ContractError(f"{enc}.{layer}.{site} already carries a LoRA pair")
                pair = LoraPair(lin.out_features, lin.in_features, rank, dropout_p, layer, rng)
                setattr(block.attn, site, LoraLinear(lin, pair))
                pairs[(enc, layer, site)] = pair
    return LoraModel(base, pairs)


def set_layer_active(model: LoraModel, encoder: str | None, layer_index: int, active: bool):
    model.set_layer_active(encoder, layer_index, active)


def trainable_proportion(model: LoraModel) -> Fraction:
    """Active LoRA parameter count over all parameters (base + every pair)."""
    active = sum(p.size for p in model.named_lora_parameters(active_only=True).values())
    return Fraction(active, model.num_parameters())


def lora_parameter_count(cfg, rank: int, sites: Iterable[str] = DEFAULT_SITES) -> int:
    """Closed-form ``sum H (E + F)`` over every adapted site of both towers."""
    per_site = rank * (cfg.width + cfg.width)
    return 2 * cfg.depth * len(tuple(sites)) * per_site
