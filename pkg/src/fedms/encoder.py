"""A toy CLIP-style dual encoder: ViT image tower, transformer text tower."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .nn import LayerNorm, Linear, Module, Parameter, TransformerBlock
from .tensor import Tensor

CLIP_TEMPERATURE = 0.07


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    vocab_size: int = 64
    max_tokens: int = 8
    feature_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"model.depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ConfigError(f"model.width {self.width} not divisible by model.heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"model.image_size {self.image_size} not divisible by "
                              f"model.patch_size {self.patch_size}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, (H/p)(W/p), p*p*C], patches in row-major order."""
    if images.ndim != 4:
        raise ShapeError(f"images must be [B, H, W, C], got {images.shape}")
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = Linear(p * p * cfg.channels, cfg.width, rng)
        self.cls = Parameter(rng.normal(0.0, 0.02, (1, 1, cfg.width)))
        self.pos = Parameter(rng.normal(0.0, 0.02, (cfg.num_patches + 1, cfg.width)))
        self.blocks = [TransformerBlock(cfg.width, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.ln_post = LayerNorm(cfg.width)
        self.proj = Linear(cfg.width, cfg.feature_dim, rng, bias=False)

    def features(self, images) -> Tensor:
        """Pre-normalization image embedding [B, feature_dim]."""
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ShapeError(f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], "
                             f"got {images.shape}")
        x = self.patch_embed(Tensor(patchify(images, cfg.patch_size)))
        b = x.shape[0]
        cls = self.cls + Tensor.zeros((b, 1, cfg.width))
        x = T.concat([cls, x], axis=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.ln_post(x[:, 0, :]))

    def forward(self, images) -> Tensor:
        return T.l2_normalize(self.features(images), axis=-1)


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embed = Parameter(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.width)))
        self.pos = Parameter(rng.normal(0.0, 0.02, (cfg.max_tokens, cfg.width)))
        self.blocks = [TransformerBlock(cfg.width, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(cfg.width)
        self.proj = Linear(cfg.width, cfg.feature_dim, rng, bias=False)

    def features(self, tokens) -> Tensor:
        cfg = self.cfg
        try:
            ids = np.asarray(tokens, dtype=np.int64)
        except ValueError as exc:
            raise InputError("token sequences must all have the same length") from exc
        if ids.ndim != 2:
            raise InputError(f"tokens must be [K, L], got shape {ids.shape}")
        if ids.shape[1] > cfg.max_tokens:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_tokens {cfg.max_tokens}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
        x = self.token_embed[ids] + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.ln_final(x).mean(axis=1))

    def forward(self, tokens) -> Tensor:
        return T.l2_normalize(self.features(tokens), axis=-1)


class DualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.visual = VisualEncoder(cfg, rng)
        self.textual = TextEncoder(cfg, rng)
        self.logit_scale = Parameter(np.array(math.log(1.0 / CLIP_TEMPERATURE)), requires_grad=False)

    def encoder(self, name: str) -> Module:
        if name == "visual":
            return self.visual
        if name == "textual":
            return self.textual
        raise KeyError(f"unknown encoder {name!r}")

    def forward(self, images, tokens) -> Tensor:
        return class_logits(self.visual(images), self.textual(tokens), self.logit_scale)


def build_dual_encoder(cfg: EncoderConfig | None = None, seed: int = 0) -> DualEncoder:
    return DualEncoder(cfg or EncoderConfig(), np.random.default_rng(seed))


def encode_image(model: DualEncoder, images) -> Tensor:
    return model.visual(images)


def encode_text(model: DualEncoder, tokens) -> Tensor:
    return model.textual(tokens)


def class_logits(image_features: Tensor, text_features: Tensor, logit_scale) -> Tensor:
    """``exp(logit_scale) * <V_b, T_k>`` for every image b and class k."""
    if image_features.shape[-1] != text_features.shape[-1]:
        raise ShapeError(f"feature dims differ: {image_features.shape} vs {text_features.shape}")
    if not isinstance(logit_scale, Tensor):
        logit_scale = Tensor(logit_scale)
    return (image_features @ text_features.T) * logit_scale.exp()


def accuracy(logits: Tensor | np.ndarray, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float((data.argmax(axis=1) == labels).mean())
