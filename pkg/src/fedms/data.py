"""Synthetic image/prompt classification data and Dirichlet client partitions."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IntegrityError

MAX_PARTITION_RETRIES = 100
# noise std for unit-RMS class patterns; the desk dual encoder still clears 85%
# centralized accuracy within 200 steps at this level
DEFAULT_NOISE = 1.5


@dataclass(frozen=True)
class Geometry:
    height: int = 16
    width: int = 16
    channels: int = 3


@dataclass
class SyntheticDataset:
    images: np.ndarray          # [N, H, W, C] float32
    labels: np.ndarray          # [N] int64
    class_prompts: np.ndarray   # [K, L] int64
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_prompts)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "SyntheticDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(self.images[idx], self.labels[idx], self.class_prompts, self.seed, dict(self.meta))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")


def _upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a [g, g, C] grid to [height, width, C]."""
    gh, gw, _ = grid.shape
    ys = np.linspace(0, gh - 1, height)
    xs = np.linspace(0, gw - 1, width)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2) if gh > 1 else np.zeros(height, int)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2) if gw > 1 else np.zeros(width, int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def make_concepts(num_classes: int, geometry: Geometry, vocab_size: int, max_tokens: int,
                  seed: int, grid: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Per-class low-frequency patterns (unit RMS) and distinct prompt token sequences."""
    rng = np.random.default_rng(seed)
    patterns = np.empty((num_classes, geometry.height, geometry.width, geometry.channels))
    for k in range(num_classes):
        pat = _upsample(rng.normal(size=(grid, grid, geometry.channels)), geometry.height, geometry.width)
        pat -= pat.mean()
        patterns[k] = pat / np.sqrt((pat ** 2).mean())
    prompts: list[tuple] = []
    seen = set()
    while len(prompts) < num_classes:
        seq = tuple(int(t) for t in rng.integers(0, vocab_size, max_tokens))
        if seq not in seen:
            seen.add(seq)
            prompts.append(seq)
    return patterns.astype(np.float32), np.array(prompts, dtype=np.int64)


def generate(num_classes: int, per_class: int, geometry: Geometry | None = None, seed: int = 0,
             signal: float = 1.0, noise: float = DEFAULT_NOISE, vocab_size: int = 64, max_tokens: int = 8,
             concept_seed: int | None = None) -> SyntheticDataset:
    """Balanced K-class dataset: class pattern times ``signal`` plus Gaussian noise.

    ``concept_seed`` fixes the class patterns and prompts independently of the
    per-sample noise (defaults to ``seed``).
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    geometry = geometry or Geometry()
    cseed = seed if concept_seed is None else concept_seed
    patterns, prompts = make_concepts(num_classes, geometry, vocab_size, max_tokens, cseed)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = signal * patterns[labels] + noise * rng.normal(
        size=(len(labels), geometry.height, geometry.width, geometry.channels))
    meta = {"num_classes": num_classes, "per_class": per_class, "signal": signal,
            "noise": noise, "concept_seed": cseed}
    return SyntheticDataset(images.astype(np.float32), labels, prompts, seed, meta)


def dirichlet_partition(labels, spec: PartitionSpec, num_classes: int | None = None) -> list[np.ndarray]:
    """Split sample indices across clients with per-class Dirichlet(alpha) proportions.

    A class whose draw would leave some client with no samples at all is redrawn,
    up to ``MAX_PARTITION_RETRIES`` times.
    """
    labels = np.asarray(labels.labels if isinstance(labels, SyntheticDataset) else labels)
    n = spec.num_clients
    if len(labels) < n:
        raise ContractError(f"{len(labels)} samples cannot cover {n} clients")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(spec.seed)
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(k)]
    for _ in range(MAX_PARTITION_RETRIES):
        shards: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in by_class:
            props = rng.dirichlet(np.full(n, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        parts = [np.sort(np.concatenate(s)) for s in shards]
        if all(len(p) > 0 for p in parts):
            return parts
    raise ContractError(f"could not give every client a sample after {MAX_PARTITION_RETRIES} draws "
                        f"(alpha={spec.alpha}, clients={n})")


def train_val_split(labels, indices, val_fraction: float, rng: np.random.Generator):
    """Stratified split of ``indices``; classes with a single sample stay in train."""
    labels = np.asarray(labels)
    indices = np.asarray(indices)
    train, val = [], []
    for c in np.unique(labels[indices]):
        idx = rng.permutation(indices[labels[indices] == c])
        n_val = int(round(val_fraction * len(idx)))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    train = np.sort(np.concatenate(train)) if train else np.array([], dtype=np.int64)
    val = np.sort(np.concatenate(val)) if val else np.array([], dtype=np.int64)
    return train, val


def class_histograms(labels, parts, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[p], minlength=num_classes) for p in parts])


# -- export ---------------------------------------------------------------------

_MAGIC = b"FMSDATA1"


def export_dataset(ds: SyntheticDataset, path, partition: PartitionSpec | None = None):
    """Write ``<path>`` (shape-prefixed arrays) and ``<path>.manifest.json``."""
    path = Path(path)
    arrays = [("images", ds.images.astype("<f4")), ("labels", ds.labels.astype("<f4")),
              ("class_prompts", ds.class_prompts.astype("<f4"))]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    manifest = {"seed": ds.seed, "num_samples": len(ds), "class_counts": ds.class_counts().tolist(),
                **ds.meta}
    if partition is not None:
        manifest.update(alpha=partition.alpha, num_clients=partition.num_clients,
                        partition_seed=partition.seed)
    Path(f"{path}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(_MAGIC):
        raise IntegrityError(f"{path}: not a dataset container")
    pos = len(_MAGIC)
    out = {}
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(blob):
                raise IntegrityError(f"{path}: array {name!r} truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
    except struct.error as exc:
        raise IntegrityError(f"{path}: truncated header") from exc
    manifest_path = Path(f"{path}.manifest.json")
    meta = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return SyntheticDataset(out["images"].astype(np.float32), out["labels"].astype(np.int64),
                            out["class_prompts"].astype(np.int64), int(meta.get("seed", 0)), meta)
