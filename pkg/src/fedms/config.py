"""Experiment configuration: sectioned INI files with environment overrides.

Every key has a default. ``FEDMS_<SECTION>_<KEY>`` in the environment overrides
the file value, e.g. ``FEDMS_FEDERATION_NUM_CLIENTS=4``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DEFAULT_NOISE
from .encoder import EncoderConfig
from .errors import ConfigError
from .federation import RoundConfig

ENV_PREFIX = "FEDMS_"
MODES = ("fedms", "ft", "lfft")


@dataclass
class LoraConfig:
    rank: int = 1
    dropout: float = 0.1
    weight_decay: float = 0.05
    sites: tuple = ("q", "v")


@dataclass
class SalConfig:
    queue_len: int = 5
    threshold: float = 0.005


@dataclass
class FederationConfig:
    mode: str = "fedms"
    num_clients: int = 10
    rounds_stage1: int = 25
    rounds_stage2: int = 25
    baseline_rounds: int = -1       # -1: stage one plus stage two rounds
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    attack_ratio: float = 0.0
    sample_weighted: bool = False
    gate_hidden_mult: int = 4


@dataclass
class DataConfig:
    num_classes: int = 10
    per_class: int = 100
    alpha: float = 0.1
    seed: int = 0
    signal: float = 1.0
    noise: float = DEFAULT_NOISE
    val_fraction: float = 0.2


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    metrics: str = "metrics.csv"
    summary: str = "summary.json"
    checkpoint: str = "checkpoint.fmsk"
    checkpoint_every: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    resume: bool = False


@dataclass
class ExperimentConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    sal: SalConfig = field(default_factory=SalConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("model", "lora", "sal", "federation", "data", "output", "run")

    def validate(self) -> "ExperimentConfig":
        f, d, lo, s = self.federation, self.data, self.lora, self.sal
        checks = [
            ("lora.rank", lo.rank >= 1, "must be >= 1"),
            ("lora.rank", lo.rank <= self.model.width, f"must be <= model width {self.model.width}"),
            ("lora.dropout", 0.0 <= lo.dropout < 1.0, "must lie in [0, 1)"),
            ("lora.weight_decay", lo.weight_decay >= 0, "must be >= 0"),
            ("lora.sites", bool(lo.sites) and set(lo.sites) <= {"q", "k", "v", "out"},
             "must be a non-empty subset of q, k, v, out"),
            ("sal.queue_len", s.queue_len >= 1, "must be >= 1"),
            ("sal.threshold", s.threshold == s.threshold, "must be a number"),
            ("federation.mode", f.mode in MODES, f"must be one of {', '.join(MODES)}"),
            ("federation.num_clients", f.num_clients >= 1, "must be >= 1"),
            ("federation.rounds_stage1", f.rounds_stage1 >= 0, "must be >= 0"),
            ("federation.rounds_stage2", f.rounds_stage2 >= 0, "must be >= 0"),
            ("federation.baseline_rounds", f.baseline_rounds >= -1, "must be >= 0 (or -1)"),
            ("federation.local_epochs", f.local_epochs >= 1, "must be >= 1"),
            ("federation.batch_size", f.batch_size >= 2, "must be >= 2"),
            ("federation.learning_rate", f.learning_rate > 0, "must be > 0"),
            ("federation.attack_ratio", 0.0 <= f.attack_ratio <= 1.0, "must lie in [0, 1]"),
            ("federation.gate_hidden_mult", f.gate_hidden_mult >= 1, "must be >= 1"),
            ("data.num_classes", d.num_classes >= 2, "must be >= 2"),
            ("data.per_class", d.per_class >= 1, "must be >= 1"),
            ("data.per_class", d.num_classes * d.per_class >= f.num_clients,
             "too few samples for the number of clients"),
            ("data.alpha", d.alpha > 0, "must be > 0"),
            ("data.noise", d.noise >= 0, "must be >= 0"),
            ("data.val_fraction", 0.0 <= d.val_fraction < 1.0, "must lie in [0, 1)"),
            ("output.checkpoint_every", self.output.checkpoint_every >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg}")
        return self

    def round_config(self) -> RoundConfig:
        f = self.federation
        return RoundConfig(rounds_stage1=f.rounds_stage1, rounds_stage2=f.rounds_stage2,
                           local_epochs=f.local_epochs, batch_size=f.batch_size,
                           learning_rate=f.learning_rate, weight_decay=self.lora.weight_decay,
                           beta1=f.beta1, beta2=f.beta2, eps=f.eps, sample_weighted=f.sample_weighted,
                           queue_len=self.sal.queue_len, threshold=self.sal.threshold,
                           gate_hidden_mult=f.gate_hidden_mult, seed=self.run.seed)

    def to_dict(self) -> dict:
        out = {}
        for sec in self.SECTIONS:
            out[sec] = {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in dataclasses.asdict(getattr(self, sec)).items()}
        return out

    def to_ini(self) -> str:
        lines = []
        for sec, values in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in values.items():
                v = ",".join(v) if isinstance(v, list) else str(v).lower() if isinstance(v, bool) else v
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        parts = {}
        for sec in cls.SECTIONS:
            current = getattr(cfg, sec)
            values = dict(raw.get(sec, {}))
            kinds = {f.name: type(getattr(current, f.name)) for f in fields(current)}
            unknown = set(values) - set(kinds)
            if unknown:
                raise ConfigError(f"{sec}.{sorted(unknown)[0]} is not a known key")
            kw = {k: _coerce(f"{sec}.{k}", v, kinds[k]) for k, v in values.items()}
            try:
                parts[sec] = dataclasses.replace(current, **kw)
            except ValueError as exc:
                raise ConfigError(f"{sec}: {exc}") from exc
        unknown = set(raw) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
        return cls(**parts).validate()


def _coerce(name: str, value, kind):
    if not isinstance(value, str):
        if kind is tuple and isinstance(value, (list, tuple)):
            return tuple(value)
        return value
    text = value.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(s.strip() for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {kind.__name__}") from None
    return text


def load_config(path=None, env: dict | None = None) -> ExperimentConfig:
    """Read an INI file (optional), apply ``FEDMS_*`` overrides, validate."""
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raw = {sec: dict(parser[sec]) for sec in parser.sections()}
    env = os.environ if env is None else env
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        sec, _, name = rest.partition("_")
        if sec not in ExperimentConfig.SECTIONS or not name:
            raise ConfigError(f"environment override {key} does not name a [section] key")
        raw.setdefault(sec, {})[name] = value
    return ExperimentConfig.from_dict(raw)
