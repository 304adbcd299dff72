"""In-process federated training: FedMS stages, FT/LFFT baselines, attacks, accounting."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SyntheticDataset
from .encoder import DualEncoder, accuracy, class_logits
from .errors import ConfigError, ContractError
from .lora import LoraModel
from .mofm import MixtureModel, aggregate_gate_adapters, weighted_average
from .nn import Module
from .optim import Adam
from .sal import SalState, step as sal_step
from .tensor import Tensor

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
MB = 1_000_000
BANDWIDTHS_MB = (0.1, 1.0, 10.0)
METRIC_FIELDS = ("stage", "round", "client_id", "train_loss", "val_accuracy",
                 "active_lora_layers", "uploaded_bytes", "lambda_mean")


@dataclass
class RoundConfig:
    rounds_stage1: int = 25
    rounds_stage2: int = 25
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    sample_weighted: bool = False
    queue_len: int = 5
    threshold: float = 0.005
    gate_hidden_mult: int = 4
    seed: int = 0

    def adam(self, params) -> Adam:
        return Adam(params, lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, weight_decay=self.weight_decay)


@dataclass
class ClientState:
    client_id: int
    train: SyntheticDataset
    val: SyntheticDataset
    model: Module | None = None
    mixture: MixtureModel | None = None
    sal: SalState | None = None
    optimizer: Adam | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    malicious: bool = False
    global_train_feats: np.ndarray | None = None
    global_val_feats: np.ndarray | None = None


# -- accounting -----------------------------------------------------------------

@dataclass(frozen=True)
class PayloadRecord:
    stage: str
    round: int
    client_id: int
    direction: str   # "up" or "down"
    nbytes: int


class PayloadLedger:
    """Append-only log of transmitted bytes (4 bytes per float parameter)."""

    def __init__(self):
        self._records: list[PayloadRecord] = []

    def record(self, stage: str, rnd: int, client_id: int, direction: str, num_floats: int):
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        self._records.append(PayloadRecord(stage, rnd, client_id, direction, BYTES_PER_PARAM * num_floats))

    @property
    def records(self) -> tuple[PayloadRecord, ...]:
        return tuple(self._records)

    def rounds(self, stage: str | None = None) -> list[tuple[str, int]]:
        seen = OrderedDict()
        for r in self._records:
            if stage is None or r.stage == stage:
                seen[(r.stage, r.round)] = None
        return list(seen)

    def uploaded(self, stage: str | None = None, client_id: int | None = None) -> int:
        return sum(r.nbytes for r in self._records if r.direction == "up"
                   and (stage is None or r.stage == stage)
                   and (client_id is None or r.client_id == client_id))

    def round_bytes(self, stage: str, rnd: int) -> int:
        """Every client upload plus one copy of the broadcast."""
        ups = [r.nbytes for r in self._records if r.stage == stage and r.round == rnd and r.direction == "up"]
        downs = [r.nbytes for r in self._records if r.stage == stage and r.round == rnd and r.direction == "down"]
        return sum(ups) + (max(downs) if downs else 0)

    def total_bytes(self, stage: str | None = None) -> int:
        return sum(self.round_bytes(s, r) for s, r in self.rounds(stage))

    def to_rows(self) -> list[dict]:
        return [r.__dict__.copy() for r in self._records]


def comm_time(ledger: PayloadLedger, bandwidth: float, stage: str | None = None) -> tuple[list[float], float]:
    """Seconds per round and in total at ``bandwidth`` bytes/second."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    per_round = [ledger.round_bytes(s, r) / bandwidth for s, r in ledger.rounds(stage)]
    return per_round, ledger.total_bytes(stage) / bandwidth


class MetricsWriter:
    """CSV metrics stream; rows are flushed as soon as a round completes."""

    def __init__(self, path=None, append: bool = False):
        self.rows: list[dict] = []
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "a" if append else "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
            if not append:
                self._writer.writeheader()
                self._fh.flush()

    def write(self, **row):
        row = {k: _fmt(row.get(k, "")) for k in METRIC_FIELDS}
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def flush(self):
        if self._fh is not None:
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


# -- server -------------------------------------------------------------------------

@dataclass
class Server:
    """Holds the current global payload and the template model used for evaluation."""
    model: Module
    ledger: PayloadLedger = field(default_factory=PayloadLedger)
    metrics: MetricsWriter = field(default_factory=MetricsWriter)
    global_state: "OrderedDict[str, np.ndarray] | None" = None
    gate_state: "OrderedDict[str, np.ndarray] | None" = None
    history: dict = field(default_factory=dict)
    activation_events: list = field(default_factory=list)


def apply_backdoor(update, malicious: bool):
    """Reverse-weight attack: a malicious client negates its update delta."""
    if not malicious:
        return update
    if isinstance(update, dict):
        return OrderedDict((k, -np.asarray(v)) for k, v in update.items())
    return -np.asarray(update)


def client_upload(local: dict, broadcast: dict, malicious: bool) -> "OrderedDict[str, np.ndarray]":
    """Honest clients send their values; attackers send ``broadcast - delta``."""
    if not malicious:
        return OrderedDict((k, np.array(v)) for k, v in local.items())
    delta = OrderedDict((k, np.asarray(local[k], np.float64) - np.asarray(broadcast[k], np.float64))
                        for k in local)
    poisoned = apply_backdoor(delta, True)
    return OrderedDict((k, (np.asarray(broadcast[k], np.float64) + poisoned[k]).astype(np.asarray(local[k]).dtype))
                       for k in local)


def aggregate_uniform(uploads: Sequence[dict], sizes: Sequence[int] | None = None) -> "OrderedDict[str, np.ndarray]":
    """Mean of client uploads (1/N each), or sample-size weighted when ``sizes`` is given."""
    n = len(uploads)
    if sizes is None:
        weights = [1.0 / n] * n
    else:
        total = float(sum(sizes))
        weights = [s / total for s in sizes]
    return weighted_average(uploads, weights)


def state_hash(state: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()


# -- local training -------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _train_loop(loss_fn: Callable[[np.ndarray], Tensor], optimizer: Adam, n: int,
                config: RoundConfig, rng: np.random.Generator) -> float:
    losses = []
    for _ in range(config.local_epochs):
        for idx in _batches(n, config.batch_size, rng):
            loss = loss_fn(idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def evaluate_global(model, data: SyntheticDataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    model.eval()
    preds = []
    with T.no_grad():
        text = model.textual(data.class_prompts)
        for i in range(0, len(data), batch_size):
            logits = class_logits(model.visual(data.images[i:i + batch_size]), text, model.logit_scale)
            preds.append(logits.data.argmax(axis=1))
    return float((np.concatenate(preds) == data.labels).mean())


def evaluate_mixture(m: MixtureModel, data: SyntheticDataset, gfeat: np.ndarray | None = None) -> tuple[float, float]:
    """Accuracy and mean lambda of the mixture on ``data`` (eval mode)."""
    if len(data) == 0:
        return float("nan"), float("nan")
    m.eval()
    with T.no_grad():
        feats = Tensor(gfeat) if gfeat is not None else None
        logits, lam = m(data.images, data.class_prompts, global_features=feats)
    return accuracy(logits, data.labels), float(lam.data.mean())


# -- generic global-model rounds (stage 1 and baselines) ---------------------------------

PayloadFn = Callable[[Module], "OrderedDict[str, T.Tensor]"]


def _payload_values(params: dict) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, p.data.copy()) for k, p in params.items())


def _load_values(params: dict, values: dict):
    for k, v in values.items():
        params[k].data[...] = v


def _run_global_rounds(clients: Sequence[ClientState], server: Server, config: RoundConfig,
                       stage: str, rounds: int, payload_fn: PayloadFn, start_round: int = 0,
                       on_round_end: Callable[[int], None] | None = None):
    if not clients:
        raise ConfigError("federation needs at least one client")
    clients = sorted(clients, key=lambda c: c.client_id)
    if server.global_state is None:
        server.global_state = _payload_values(payload_fn(server.model))
    accs = server.history.setdefault(stage, [])

    def evaluate_round(rnd, losses, uploaded):
        _load_values(payload_fn(server.model), server.global_state)
        per_client = []
        for c, loss, up in zip(clients, losses, uploaded):
            acc = evaluate_global(server.model, c.val)
            per_client.append(acc)
            active = len(server.model.active_layers()) if isinstance(server.model, LoraModel) else ""
            server.metrics.write(stage=stage, round=rnd, client_id=c.client_id, train_loss=loss,
                                 val_accuracy=acc, active_lora_layers=active, uploaded_bytes=up)
        mean_acc = float(np.nanmean(per_client))
        server.metrics.write(stage=stage, round=rnd, client_id="server",
                             train_loss=float(np.nanmean(losses)) if rnd else "",
                             val_accuracy=mean_acc, uploaded_bytes=int(sum(uploaded)))
        server.metrics.flush()
        accs.append(per_client)
        return per_client

    if start_round == 0:
        evaluate_round(0, [float("nan")] * len(clients), [0] * len(clients))

    for rnd in range(start_round + 1, rounds + 1):
        broadcast = server.global_state
        nfloats = sum(v.size for v in broadcast.values())
        uploads, losses, sizes, up_bytes = [], [], [], []
        for c in clients:
            server.ledger.record(stage, rnd, c.client_id, "down", nfloats)
            params = payload_fn(c.model)
            _load_values(params, broadcast)
            c.model.train()

            def loss_fn(idx, c=c):
                logits = c.model(c.train.images[idx], c.train.class_prompts)
                return T.cross_entropy(logits, c.train.labels[idx])

            losses.append(_train_loop(loss_fn, c.optimizer, len(c.train), config, c.rng))
            upload = client_upload(_payload_values(params), broadcast, c.malicious)
            n_up = sum(v.size for v in upload.values())
            server.ledger.record(stage, rnd, c.client_id, "up", n_up)
            up_bytes.append(BYTES_PER_PARAM * n_up)
            uploads.append(upload)
            sizes.append(len(c.train))
        server.global_state = aggregate_uniform(uploads, sizes if config.sample_weighted else None)
        for c in clients:
            _load_values(payload_fn(c.model), server.global_state)
        evaluate_round(rnd, losses, up_bytes)
        if on_round_end is not None:
            on_round_end(rnd)
    _load_values(payload_fn(server.model), server.global_state)
    return server.model


def lora_payload(model: LoraModel):
    return model.named_lora_parameters(active_only=True)


def run_stage1(clients: Sequence[ClientState], server: Server, config: RoundConfig,
               start_round: int = 0, on_round_end=None) -> LoraModel:
    """Federated LoRA training with every layer active; returns the global expert."""
    if not clients:
        raise ConfigError("federation needs at least one client")
    for c in clients:
        if c.optimizer is None:
            c.optimizer = config.adam(list(c.model.named_lora_parameters().values()))
    return _run_global_rounds(clients, server, config, "stage1", config.rounds_stage1,
                              lora_payload, start_round, on_round_end)


# -- baselines ----------------------------------------------------------------------------

def baseline_trainable(model: DualEncoder, kind: str) -> "OrderedDict[str, T.Tensor]":
    """Names and tensors trained by a baseline: everything (FT) or the upper-half blocks (LFFT)."""
    kind = kind.upper()
    if kind == "FT":
        return OrderedDict(model.named_parameters())
    if kind == "LFFT":
        depth = model.cfg.depth
        upper = [f"{enc}.blocks.{i}." for enc in ("visual", "textual") for i in range(depth // 2, depth)]
        return OrderedDict((k, p) for k, p in model.named_parameters() if any(k.startswith(u) for u in upper))
    raise ConfigError(f"baseline kind must be FT or LFFT, got {kind!r}")


def prepare_baseline(model: DualEncoder, kind: str) -> DualEncoder:
    model.requires_grad_(False)
    for p in baseline_trainable(model, kind).values():
        p.requires_grad = True
    return model


def baseline_proportion(model: DualEncoder, kind: str):
    from fractions import Fraction
    return Fraction(sum(p.size for p in baseline_trainable(model, kind).values()), model.num_parameters())


def run_baseline(kind: str, clients: Sequence[ClientState], server: Server, config: RoundConfig,
                 rounds: int | None = None, start_round: int = 0, on_round_end=None) -> DualEncoder:
    """FT or LFFT federated fine-tuning of the base model for ``rounds`` rounds.

    Defaults to the combined FedMS budget (stage one plus stage two rounds).
    """
    kind = kind.upper()
    baseline_trainable(server.model, kind)
    prepare_baseline(server.model, kind)
    for c in clients:
        prepare_baseline(c.model, kind)
        if c.optimizer is None:
            c.optimizer = config.adam(list(baseline_trainable(c.model, kind).values()))
    rounds = config.rounds_stage1 + config.rounds_stage2 if rounds is None else rounds
    return _run_global_rounds(clients, server, config, kind.lower(), rounds,
                              lambda m: baseline_trainable(m, kind), start_round, on_round_end)


# -- stage two ------------------------------------------------------------------------------

def _global_features(m: MixtureModel, data: SyntheticDataset) -> np.ndarray:
    if len(data) == 0:
        return np.zeros((0, m.global_expert.cfg.feature_dim), dtype=T.default_dtype())
    return m.global_image_features(data.images).data


def init_stage2(clients: Sequence[ClientState], global_expert: LoraModel, server: Server, config: RoundConfig):
    """Give every client a fresh mixture, SAL state and optimizer; seed the shared gate."""
    if any(p.requires_grad for p in global_expert.parameters()):
        raise ContractError("global expert must be frozen before stage two")
    for c in sorted(clients, key=lambda c: c.client_id):
        c.mixture = MixtureModel.from_global(global_expert, seed=config.seed, hidden_mult=config.gate_hidden_mult)
        c.mixture.local_expert.set_dropout_rng(c.rng)
        c.sal = SalState.fresh(c.mixture.local_expert, config.queue_len, config.threshold)
        params = list(c.mixture.local_expert.named_lora_parameters().values()) + c.mixture.gate.adapter.parameters()
        c.optimizer = config.adam(params)
        c.global_train_feats = _global_features(c.mixture, c.train)
        c.global_val_feats = _global_features(c.mixture, c.val)
    if server.gate_state is None:
        server.gate_state = clients[0].mixture.gate.adapter.payload()


def run_stage2(clients: Sequence[ClientState], global_expert: LoraModel, server: Server, config: RoundConfig,
               start_round: int = 0, on_round_end=None) -> "OrderedDict[str, np.ndarray]":
    """Personalized rounds: local experts stay on-device, only gate adapters are aggregated."""
    if not clients:
        raise ConfigError("federation needs at least one client")
    if any(p.requires_grad for p in global_expert.parameters()):
        raise ContractError("global expert must be frozen before stage two")
    clients = sorted(clients, key=lambda c: c.client_id)
    if clients[0].mixture is None:
        init_stage2(clients, global_expert, server, config)
    accs = server.history.setdefault("stage2", [])
    stage = "stage2"

    if start_round == 0:
        per_client = []
        for c in clients:
            c.mixture.gate.adapter.load_payload(server.gate_state)
            acc, lam = evaluate_mixture(c.mixture, c.val, c.global_val_feats)
            per_client.append(acc)
            server.metrics.write(stage=stage, round=0, client_id=c.client_id, val_accuracy=acc,
                                 active_lora_layers=len(c.mixture.local_expert.active_layers()),
                                 uploaded_bytes=0, lambda_mean=lam)
        server.metrics.write(stage=stage, round=0, client_id="server",
                             val_accuracy=float(np.nanmean(per_client)), uploaded_bytes=0)
        server.metrics.flush()
        accs.append(per_client)

    for rnd in range(start_round + 1, config.rounds_stage2 + 1):
        broadcast = server.gate_state
        nfloats = sum(v.size for v in broadcast.values())
        uploads, losses, per_client, up_bytes, lams, layers = [], [], [], [], [], []
        for c in clients:
            server.ledger.record(stage, rnd, c.client_id, "down", nfloats)
            m = c.mixture
            m.gate.adapter.load_payload(broadcast)
            m.train()

            def loss_fn(idx, c=c, m=m):
                logits, _ = m(c.train.images[idx], c.train.class_prompts,
                              global_features=Tensor(c.global_train_feats[idx]))
                return T.cross_entropy(logits, c.train.labels[idx])

            loss = _train_loop(loss_fn, c.optimizer, len(c.train), config, c.rng) if len(c.train) > 1 else float("nan")
            acc, lam = evaluate_mixture(m, c.val, c.global_val_feats)
            if not math.isnan(acc):
                event = sal_step(c.sal, m.local_expert, acc)
                if event is not None:
                    server.activation_events.append((rnd, c.client_id, event.layer))
                    log.info("round %d client %d: activated LoRA layer %d (delta=%.4f)",
                             rnd, c.client_id, event.layer, event.delta)
            upload = client_upload(m.gate.adapter.payload(), broadcast, c.malicious)
            n_up = sum(v.size for v in upload.values())
            server.ledger.record(stage, rnd, c.client_id, "up", n_up)
            uploads.append(upload)
            losses.append(loss)
            per_client.append(acc)
            lams.append(lam)
            up_bytes.append(BYTES_PER_PARAM * n_up)
            layers.append(len(m.local_expert.active_layers()))
        # clients too small to train this round sent back the broadcast; leave them out
        trained = [i for i, l in enumerate(losses) if not math.isnan(l)]
        if trained:
            server.gate_state = aggregate_gate_adapters([uploads[i] for i in trained], [losses[i] for i in trained])
        for c, loss, acc, lam, up, nl in zip(clients, losses, per_client, lams, up_bytes, layers):
            server.metrics.write(stage=stage, round=rnd, client_id=c.client_id, train_loss=loss,
                                 val_accuracy=acc, active_lora_layers=nl, uploaded_bytes=up, lambda_mean=lam)
        server.metrics.write(stage=stage, round=rnd, client_id="server", train_loss=float(np.nanmean(losses)),
                             val_accuracy=float(np.nanmean(per_client)), active_lora_layers=float(np.mean(layers)),
                             uploaded_bytes=int(sum(up_bytes)), lambda_mean=float(np.nanmean(lams)))
        server.metrics.flush()
        accs.append(per_client)
        if on_round_end is not None:
            on_round_end(rnd)
    for c in clients:
        c.mixture.gate.adapter.load_payload(server.gate_state)
    return server.gate_state


def stage_accuracy(server: Server, stage: str, rnd: int = -1) -> float:
    return float(np.nanmean(server.history[stage][rnd]))


def make_clients(dataset: SyntheticDataset, parts: Sequence[np.ndarray], model_factory: Callable[[int], Module],
                 val_fraction: float = 0.2, seed: int = 0, malicious: Sequence[int] = ()) -> list[ClientState]:
    """Split each partition into train/val and attach a model replica per client."""
    from .data import train_val_split
    clients = []
    for cid, idx in enumerate(parts):
        rng = np.random.default_rng([seed, cid, 7])
        tr, va = train_val_split(dataset.labels, idx, val_fraction, rng)
        model = model_factory(cid)
        clients.append(ClientState(cid, dataset.subset(tr), dataset.subset(va), model=model,
                                   rng=np.random.default_rng([seed, cid]), malicious=cid in set(malicious)))
        if isinstance(model, LoraModel):
            model.set_dropout_rng(clients[-1].rng)
    return clients


def select_malicious(num_clients: int, attack_ratio: float, seed: int) -> list[int]:
    """``floor(ratio * N)`` client ids, drawn as a pure function of (seed, N, ratio)."""
    if not 0.0 <= attack_ratio <= 1.0:
        raise ConfigError(f"attack_ratio must lie in [0, 1], got {attack_ratio}")
    k = int(math.floor(attack_ratio * num_clients + 1e-9))
    rng = np.random.default_rng([seed, num_clients, 1234])
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))
