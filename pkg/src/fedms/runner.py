"""End-to-end experiment driver with per-round checkpoints and resumption."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .checkpoint import MODEL_PREFIX, Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Geometry, PartitionSpec, class_histograms, dirichlet_partition, generate
from .encoder import build_dual_encoder
from .errors import ConfigError
from .federation import (BANDWIDTHS_MB, MB, MetricsWriter, PayloadLedger, Server, baseline_proportion,
                         baseline_trainable, comm_time, init_stage2, make_clients, prepare_baseline,
                         run_baseline, run_stage1, run_stage2, select_malicious)
from .lora import inject, trainable_proportion
from .sal import ActivationEvent, CapabilityQueue, SalState

log = logging.getLogger(__name__)


def build_dataset(cfg: ExperimentConfig):
    d, m = cfg.data, cfg.model
    return generate(d.num_classes, d.per_class, Geometry(m.image_size, m.image_size, m.channels), seed=d.seed,
                    signal=d.signal, noise=d.noise, vocab_size=m.vocab_size, max_tokens=m.max_tokens)


def build_partition(cfg: ExperimentConfig, dataset=None):
    dataset = dataset if dataset is not None else build_dataset(cfg)
    spec = PartitionSpec(cfg.federation.num_clients, cfg.data.alpha, cfg.data.seed)
    return dataset, dirichlet_partition(dataset, spec, cfg.data.num_classes)


def partition_report(cfg: ExperimentConfig) -> str:
    """Per-client class histogram table."""
    ds, parts = build_partition(cfg)
    hist = class_histograms(ds.labels, parts, ds.num_classes)
    head = ["client"] + [f"c{k}" for k in range(ds.num_classes)] + ["total", "top_share"]
    rows = [head]
    for cid, h in enumerate(hist):
        rows.append([str(cid)] + [str(v) for v in h] + [str(h.sum()), f"{h.max() / max(h.sum(), 1):.2f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _sal_to_json(s: SalState) -> dict:
    return {"queue": list(s.queue), "max_len": s.queue.max_len, "threshold": s.threshold,
            "next_layer": s.next_layer, "exhausted": s.exhausted,
            "history": [[e.layer, e.delta] for e in s.history]}


def _sal_from_json(d: dict) -> SalState:
    return SalState(CapabilityQueue(d["max_len"], d["queue"]), d["threshold"], d["next_layer"],
                    d["exhausted"], [ActivationEvent(l, dl) for l, dl in d["history"]])


class Experiment:
    """Owns data, clients, server and artifacts for one configured run."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg.validate()
        self.out_dir = Path(out_dir if out_dir is not None else cfg.output.dir)
        self.mode = cfg.federation.mode
        self.rc = cfg.round_config()
        self.dataset, self.parts = build_partition(cfg)
        self.base = build_dual_encoder(cfg.model, cfg.run.seed)
        self.malicious = select_malicious(cfg.federation.num_clients, cfg.federation.attack_ratio, cfg.run.seed)
        if self.mode == "fedms":
            self.phases = ["stage1", "stage2"]
            factory = lambda cid: self._inject()
            server_model = self._inject()
        else:
            rounds = cfg.federation.baseline_rounds
            self.baseline_rounds = self.rc.rounds_stage1 + self.rc.rounds_stage2 if rounds < 0 else rounds
            self.phases = [self.mode]
            factory = lambda cid: copy.deepcopy(self.base)
            server_model = copy.deepcopy(self.base)
        self.clients = make_clients(self.dataset, self.parts, factory, cfg.data.val_fraction,
                                    cfg.run.seed, self.malicious)
        self.server = Server(server_model)
        self.global_expert = None
        self.phase = self.phases[0]
        self.round = 0

    def _inject(self):
        lo = self.cfg.lora
        return inject(self.base, lo.rank, lo.dropout, lo.sites, seed=self.cfg.run.seed)

    # -- paths ----------------------------------------------------------------

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / self.cfg.output.metrics

    @property
    def summary_path(self) -> Path:
        return self.out_dir / self.cfg.output.summary

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / self.cfg.output.checkpoint

    # -- checkpointing --------------------------------------------------------

    def snapshot(self) -> Checkpoint:
        s = self.server
        header = {
            "config": self.cfg.to_dict(), "phase": self.phase, "round": self.round,
            "history": s.history, "activation_events": s.activation_events,
            "ledger": [[r.stage, r.round, r.client_id, r.direction, r.nbytes] for r in s.ledger.records],
            "metrics_csv": s.metrics.to_csv(), "malicious": self.malicious,
            "clients": {},
        }
        arrays = OrderedDict((MODEL_PREFIX + k, v) for k, v in s.model.state_dict().items())
        for k, v in (s.global_state or {}).items():
            arrays[f"server/global/{k}"] = v
        for k, v in (s.gate_state or {}).items():
            arrays[f"server/gate/{k}"] = v
        for c in self.clients:
            info = {"rng": c.rng.bit_generator.state}
            for k, v in (c.optimizer.state_arrays() if c.optimizer else {}).items():
                arrays[f"client{c.client_id}/opt/{k}"] = v
            if self.phase == "stage2" and c.mixture is not None:
                local = c.mixture.local_expert
                info["sal"] = _sal_to_json(c.sal)
                info["active"] = [[e, l, site] for (e, l, site), p in local.pairs.items() if p.active]
                for k, v in local.lora_state().items():
                    arrays[f"client{c.client_id}/local/{k}"] = v
            header["clients"][str(c.client_id)] = info
        return Checkpoint(header, arrays)

    def save(self):
        save_checkpoint(self.checkpoint_path, self.snapshot())

    def restore(self, ckpt: Checkpoint):
        ckpt.check_model(self.cfg.model.to_dict())
        h = ckpt.header
        if h["config"]["federation"]["mode"] != self.mode:
            raise ConfigError(f"checkpoint was written by mode {h['config']['federation']['mode']!r}")
        s = self.server
        self.phase, self.round = h["phase"], int(h["round"])
        s.history = h["history"]
        s.activation_events = [tuple(e) for e in h["activation_events"]]
        s.ledger = PayloadLedger()
        for stage, rnd, cid, direction, nbytes in h["ledger"]:
            s.ledger.record(stage, rnd, cid, direction, nbytes // 4)
        s.model.load_state_dict(ckpt.section(MODEL_PREFIX))
        s.global_state = ckpt.section("server/global/") or None
        s.gate_state = ckpt.section("server/gate/") or None
        if self.phase == "stage2":
            self.global_expert = s.model
            self.global_expert.requires_grad_(False)
            init_stage2(self.clients, self.global_expert, s, self.rc)
        for c in self.clients:
            info = h["clients"][str(c.client_id)]
            c.rng.bit_generator.state = info["rng"]
            if self.phase == "stage2":
                local = c.mixture.local_expert
                local.set_all_active(False)
                for e, l, site in info["active"]:
                    local.pairs[(e, l, site)].active = True
                local.load_lora_state(ckpt.section(f"client{c.client_id}/local/"))
                c.sal = _sal_from_json(info["sal"])
            elif s.global_state is not None and self.mode == "fedms":
                c.model.load_lora_state(s.global_state)
            opt = ckpt.section(f"client{c.client_id}/opt/")
            if opt:
                if c.optimizer is None:
                    self._make_optimizer(c)
                c.optimizer.load_state_arrays(opt)
        if self.mode != "fedms" and s.global_state is not None:
            for c in self.clients:
                prepare_baseline(c.model, self.mode)
                for k, p in baseline_trainable(c.model, self.mode).items():
                    p.data[...] = s.global_state[k]

    def _make_optimizer(self, c):
        if self.mode == "fedms":
            c.optimizer = self.rc.adam(list(c.model.named_lora_parameters().values()))
        else:
            prepare_baseline(c.model, self.mode)
            c.optimizer = self.rc.adam(list(baseline_trainable(c.model, self.mode).values()))

    # -- execution ------------------------------------------------------------

    def _on_round_end(self, rnd: int):
        self.round = rnd
        every = self.cfg.output.checkpoint_every
        if every and rnd % every == 0:
            self.save()

    def run(self, resume: bool = False, stop_after: tuple[str, int] | None = None) -> dict:
        """Execute every phase; ``stop_after=(phase, round)`` simulates an interruption."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        start = time.time()
        resumed = False
        if resume and self.checkpoint_path.exists():
            ckpt = load_checkpoint(self.checkpoint_path)
            self.restore(ckpt)
            self.metrics_path.write_text(ckpt.header["metrics_csv"])
            metrics = MetricsWriter(self.metrics_path, append=True)
            metrics.rows = list(csv.DictReader(io.StringIO(ckpt.header["metrics_csv"])))
            resumed = True
            log.info("resumed from %s at %s round %d", self.checkpoint_path, self.phase, self.round)
        else:
            metrics = MetricsWriter(self.metrics_path)
        self.server.metrics = metrics
        self._write_summary({"complete": False})
        try:
            for phase in self.phases[self.phases.index(self.phase):]:
                if phase != self.phase:
                    self.phase, self.round = phase, 0
                start_round = self.round if resumed else 0
                resumed = False
                self._run_phase(phase, start_round, stop_after)
        except _Interrupted:
            metrics.close()
            return self._write_summary({"complete": False, "stopped_at": [self.phase, self.round]})
        metrics.close()
        summary = self.summary()
        summary["wall_seconds"] = round(time.time() - start, 3)
        return self._write_summary(summary)

    def _run_phase(self, phase, start_round, stop_after):
        def hook(rnd):
            self._on_round_end(rnd)
            if stop_after is not None and (phase, rnd) == tuple(stop_after):
                raise _Interrupted()

        s = self.server
        if phase == "stage1":
            run_stage1(self.clients, s, self.rc, start_round, hook)
            self.global_expert = s.model
            self.global_expert.requires_grad_(False)
        elif phase == "stage2":
            if self.global_expert is None:
                self.global_expert = s.model
                self.global_expert.requires_grad_(False)
            run_stage2(self.clients, self.global_expert, s, self.rc, start_round, hook)
        else:
            run_baseline(phase, self.clients, s, self.rc, self.baseline_rounds, start_round, hook)

    # -- reporting ------------------------------------------------------------

    def summary(self) -> dict:
        s = self.server
        ledger = s.ledger
        out = {"complete": True, "mode": self.mode, "seed": self.cfg.run.seed,
               "num_clients": self.cfg.federation.num_clients,
               "malicious_clients": self.malicious, "stages": {}}
        for stage, rounds in s.history.items():
            final = rounds[-1]
            out["stages"][stage] = {
                "rounds": len(rounds) - 1,
                "per_client_accuracy": [None if np.isnan(a) else round(float(a), 6) for a in final],
                "mean_accuracy": round(float(np.nanmean(final)), 6),
                "uploaded_bytes": ledger.uploaded(stage),
                "transmitted_bytes": ledger.total_bytes(stage),
            }
        out["payload_total_bytes"] = ledger.total_bytes()
        out["comm_time_seconds"] = {f"{bw:g}MB/s": comm_time(ledger, bw * MB)[1] for bw in BANDWIDTHS_MB}
        if self.mode == "fedms":
            out["trainable_proportion_stage1"] = float(trainable_proportion(self._inject()))
            out["activation_events"] = [list(e) for e in s.activation_events]
        else:
            out["trainable_proportion"] = float(baseline_proportion(self.base, self.mode))
        return out

    def _write_summary(self, summary: dict) -> dict:
        tmp = self.summary_path.with_name(self.summary_path.name + ".tmp")
        tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.summary_path)
        return summary


class _Interrupted(Exception):
    pass


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool | None = None) -> dict:
    resume = cfg.run.resume if resume is None else resume
    return Experiment(cfg, out_dir).run(resume=resume)


def summarize_metrics(path) -> str:
    """Per-stage table of server rows: round, mean loss, mean accuracy, bytes."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("client_id") == "server"]
    if not rows:
        return "no server rows"
    lines = [f"{'stage':<8} {'round':>5} {'train_loss':>10} {'val_acc':>8} {'active':>6} {'bytes':>10} {'lambda':>7}"]
    for r in rows:
        lines.append(f"{r['stage']:<8} {r['round']:>5} {r['train_loss'] or '-':>10} {r['val_accuracy']:>8} "
                     f"{r['active_lora_layers'] or '-':>6} {r['uploaded_bytes']:>10} {r['lambda_mean'] or '-':>7}")
    by_stage = OrderedDict()
    for r in rows:
        by_stage[r["stage"]] = r
    lines.append("")
    for stage, r in by_stage.items():
        total = sum(int(x["uploaded_bytes"] or 0) for x in rows if x["stage"] == stage)
        lines.append(f"{stage}: final mean accuracy {r['val_accuracy']} after round {r['round']}, "
                     f"uploaded {total} bytes")
    return "\n".join(lines)
