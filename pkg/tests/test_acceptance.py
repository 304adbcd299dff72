"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end checks use the desk configuration below (random frozen base, no
pretraining); they take several minutes in total.
"""

import copy
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from fedms import federation
from fedms import tensor as T
from fedms.data import PartitionSpec, class_histograms, dirichlet_partition, generate
from fedms.encoder import EncoderConfig, build_dual_encoder
from fedms.federation import (BANDWIDTHS_MB, MB, PayloadLedger, RoundConfig, Server, aggregate_uniform,
                              baseline_proportion, baseline_trainable, comm_time, make_clients, run_baseline,
                              run_stage1, run_stage2, select_malicious, stage_accuracy, state_hash)
from fedms.lora import inject, lora_parameter_count, trainable_proportion
from fedms.mofm import MixtureModel, aggregate_gate_adapters, mixture_logits
from fedms.sal import SalState, incremental_factor, prepare_stage2, step
from fedms.tensor import Tensor

from conftest import numeric_grad, rel_error

RESULTS: list[str] = []

SEEDS = range(5)
DESK = dict(num_classes=10, per_class=50, num_clients=10, alpha=0.1, noise=1.5)
DESK_ROUNDS = RoundConfig(rounds_stage1=10, rounds_stage2=10, local_epochs=2, batch_size=16, learning_rate=3e-3)


def report(name: str, ok: bool, detail: str, elapsed: float | None = None):
    timing = f", {elapsed:.1f} s" if elapsed is not None else ""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{timing}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def desk_setup(seed: int, attack_ratio: float = 0.0, lora: bool = True):
    ds = generate(DESK["num_classes"], DESK["per_class"], seed=seed, noise=DESK["noise"])
    parts = dirichlet_partition(ds, PartitionSpec(DESK["num_clients"], DESK["alpha"], seed))
    base = build_dual_encoder(EncoderConfig(), seed)
    mal = select_malicious(DESK["num_clients"], attack_ratio, seed)
    make = (lambda c: inject(base, seed=seed)) if lora else (lambda c: copy.deepcopy(base))
    clients = make_clients(ds, parts, make, seed=seed, malicious=mal)
    server = Server(inject(base, seed=seed) if lora else copy.deepcopy(base))
    return clients, server, base


def rc_for(seed: int, **kw) -> RoundConfig:
    return RoundConfig(**{**DESK_ROUNDS.__dict__, "seed": seed, **kw})


# -- zero-init transparency ------------------------------------------------------------

def test_zero_init_transparency():
    t0 = time.time()
    base = build_dual_encoder(EncoderConfig(), 3)
    rng = np.random.default_rng(0)
    x, tok = rng.normal(size=(8, 16, 16, 3)), rng.integers(0, 64, (10, 8))
    base.eval()
    with T.no_grad():
        ref = base(x, tok).data
        lm = inject(base, seed=1)
        lm.eval()
        out = lm(x, tok).data
    dev = float(np.abs(out - ref).max())
    el = time.time() - t0
    report("zero-init transparency", dev == 0.0 and el < 1.0, f"max abs deviation {dev}", el)


# -- gradient correctness --------------------------------------------------------------

def _graphs(rng):
    """Small scalar graphs; each returns (build, arrays)."""
    yield lambda a, b: ((a @ b).tanh() ** 2).sum(), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    yield lambda a: T.log_softmax(a * 1.5, axis=-1)[:, 1].sum(), [rng.normal(size=(4, 5))]
    yield lambda a: (T.layer_norm(a) * a).sum(), [rng.normal(size=(2, 6))]
    yield lambda a: T.gelu(a).mean(), [rng.normal(size=(3, 3))]
    yield lambda a: (T.l2_normalize(a) ** 3).sum(), [rng.normal(size=(3, 4))]
    yield lambda a: T.cross_entropy(a, [0, 2, 1]), [rng.normal(size=(3, 3))]
    yield lambda a, b: ((a @ b.swapaxes(-1, -2)) ** 2).mean(), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]
    yield lambda a: (a.exp() / (a * a + 1.0)).sum(), [rng.normal(size=(5,))]
    yield lambda a: (T.softmax(a, axis=0) * a).sum(), [rng.normal(size=(4, 2))]
    yield lambda a: (T.concat([a[1:], a[:1] * 2.0], axis=0).reshape(-1) ** 2).sum(), [rng.normal(size=(3, 2))]


def test_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst, count = 0.0, 0
    with T.precision(np.float64):
        for build, arrays in _graphs(rng):
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            build(*ts).backward()
            for t in ts:
                num = numeric_grad(lambda: build(*[Tensor(s.data) for s in ts]).item(), t.data)
                worst = max(worst, rel_error(t.grad, num))
            count += 1
        # full transformer block with an active LoRA pair on q and v
        cfg = EncoderConfig(depth=1, width=8, heads=2, feature_dim=4, vocab_size=8, max_tokens=2, patch_size=8)
        lm = inject(build_dual_encoder(cfg, 0), dropout_p=0.0, seed=0)
        for p in lm.named_lora_parameters().values():
            p.data[...] = rng.normal(0, 0.3, p.shape)
        block = lm.visual.blocks[0]
        x = rng.normal(size=(2, 3, 8))
        target = Tensor(rng.normal(size=(2, 3, 8)))

        def loss():
            return ((block(Tensor(x)) - target) ** 2).sum()

        lm.zero_grad()
        loss().backward()
        for name, p in lm.named_lora_parameters().items():
            if not name.startswith("visual."):
                continue
            num = numeric_grad(lambda: loss().item(), p.data)
            worst = max(worst, rel_error(p.grad, num))
        count += 1
    el = time.time() - t0
    report("gradient correctness", count >= 11 and worst < 1e-3 and el < 30,
           f"{count} graphs, worst relative error {worst:.2e}", el)


# -- SAL schedule ----------------------------------------------------------------------

def test_sal_schedule_properties():
    t0 = time.time()
    rng = np.random.default_rng(5)
    cfg = EncoderConfig(depth=6, width=8, heads=2, feature_dim=4, vocab_size=8, max_tokens=2)
    template = inject(build_dual_encoder(cfg, 0))
    failures, worst, fired = [], 0.0, 0
    for trial in range(1000):
        q = int(rng.integers(2, 9))
        delta = float(rng.uniform(0.001, 0.02))
        kind = trial % 3
        n = int(rng.integers(0, 40))
        if kind == 0:
            stream = list(rng.random(n))
        elif kind == 1:       # plateau with jitter: activations expected
            stream = list(np.clip(0.6 + rng.normal(0, 0.002, n), 0, 1))
        else:                 # steadily improving: no activation allowed
            stream = [min(0.01 + 2.5 * delta * i, 1.0) for i in range(min(n, int(0.9 / (2.5 * delta))))]
        m = copy.deepcopy(template)
        prepare_stage2(m)
        s = SalState.fresh(m, q, delta)
        hist, layers = [], []
        for i, a in enumerate(stream):
            oracle = a - math.fsum(hist[-q:]) / q if len(hist) >= q else None
            got = incremental_factor(s.queue, a)
            if (got is None) != (oracle is None):
                failures.append(trial)
            elif got is not None:
                worst = max(worst, abs(got - oracle))
            before = m.active_layers()
            ev = step(s, m, a)
            hist.append(a)
            gained = sorted(set(m.active_layers()) - set(before))
            if ev is not None:
                layers.append(ev.layer)
                if i < q or gained != [ev.layer] or oracle >= delta:
                    failures.append(trial)
            elif gained:
                failures.append(trial)
        expected = [l for l in range(cfg.depth - 2, -1, -1)][:len(layers)]
        if layers != expected or m.active_layers("visual") != m.active_layers("textual"):
            failures.append(trial)
        if kind == 2 and layers:
            failures.append(trial)
        fired += len(layers)
    el = time.time() - t0
    report("SAL schedule properties", not failures and fired > 0 and worst < 1e-9 and el < 10,
           f"1000 streams, {fired} activations, {len(set(failures))} violations, "
           f"worst increment error {worst:.1e}", el)


# -- aggregation oracles ---------------------------------------------------------------

def test_aggregation_oracles():
    t0 = time.time()
    rng = np.random.default_rng(8)
    shapes = {n: p.shape for n, p in inject(build_dual_encoder(EncoderConfig(), 0)).named_lora_parameters().items()}
    ups = [{n: rng.normal(0, 0.05, s).astype(np.float32) for n, s in shapes.items()} for _ in range(10)]
    worst = 0.0
    agg = aggregate_uniform(ups)
    for n in shapes:
        ref = np.array([math.fsum(u[n].flat[i] for u in ups) / len(ups) for i in range(ups[0][n].size)])
        worst = max(worst, float(np.abs(agg[n].ravel() - ref).max()))

    mix = MixtureModel.from_global(inject(build_dual_encoder(EncoderConfig(), 0)).requires_grad_(False))
    gshapes = {k: v.shape for k, v in mix.gate.adapter.payload().items()}
    gates = [{k: rng.normal(0, 0.1, s).astype(np.float32) for k, s in gshapes.items()} for _ in range(10)]
    losses = list(rng.uniform(0.2, 3.0, 10))
    gagg = aggregate_gate_adapters(gates, losses)
    total = math.fsum(losses)
    for k in gshapes:
        ref = np.array([math.fsum(l / total * g[k].flat[i] for g, l in zip(gates, losses))
                        for i in range(gates[0][k].size)])
        worst = max(worst, float(np.abs(gagg[k].ravel() - ref).max()))

    perm_dev = 0.0
    for _ in range(100):
        order = rng.permutation(10)
        a = aggregate_uniform([ups[i] for i in order])
        g = aggregate_gate_adapters([gates[i] for i in order], [losses[i] for i in order])
        perm_dev = max(perm_dev, max(float(np.abs(a[n] - agg[n]).max()) for n in shapes),
                       max(float(np.abs(g[k] - gagg[k]).max()) for k in gshapes))
    el = time.time() - t0
    report("aggregation oracles", worst < 1e-7 and perm_dev < 1e-7 and el < 10,
           f"oracle deviation {worst:.1e}, permutation deviation {perm_dev:.1e} over 100 shuffles", el)


# -- mixture endpoints and convexity ---------------------------------------------------

def test_mixture_endpoints_and_convexity():
    t0 = time.time()
    g = inject(build_dual_encoder(EncoderConfig(), 0), seed=0)
    rng = np.random.default_rng(9)
    for p in g.named_lora_parameters().values():
        p.data[...] = rng.normal(0, 0.05, p.shape)
    g.requires_grad_(False)
    mix = MixtureModel.from_global(g, seed=0)
    for p in mix.local_expert.named_lora_parameters(active_only=True).values():
        p.data[...] += rng.normal(0, 0.1, p.shape)
    mix.eval()
    x, tok = rng.normal(size=(8, 16, 16, 3)), rng.integers(0, 64, (10, 8))
    with T.no_grad():
        glob, local, _ = mix.expert_logits(x, tok)
        ends = (mixture_logits(mix, x, tok, lam=1.0).data.tobytes() == glob.data.tobytes()
                and mixture_logits(mix, x, tok, lam=0.0).data.tobytes() == local.data.tobytes())
        lo, hi = np.minimum(glob.data, local.data), np.maximum(glob.data, local.data)
        outside = 0
        for _ in range(50):
            out = mixture_logits(mix, x, tok, lam=Tensor(rng.random(len(x)))).data
            outside += int(np.sum((out < lo - 1e-6) | (out > hi + 1e-6)))
    el = time.time() - t0
    report("mixture endpoints and convexity", ends and outside == 0 and el < 5,
           f"endpoints bitwise {ends}, {outside} entries outside the expert interval", el)


# -- end-to-end desk runs (shared by freeze integrity and the directional check) -------

@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.time()
    runs = []
    for seed in SEEDS:
        rc = rc_for(seed)
        clients, server, base = desk_setup(seed)
        ge = run_stage1(clients, server, rc)
        s1 = stage_accuracy(server, "stage1")
        ge.requires_grad_(False)
        before = state_hash(ge.state_dict())
        init_lora = {k: v.copy() for k, v in ge.lora_state().items()}
        run_stage2(clients, ge, server, rc)
        s2 = stage_accuracy(server, "stage2")
        frozen_ok = state_hash(ge.state_dict()) == before
        for c in clients:
            local = c.mixture.local_expert
            for name, value in local.lora_state().items():
                enc, layer, site, _ = name.split(".")
                if not local.pairs[(enc, int(layer), site)].active and not np.array_equal(value, init_lora[name]):
                    frozen_ok = False
        bclients, bserver, _ = desk_setup(seed, lora=False)
        run_baseline("LFFT", bclients, bserver, rc)
        lfft = stage_accuracy(bserver, "lfft")
        runs.append(dict(seed=seed, s1=s1, s2=s2, lfft=lfft, frozen_ok=frozen_ok,
                         events=len(server.activation_events)))
    return runs, time.time() - t0


def test_freeze_integrity(desk_runs):
    runs, el = desk_runs
    ok = all(r["frozen_ok"] for r in runs)
    report("freeze integrity", ok, f"global expert and inactive pairs unchanged in "
           f"{sum(r['frozen_ok'] for r in runs)}/{len(runs)} seeds")


def test_end_to_end_directional(desk_runs):
    runs, el = desk_runs
    a = sum(r["s2"] >= r["s1"] for r in runs)
    b = sum(r["s2"] >= r["lfft"] for r in runs)
    table = "; ".join(f"seed {r['seed']} s1 {r['s1']:.3f} mofm {r['s2']:.3f} lfft {r['lfft']:.3f}" for r in runs)
    print(table)
    report("end-to-end directional reproduction", a >= 4 and b >= 4 and el < 600,
           f"mixture >= stage one in {a}/5 seeds, FedMS >= LFFT in {b}/5 seeds", el)


# -- parameter proportions -------------------------------------------------------------

def test_parameter_proportions():
    t0 = time.time()
    cfg = EncoderConfig()
    base = build_dual_encoder(cfg, 0)
    ft = baseline_proportion(base, "FT")
    block = sum(p.size for k, p in base.named_parameters() if ".blocks." in k)
    lfft = Fraction(sum(p.size for p in baseline_trainable(base, "LFFT").values()), block)
    lm = inject(base)
    n_lora = lora_parameter_count(cfg, 1)
    fedms = trainable_proportion(lm)
    oracle = Fraction(n_lora, base.num_parameters() + n_lora)
    g = copy.deepcopy(lm).requires_grad_(False)
    gate = MixtureModel.from_global(g).gate
    ratio = gate.adapter.num_parameters() / gate.total_parameters()
    el = time.time() - t0
    ok = ft == 1 and lfft == Fraction(1, 2) and fedms == oracle and fedms < Fraction(1, 100) and ratio < 0.03
    report("parameter-proportion accounting", ok and el < 1.0,
           f"FT {float(ft):.0%}, LFFT {float(lfft):.0%} of blocks, FedMS stage one {float(fedms):.3%} "
           f"(oracle {float(oracle):.3%}), gate ratio {ratio:.2%}", el)


# -- communication time ----------------------------------------------------------------

def _ledger(per_client_floats: list[tuple[str, int, int]], clients: int) -> PayloadLedger:
    """Ledger for ``clients`` each sending ``floats`` per round in every (stage, rounds, floats) entry."""
    led = PayloadLedger()
    for stage, rounds, floats in per_client_floats:
        for rnd in range(1, rounds + 1):
            for cid in range(clients):
                led.record(stage, rnd, cid, "down", floats)
                led.record(stage, rnd, cid, "up", floats)
    return led


def test_communication_time_law():
    cfg = EncoderConfig()
    base = build_dual_encoder(cfg, 0)
    lm = inject(base)
    gate_floats = MixtureModel.from_global(copy.deepcopy(lm).requires_grad_(False)).gate.adapter.payload_size()
    n, r1, r2 = DESK["num_clients"], DESK_ROUNDS.rounds_stage1, DESK_ROUNDS.rounds_stage2
    t0 = time.time()
    fedms = _ledger([("stage1", r1, lora_parameter_count(cfg, 1)), ("stage2", r2, gate_floats)], n)
    ft = _ledger([("ft", r1 + r2, base.num_parameters())], n)
    times = {k: {bw: comm_time(led, bw * MB)[1] for bw in BANDWIDTHS_MB} for k, led in (("fedms", fedms), ("ft", ft))}
    inverse = all(abs(t[bw] * bw - t[1.0]) <= 1e-12 * t[1.0] for t in times.values() for bw in BANDWIDTHS_MB)
    payload_ratio = fedms.total_bytes() / ft.total_bytes()
    ratio_dev = max(abs(times["fedms"][bw] / times["ft"][bw] - payload_ratio) for bw in BANDWIDTHS_MB)
    el = time.time() - t0
    ok = inverse and ratio_dev < 1e-9 and payload_ratio < 0.01
    report("communication-time law", ok and el < 1.0,
           f"FedMS {times['fedms'][1.0]:.2f} s vs FT {times['ft'][1.0]:.1f} s at 1 MB/s, "
           f"payload ratio {payload_ratio:.3%}, ratio deviation {ratio_dev:.1e}", el)


# -- backdoor degradation --------------------------------------------------------------

def test_backdoor_degradation(monkeypatch):
    t0 = time.time()
    seen = []
    real_upload = federation.client_upload

    def spy(local, broadcast, malicious):
        seen.append((copy.deepcopy(dict(local)), copy.deepcopy(dict(broadcast)), malicious))
        return real_upload(local, broadcast, malicious)

    worst, rows = 0.0, []
    for seed in SEEDS:
        rc = rc_for(seed, rounds_stage2=0)
        clients, server, _ = desk_setup(seed)
        run_stage1(clients, server, rc)
        clean = stage_accuracy(server, "stage1")

        clients, server, _ = desk_setup(seed, attack_ratio=0.2)
        checked = []

        def on_round_end(rnd, server=server, n=len(clients)):
            ups, seen[:] = seen[-n:], []
            for k in server.global_state:
                honest = np.mean([np.asarray(l[k], np.float64) for l, _, _ in ups], axis=0)
                bad = sum(np.asarray(l[k], np.float64) - b[k] for l, b, m in ups if m)
                checked.append(float(np.abs(server.global_state[k] - (honest - 2.0 / n * bad)).max()))

        monkeypatch.setattr(federation, "client_upload", spy)
        run_stage1(clients, server, rc, on_round_end=on_round_end)
        monkeypatch.setattr(federation, "client_upload", real_upload)
        attacked = stage_accuracy(server, "stage1")
        worst = max([worst] + checked)
        rows.append((seed, clean, attacked))
    lower = sum(a < c for _, c, a in rows)
    print("; ".join(f"seed {s} clean {c:.3f} attacked {a:.3f}" for s, c, a in rows))
    el = time.time() - t0
    report("backdoor degradation", lower >= 4 and worst < 1e-6 and el < 600,
           f"attacked accuracy lower in {lower}/5 seeds, linearity deviation {worst:.1e}", el)


# -- partition statistics --------------------------------------------------------------

def test_dirichlet_partition_statistics():
    t0 = time.time()
    ds = generate(10, 100, seed=0)

    def hist(alpha, seed):
        return class_histograms(ds.labels, dirichlet_partition(ds, PartitionSpec(10, alpha, seed)), 10)

    def tv(h):
        p = h / h.sum(axis=1, keepdims=True)
        return 0.5 * np.abs(p - 0.1).sum(axis=1)

    def top_share(h):
        return float((h.max(axis=1) / h.sum(axis=1)).mean())

    tv_max = max(tv(hist(1e6, s)).max() for s in range(20))
    skew_small = np.mean([top_share(hist(0.1, s)) for s in range(20)])
    skew_large = np.mean([top_share(hist(10.0, s)) for s in range(20)])
    el = time.time() - t0
    report("Dirichlet partition statistics", tv_max < 0.1 and skew_small > skew_large and el < 10,
           f"max TV at alpha 1e6 {tv_max:.3f}, mean top share {skew_small:.2f} (alpha 0.1) "
           f"vs {skew_large:.2f} (alpha 10)", el)
