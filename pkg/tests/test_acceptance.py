"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 8 share one session-scoped experiment on a fixed synthetic
dataset: 16 clients in 2 planted clusters, S=8, T=4, 30 global rounds, and
three training seeds per configuration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from m3fgm.baselines import train_fedavg_gru, train_local_gru
from m3fgm.client import ClientModel, decode_online, encode, gru_step, loss_on
from m3fgm.data import SplitSpec, Standardizer, make_windows, synth_dataset
from m3fgm.evaluation import OfflineSchedule, infer_pass, monotone_violations, read_sweep_csv, rmse, sweep
from m3fgm.federation import (
    FedConfig,
    flatten_state,
    init_state,
    run_training,
    step1_client_phase,
    step2_server_phase,
    step3_aggregate_broadcast,
)
from m3fgm.graph import ClientGraph, build_client_graph, build_multigraph, eigensym, spectral_cluster
from m3fgm.gradcheck import grad_check
from m3fgm.server import MaskNodeLayer, ServerModel, mask_nodes, masked_count, mgmp_forward, server_forward
from m3fgm.server import sublayer_forward
from m3fgm.tensor import Tensor, add, mul, select, sum_all
from m3fgm.transport import digest
from oracles import dense_mgmp, dense_sublayer, random_instance, toy_graph

# experiment settings
N_CLIENTS, CLUSTERS, S, T = 16, 2, 8, 4
LENGTH, NOISE, MAX_LAG, DATA_SEED = 480, 0.6, 1, 1
HIDDEN, LR, BATCH, ROUNDS = 32, 2e-3, 32, 30
SEEDS = (0, 1, 2)
MASK_RATES = (0.0, 0.1, 0.25, 0.4)
OFFLINE = 0.25
SWEEP_MRS, SWEEP_RATES = (0.1, 0.25, 0.4), (0.0, 0.25, 0.35)
BUDGET_S = 15 * 60


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def two_cliques(k: int = 3) -> np.ndarray:
    a = np.zeros((2 * k, 2 * k))
    a[:k, :k] = 1.0
    a[k:, k:] = 1.0
    np.fill_diagonal(a, 0.0)
    return a


# --- 1: gradients ------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}

    m = ClientModel.init(2, 3, 3, rng=rng)
    cell = m.encoder[0]
    x = Tensor(rng.normal(size=(4, 2)))
    h = Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    params = [x, h] + [p for _, p in cell.named_parameters("c")]
    errs["gru cell"] = grad_check(lambda ins: sum_all(mul(gru_step(cell, x, h), w)), params).max_rel_err

    xs = rng.normal(size=(3, 5, 2))
    ys = rng.normal(size=(3, 2, 2))
    s = Tensor(rng.normal(size=(3, 3)))

    def client_loss(_):
        return loss_on(decode_online(m, encode(m, xs), s, xs[:, -1, :], 2), ys)

    errs["encoder + online decoder"] = grad_check(client_loss, m.parameters() + [s]).max_rel_err

    g = toy_graph()
    sm = ServerModel.init(g, 3, 0.34, rng)
    sm.mask.h_s.data = rng.normal(size=3)
    clients = [ClientModel.init(1, 3, 3, rng=k) for k in range(6)]
    hb = rng.normal(size=(2, 6, 3))
    last = rng.normal(size=(6, 2, 1))
    yb = rng.normal(size=(6, 2, 2, 1))

    def server_loss(_):
        out = server_forward(sm, hb, mode="train", v_off=[1, 4])
        total = None
        for i, c in enumerate(clients):
            l_i = loss_on(decode_online(c, hb[:, i, :], select(out, i, axis=-2), last[i], 2), yb[i])
            total = l_i if total is None else add(total, l_i)
        return total

    errs["server + sum of online losses"] = grad_check(server_loss, sm.parameters()).max_rel_err
    seconds = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-4 and seconds < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {seconds:.1f}s"
    verdict(capsys, 1, ok, detail)


# --- 2: dense oracle equivalence ------------------------------------------------------------------

def test_criterion_2_dense_oracle_equivalence(capsys):
    worst_sub = worst_mgmp = 0.0
    for seed in range(50):
        g, layer, rng = random_instance(seed)
        x = rng.normal(size=(g.n, 3))
        src, dst = g.client_edges()
        got = sublayer_forward(layer.sub_cli, x, x, src, dst).data
        ref = dense_sublayer(layer.sub_cli, x, x, (g.client.adj > 0).astype(float))
        worst_sub = max(worst_sub, float(np.max(np.abs(got - ref))))
        zc = rng.normal(size=(g.m, 3))
        z, c = mgmp_forward(layer, x, zc, g)
        rz, rc = dense_mgmp(layer, x, zc, g.client.adj, g.assignment.label, g.m)
        worst_mgmp = max(worst_mgmp, float(np.max(np.abs(z.data - rz))), float(np.max(np.abs(c.data - rc))))
    ok = worst_sub < 1e-10 and worst_mgmp < 1e-10
    verdict(capsys, 2, ok, f"50 instances, max |diff| sublayer {worst_sub:.1e}, mgmp {worst_mgmp:.1e}")


# --- 3: MaskNode contract ---------------------------------------------------------------------------

def test_criterion_3_mask_contract(capsys):
    rng = np.random.default_rng(0)
    bad = []
    for mr in (0.0, 0.1, 0.25, 0.4, 1.0):
        for n in (4, 10, 207):
            want = int(np.floor(mr * n + 1e-9))
            layer = MaskNodeLayer(Tensor(np.zeros(2)), mr)
            sizes = {mask_nodes(layer, np.zeros((n, 2)), rng)[1].size for _ in range(20)}
            if sizes != {want} or masked_count(mr, n) != want:
                bad.append((mr, n, sizes))
    g = toy_graph()
    sm = ServerModel.init(g, 4, 0.25, np.random.default_rng(1))
    sm.mask.h_s.data = np.random.default_rng(2).normal(size=4)
    h = np.random.default_rng(3).normal(size=(5, 6, 4))
    same = True
    for off in ([2], [0, 5], [1, 3, 4]):
        train = server_forward(sm, h, mode="train", v_off=off).data
        infer = server_forward(sm, np.delete(h, off, axis=-2), mode="infer", offline=off).data
        same &= train.tobytes() == infer.tobytes()
    verdict(capsys, 3, not bad and same,
            f"count mismatches {bad or 'none'}; infer path byte-equal to forced train mask: {same}")


# --- 4: clustering -----------------------------------------------------------------------------------

def test_criterion_4_clustering(capsys):
    ids = [str(k) for k in range(6)]
    disc = spectral_cluster(ClientGraph(two_cliques(), ids), 2, seed=0).label.tolist()
    bar = two_cliques()
    bar[2, 3] = bar[3, 2] = 1.0
    barbell = spectral_cluster(ClientGraph(bar, ids), 2, seed=0).label.tolist()
    worst = 0.0
    for seed in range(20):
        b = np.random.default_rng(seed).normal(size=(8, 8))
        a = b + b.T
        w, v = eigensym(a)
        worst = max(worst, float(np.max(np.abs(v @ np.diag(w) @ v.T - a))))
    ok = disc == [0, 0, 0, 1, 1, 1] and barbell == [0, 0, 0, 1, 1, 1] and worst < 1e-8
    verdict(capsys, 4, ok, f"disconnected {disc}, barbell {barbell}, reconstruction {worst:.1e}")


# --- 5: protocol invariants ----------------------------------------------------------------------------

def test_criterion_5_protocol_invariants(capsys):
    ds = synth_dataset(n_clients=6, length=150, noise=0.1, seed=4, max_lag=1)
    g = build_multigraph(build_client_graph(ds.distances, node_ids=ds.traces.sensor_ids), m=2, seed=0)
    scaler = Standardizer.fit(ds.traces.values[:105])
    train = make_windows(scaler.transform(ds.traces.values), 4, 2)["train"]
    cfg = FedConfig(rounds_global=3, hidden=4, spatial=4, lr=1e-2, batch_size=16, mr=0.34)

    state = init_state(train, g, cfg)
    synced = isolated = True
    for r in range(1, cfg.rounds_global + 1):
        state.round = state.transport.round = r
        step1_client_phase(state, train, cfg)
        isolated &= all(p.grad is None or not p.grad.any() for p in state.server.parameters())
        step2_server_phase(state, train, cfg)
        isolated &= all(p.grad is None or not p.grad.any() for m in state.clients for p in m.parameters())
        step3_aggregate_broadcast(state, cfg)
        synced &= len({flatten_state(m.state_dict()).tobytes() for m in state.clients}) == 1

    sent = {d for msg in state.transport.log for d in msg.digests}
    probes = {digest(train.x[i][k].ravel()) for i in range(6) for k in range(len(train))}
    probes |= {digest(train.y[i][k].ravel()) for i in range(6) for k in range(len(train))}
    probes |= {digest(train.x[i]) for i in range(6)} | {digest(ds.traces.values[:, i]) for i in range(6)}
    private = not probes & sent

    a, b = run_training(train, g, cfg), run_training(train, g, cfg)
    determ = (a.metrics_ndjson() == b.metrics_ndjson()
              and flatten_state(a.theta_c).tobytes() == flatten_state(b.theta_c).tobytes()
              and flatten_state(a.theta_server).tobytes() == flatten_state(b.theta_server).tobytes())
    ok = synced and isolated and private and determ
    verdict(capsys, 5, ok, f"weight sync {synced}, gradient isolation {isolated}, "
                           f"no raw data sent {private}, seed determinism {determ}")


# --- shared experiment for 6-8 ---------------------------------------------------------------------------

@dataclass
class Experiment:
    windows: dict
    scaler: Standardizer
    targets: np.ndarray
    m3: dict = field(default_factory=dict)  # (mr, seed) -> (clients, server)
    local: dict = field(default_factory=dict)
    fedavg: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def predict(self, clients, server, offline) -> np.ndarray:
        return self.scaler.inverse(infer_pass(clients, server, self.windows["test"], offline)[0])

    def offline_set(self, seed: int) -> np.ndarray:
        return OfflineSchedule(rate=OFFLINE, seed=seed).resolve(N_CLIENTS)


@pytest.fixture(scope="session")
def experiment() -> Experiment:
    ds = synth_dataset(N_CLIENTS, LENGTH, CLUSTERS, NOISE, DATA_SEED, max_lag=MAX_LAG)
    split = SplitSpec()
    lo, hi = split.ranges(LENGTH)["train"]
    scaler = Standardizer.fit(ds.traces.values[lo:hi])
    windows = make_windows(scaler.transform(ds.traces.values), S, T, split)
    graph = build_multigraph(build_client_graph(ds.distances, 0.1, ds.traces.sensor_ids), CLUSTERS, DATA_SEED)
    exp = Experiment(windows, scaler, scaler.inverse(windows["test"].y))
    for mr in MASK_RATES:
        t0 = time.perf_counter()
        for seed in SEEDS:
            cfg = FedConfig(rounds_global=ROUNDS, mr=mr, seed=seed, hidden=HIDDEN, spatial=HIDDEN, lr=LR,
                            batch_size=BATCH)
            res = run_training(windows["train"], graph, cfg)
            exp.m3[(mr, seed)] = (res.state.clients, res.state.server)
        exp.seconds[f"m3fgm mr={mr}"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    for seed in SEEDS:
        cfg = FedConfig(rounds_global=ROUNDS, seed=seed, hidden=HIDDEN, spatial=HIDDEN, lr=LR, batch_size=BATCH)
        exp.local[seed] = train_local_gru(windows["train"], cfg)
        exp.fedavg[seed] = train_fedavg_gru(windows["train"], cfg)
    exp.seconds["baselines"] = time.perf_counter() - t0
    return exp


def mean_std(vals) -> tuple[float, float]:
    return float(np.mean(vals)), float(np.std(vals, ddof=1))


def test_criterion_6_ideal_scenario(experiment, capsys):
    e = experiment
    allc = range(N_CLIENTS)
    m3 = [rmse(e.predict(*e.m3[(0.25, s)], []), e.targets, allc) for s in SEEDS]
    loc = [rmse(e.predict(e.local[s], None, allc), e.targets, allc) for s in SEEDS]
    fed = [rmse(e.predict(e.fedavg[s], None, allc), e.targets, allc) for s in SEEDS]
    (mm, sm), (ml, sl), (mf, sf) = mean_std(m3), mean_std(loc), mean_std(fed)
    beats_local = ml - mm > max(sm, sl)
    beats_fed = mf - mm > max(sm, sf)
    seconds = e.seconds["m3fgm mr=0.25"] + e.seconds["baselines"]
    ok = beats_local and beats_fed and seconds < BUDGET_S
    verdict(capsys, 6, ok, f"M3FGM {mm:.3f}+-{sm:.3f}, local GRU {ml:.3f}+-{sl:.3f}, "
                           f"FedAvg GRU {mf:.3f}+-{sf:.3f}; {seconds:.0f}s")


def test_criterion_7_offline_scenario(experiment, capsys):
    e = experiment
    allc = np.arange(N_CLIENTS)
    m3_off, loc_off, deg_mask, deg_plain = [], [], [], []
    for s in SEEDS:
        off = e.offline_set(s)
        on = np.setdiff1d(allc, off)
        p_local = e.predict(e.local[s], None, allc)
        loc_off.append(rmse(p_local, e.targets, off))
        for mr, sink in ((0.25, deg_mask), (0.0, deg_plain)):
            ideal = rmse(e.predict(*e.m3[(mr, s)], []), e.targets, allc)
            p = e.predict(*e.m3[(mr, s)], off)
            sink.append(rmse(p, e.targets, on) - ideal)
            if mr == 0.25:
                m3_off.append(rmse(p, e.targets, off))
    a_ok = np.mean(m3_off) <= np.mean(loc_off)
    b_ok = np.mean(deg_mask) < np.mean(deg_plain)
    verdict(capsys, 7, a_ok and b_ok,
            f"(a) offline clients M3FGM {np.mean(m3_off):.3f} vs local GRU {np.mean(loc_off):.3f}; "
            f"(b) online degradation mr=0.25 {np.mean(deg_mask):+.3f} vs mr=0 {np.mean(deg_plain):+.3f}")


def test_criterion_8_sweep_shape(experiment, capsys, tmp_path_factory):
    e = experiment
    path = tmp_path_factory.mktemp("sweep") / "sweep.csv"
    sweep(lambda mr, seed: e.m3[(mr, seed)], SWEEP_MRS, SWEEP_RATES, SEEDS, e.windows["test"], e.scaler,
          csv_path=path)
    rows = read_sweep_csv(path)
    cells = {(r["mr"], r["offline_rate"]) for r in rows}
    complete = path.is_file() and len(rows) == 27 and cells == {(m, q) for m in SWEEP_MRS for q in SWEEP_RATES}
    bad = monotone_violations(rows)
    verdict(capsys, 8, complete and len(bad) <= 1,
            f"{len(rows)} rows for {len(SWEEP_MRS)}x{len(SWEEP_RATES)}x{len(SEEDS)}; "
            f"monotonicity violations {bad or 'none'}")
