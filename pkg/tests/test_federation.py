from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3fgm.data import SplitWindows, Standardizer, make_windows, synth_dataset
from m3fgm.errors import ConfigError
from m3fgm.federation import (
    FedConfig,
    client_epoch,
    fedavg,
    flatten_state,
    init_state,
    run_training,
    step1_client_phase,
    step2_server_phase,
    step3_aggregate_broadcast,
)
from m3fgm.graph import ClientGraph, build_client_graph, build_multigraph
from m3fgm.server import server_forward
from m3fgm.tensor import no_grad
from m3fgm.transport import Transport, digest


def small_problem(n=4, length=120, s=4, horizon=2, seed=0):
    ds = synth_dataset(n_clients=n, length=length, n_clusters=2, noise=0.1, seed=seed, max_lag=1)
    g = build_multigraph(build_client_graph(ds.distances, node_ids=ds.traces.sensor_ids), m=2, seed=0)
    scaler = Standardizer.fit(ds.traces.values[: int(0.7 * length)])
    w = make_windows(scaler.transform(ds.traces.values), s, horizon)
    return ds, g, scaler, w


def cfg(**kw) -> FedConfig:
    base = dict(rounds_global=1, hidden=4, spatial=4, batch_size=16, lr=1e-2, seed=0)
    base.update(kw)
    return FedConfig(**base)


def states_equal(a, b) -> bool:
    return flatten_state(a).tobytes() == flatten_state(b).tobytes()


def no_grad_on(params) -> bool:
    return all(p.grad is None or not np.any(p.grad) for p in params)


# --- FedConfig ------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(rounds_global=0), dict(rounds_client=0), dict(rounds_server=0),
                                dict(mr=1.2), dict(mr=-0.1), dict(lr=-1.0), dict(spatial=8)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


# --- fedavg ---------------------------------------------------------------------------

def test_fedavg_identical_inputs_unchanged():
    w = {"a": np.array([0.1, 0.7, -3.3]), "b": np.array([[1e-9]])}
    out = fedavg([w, {k: v.copy() for k, v in w.items()}, {k: v.copy() for k, v in w.items()}])
    assert states_equal(out, w)


def test_fedavg_uniform_mean():
    assert fedavg([{"p": np.array([0.0])}, {"p": np.array([2.0])}])["p"].tolist() == [1.0]


def test_fedavg_weighted_mean():
    ws = [{"p": np.array([0.0])}, {"p": np.array([0.0])}, {"p": np.array([4.0])}]
    assert fedavg(ws, sizes=[1, 1, 2])["p"].tolist() == [2.0]


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg([{"p": np.zeros(2)}, {"p": np.zeros(3)}])
    with pytest.raises(ValueError):
        fedavg([{"p": np.zeros(2)}, {"q": np.zeros(2)}])
    with pytest.raises(ValueError):
        fedavg([{"p": np.zeros(2)}], sizes=[0])
    with pytest.raises(ValueError):
        fedavg([])


@settings(max_examples=40, deadline=None)
@given(vals=st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6),
       data=st.data())
def test_fedavg_matches_mean_and_ignores_order(vals, data):
    ws = [{"p": np.array(v)} for v in vals]
    sizes = data.draw(st.lists(st.floats(0.1, 10), min_size=len(ws), max_size=len(ws)))
    out = fedavg(ws, sizes)["p"]
    arr, sz = np.array(vals), np.array(sizes)
    ref = (arr * sz[:, None]).sum(0) / sz.sum()
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-9)
    perm = data.draw(st.permutations(range(len(ws))))
    out2 = fedavg([ws[k] for k in perm], [sizes[k] for k in perm])["p"]
    assert np.allclose(out, out2, rtol=1e-12, atol=1e-9)


# --- initial state -----------------------------------------------------------------------

def test_init_state_zero_spatial_and_identical_clients():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg())
    assert st_.spatial.shape == (4, len(w["train"]), 4) and not st_.spatial.any()
    for m in st_.clients[1:]:
        assert states_equal(m.state_dict(), st_.clients[0].state_dict())


def test_init_state_rejects_mismatched_graph():
    _, _, _, w = small_problem()
    g3 = build_multigraph(ClientGraph(np.ones((3, 3)) - np.eye(3), ["a", "b", "c"]), m=1)
    with pytest.raises(ConfigError):
        init_state(w["train"], g3, cfg())
    _, g, _, _ = small_problem()
    with pytest.raises(ConfigError):
        init_state(w["train"], g, cfg(n_clients=5))


# --- step 1 ------------------------------------------------------------------------------

def test_step1_lr_zero_leaves_models_unchanged():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg(lr=0.0))
    before = [m.state_dict() for m in st_.clients]
    step1_client_phase(st_, w["train"], cfg(lr=0.0))
    for m, b in zip(st_.clients, before):
        assert states_equal(m.state_dict(), b)


def test_step1_client_order_independence():
    _, g, _, w = small_problem(n=2)
    c = cfg()
    a, b = init_state(w["train"], g, c), init_state(w["train"], g, c)
    a.round = b.round = 1
    for i in (0, 1):
        client_epoch(a, i, w["train"], c, 0)
    for i in (1, 0):
        client_epoch(b, i, w["train"], c, 0)
    for ma, mb in zip(a.clients, b.clients):
        assert states_equal(ma.state_dict(), mb.state_dict())


def test_step1_loss_trend_single_client():
    _, _, _, w = small_problem(n=2)
    g = build_multigraph(ClientGraph(np.zeros((1, 1)), ["s000"]), m=1)
    one = SplitWindows(w["train"].x[:1], w["train"].y[:1], w["train"].t)
    c = cfg(hidden=8, spatial=8)
    st_ = init_state(one, g, c)
    losses = []
    for r in range(1, 6):
        st_.round = r
        losses.append(step1_client_phase(st_, one, c)[0])
    assert losses[-1] < losses[0]


def test_step1_server_gets_no_gradient():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg())
    step1_client_phase(st_, w["train"], cfg())
    assert no_grad_on(st_.server.parameters())


def test_step1_rejects_empty_client():
    _, g, _, w = small_problem()
    empty = w["train"].subset(np.zeros(0, dtype=int))
    st_ = init_state(w["train"], g, cfg())
    with pytest.raises(ValueError):
        step1_client_phase(st_, empty, cfg())


# --- step 2 ------------------------------------------------------------------------------

def test_step2_lr_zero_returns_initial_forward():
    _, g, _, w = small_problem()
    c = cfg(lr=0.0)
    st_ = init_state(w["train"], g, c)
    before = st_.server.state_dict()
    step2_server_phase(st_, w["train"], c)
    assert states_equal(st_.server.state_dict(), before)
    with no_grad():
        s = server_forward(st_.server, st_.temporal, mode="infer").data
    assert np.array_equal(st_.spatial, np.transpose(s, (1, 0, 2)))


def test_step2_clients_get_no_gradient():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg())
    step1_client_phase(st_, w["train"], cfg())
    before = [m.state_dict() for m in st_.clients]
    step2_server_phase(st_, w["train"], cfg())
    for m, b in zip(st_.clients, before):
        assert no_grad_on(m.parameters())
        assert states_equal(m.state_dict(), b)


def test_step2_server_loss_trend():
    _, g, _, w = small_problem()
    c = cfg(hidden=8, spatial=8, lr=5e-3)
    st_ = init_state(w["train"], g, c)
    st_.round = 1
    step1_client_phase(st_, w["train"], c)
    losses = []
    for r in range(20):
        st_.round = r + 1
        losses.append(step2_server_phase(st_, w["train"], c))
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_step2_uploads_once_per_entry():
    _, g, _, w = small_problem()
    c = cfg(rounds_server=3)
    st_ = init_state(w["train"], g, c)
    step2_server_phase(st_, w["train"], c)
    kinds = [m.kind for m in st_.transport.log]
    assert kinds == ["embedding"] * 4


# --- step 3 ------------------------------------------------------------------------------

def test_step3_weight_sync_byte_equal():
    _, g, _, w = small_problem()
    c = cfg()
    st_ = init_state(w["train"], g, c)
    step1_client_phase(st_, w["train"], c)
    assert not states_equal(st_.clients[0].state_dict(), st_.clients[1].state_dict())
    step2_server_phase(st_, w["train"], c)
    step3_aggregate_broadcast(st_, c)
    ref = st_.clients[0].state_dict()
    for m in st_.clients[1:]:
        assert states_equal(m.state_dict(), ref)
    assert states_equal(st_.theta_c, ref)


def test_step3_identical_clients_is_noop():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg())
    before = st_.clients[0].state_dict()
    step3_aggregate_broadcast(st_, cfg())
    for m in st_.clients:
        assert states_equal(m.state_dict(), before)


def test_transport_ledger_message_inventory():
    t = Transport(round=1)
    theta, h, s = np.zeros(10), np.zeros((1, 4)), np.zeros((1, 4))
    for i in range(2):
        t.upload(i, "embedding", h)
        t.upload(i, "params", theta)
        t.download(i, "params", theta)
        t.download(i, "spatial", s)
    assert t.round_totals(1) == (28, 28)


def test_ledger_counts_for_a_real_round():
    _, g, _, w = small_problem(n=2)
    tr = w["train"].subset(np.arange(1))
    c = cfg()
    res = run_training(tr, g, c)
    n_theta = res.state.clients[0].num_parameters()
    rec = [m for m in res.metrics if m["phase"] == "aggregate"][0]
    assert rec["floats_up"] == 2 * n_theta + 2 * 4
    assert rec["floats_down"] == 2 * n_theta + 2 * 4


def test_transport_drop_is_whole_message():
    t = Transport(drop={1})
    assert t.upload(1, "params", np.ones(5)) is None
    assert t.floats_up == 0 and not t.log
    got = t.upload(0, "params", np.ones(5))
    assert got.size == 5 and t.floats_up == 5


def test_dropped_upload_fails_loudly():
    _, g, _, w = small_problem()
    st_ = init_state(w["train"], g, cfg())
    st_.transport.drop = {2}
    with pytest.raises(ValueError):
        step2_server_phase(st_, w["train"], cfg())


# --- full runs ---------------------------------------------------------------------------

def test_single_round_equals_manual_composition():
    _, g, _, w = small_problem()
    c = cfg()
    res = run_training(w["train"], g, c)
    st_ = init_state(w["train"], g, c)
    st_.round = st_.transport.round = 1
    step1_client_phase(st_, w["train"], c)
    step2_server_phase(st_, w["train"], c)
    step3_aggregate_broadcast(st_, c, [len(w["train"])] * 4)
    assert states_equal(res.theta_c, st_.theta_c)
    assert states_equal(res.theta_server, st_.server.state_dict())


def test_seed_determinism_of_full_runs():
    _, g, _, w = small_problem()
    c = cfg(rounds_global=2, mr=0.5)
    a, b = run_training(w["train"], g, c), run_training(w["train"], g, c)
    assert a.metrics_ndjson() == b.metrics_ndjson()
    assert states_equal(a.theta_c, b.theta_c) and states_equal(a.theta_server, b.theta_server)
    other = run_training(w["train"], g, cfg(rounds_global=2, mr=0.5, seed=1))
    assert not states_equal(a.theta_server, other.theta_server)


def test_weight_sync_after_every_round():
    _, g, _, w = small_problem()
    c = cfg()
    st_ = init_state(w["train"], g, c)
    for r in range(1, 4):
        st_.round = st_.transport.round = r
        step1_client_phase(st_, w["train"], c)
        step2_server_phase(st_, w["train"], c)
        step3_aggregate_broadcast(st_, c)
        blobs = {flatten_state(m.state_dict()).tobytes() for m in st_.clients}
        assert len(blobs) == 1


def test_raw_data_never_transmitted():
    ds, g, scaler, w = small_problem()
    res = run_training(w["train"], g, cfg(rounds_global=2))
    sent = {d for msg in res.state.transport.log for d in msg.digests}
    assert {m.kind for m in res.state.transport.log} == {"embedding", "params", "spatial"}
    probes = set()
    tr = w["train"]
    for i in range(tr.n_clients):
        probes.add(digest(tr.x[i]))
        probes.add(digest(tr.y[i]))
        for k in range(len(tr)):
            probes.add(digest(tr.x[i][k].ravel()))
            probes.add(digest(tr.y[i][k].ravel()))
        probes.add(digest(ds.traces.values[:, i]))
        probes.add(digest(scaler.transform(ds.traces.values[:, i])))
    assert not probes & sent


def test_metrics_records_have_documented_fields():
    _, g, _, w = small_problem()
    res = run_training(w["train"], g, cfg(rounds_global=2))
    assert [m["phase"] for m in res.metrics] == ["client", "server", "aggregate"] * 2
    for rec in res.metrics:
        assert {"round", "phase", "loss_on", "loss_off", "floats_up", "floats_down"} <= set(rec)


def test_validation_rmse_improves_over_training():
    _, g, scaler, w = small_problem(n=8, length=200, s=6, horizon=2)
    res = run_training(w["train"], g, cfg(rounds_global=10, hidden=16, spatial=16, lr=5e-3, eval_every=1),
                       val=w["val"], standardizer=scaler)
    val = [m["val_rmse"] for m in res.metrics if m["phase"] == "validate"]
    assert len(val) == 10 and val[-1] < val[0]
