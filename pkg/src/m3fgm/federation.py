"""Alternating split-federated training.

Each global round runs three steps:

1. every client trains its encoder and sub-decoders locally against fixed
   spatial embeddings;
2. clients upload temporal embeddings and the server trains its graph model
   on the summed online loss with all client weights frozen;
3. client weights are averaged and broadcast, and fresh spatial embeddings
   are returned to their owners.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .client import ClientModel, decode_online, encode, local_train_round, loss_on, make_optimizers
from .data import SplitWindows, Standardizer
from .errors import ConfigError
from .graph import MultiGraph
from .optim import AdamState, adam_step
from .server import ServerModel, server_forward
from .tensor import Tensor, backward, frozen, no_grad, select
from .transport import Transport

log = logging.getLogger(__name__)

# stream tags for seeded generators
_INIT, _SHUFFLE_CLIENT, _SHUFFLE_SERVER, _MASK = 0, 1, 2, 3


@dataclass
class FedConfig:
    rounds_global: int = 10  # R_g
    rounds_client: int = 1  # R_c
    rounds_server: int = 1  # R_s
    mr: float = 0.25
    lr: float = 1e-3
    seed: int = 0
    batch_size: int = 32
    n_clients: int | None = None
    hidden: int = 64
    spatial: int = 64
    layers: int = 1
    weighted_fedavg: bool = False
    eval_every: int = 0  # validation RMSE every k rounds; 0 disables

    def __post_init__(self):
        for name in ("rounds_global", "rounds_client", "rounds_server", "batch_size", "hidden", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.mr <= 1.0:
            raise ConfigError(f"mask rate must lie in [0, 1], got {self.mr}")
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.spatial != self.hidden:
            raise ConfigError("the server's residual stream needs spatial dim == hidden dim")


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def flatten_state(state: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in state.values()])


def fedavg(weights: Sequence[dict[str, np.ndarray]], sizes: Sequence[float] | None = None) -> dict[str, np.ndarray]:
    """Per-parameter (weighted) mean of client parameter sets.

    Computed as ``ref + sum_k w_k (p_k - ref) / sum_k w_k`` with ``ref`` the
    first client, which returns identical inputs unchanged bit for bit.
    """
    if not weights:
        raise ValueError("fedavg: no client weights")
    names = list(weights[0])
    for k, w in enumerate(weights[1:], start=1):
        if list(w) != names:
            raise ValueError(f"fedavg: client {k} has different parameter names")
        for n in names:
            if w[n].shape != weights[0][n].shape:
                raise ValueError(f"fedavg: {n} has shape {w[n].shape} at client {k}, {weights[0][n].shape} at client 0")
    if sizes is None:
        sizes = [1.0] * len(weights)
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (len(weights),) or np.any(sizes <= 0):
        raise ValueError("fedavg: sizes must be positive, one per client")
    total = sizes.sum()
    out = {}
    for n in names:
        ref = weights[0][n]
        acc = np.zeros_like(ref)
        for w, s in zip(weights, sizes):
            acc += s * (w[n] - ref)
        out[n] = ref + acc / total
    return out


@dataclass
class FedRunState:
    clients: list[ClientModel]
    client_opts: list[tuple[AdamState, AdamState]]
    server: ServerModel
    server_opt: AdamState
    transport: Transport
    temporal: np.ndarray | None = None  # (W, N, H) latest uploads
    spatial: np.ndarray | None = None  # (N, W, H_s) as held by each client
    theta_c: dict[str, np.ndarray] | None = None
    round: int = 0

    @property
    def theta_server(self) -> dict[str, np.ndarray]:
        return self.server.state_dict()


def init_state(train: SplitWindows, graph: MultiGraph, cfg: FedConfig) -> FedRunState:
    n = train.n_clients
    if cfg.n_clients is not None and cfg.n_clients != n:
        raise ConfigError(f"config expects {cfg.n_clients} clients, data has {n}")
    if graph.n != n:
        raise ConfigError(f"graph has {graph.n} nodes, data has {n} clients")
    d = train.x.shape[-1]
    rng = rng_for(cfg.seed, _INIT)
    base = ClientModel.init(d, cfg.hidden, cfg.spatial, cfg.layers, rng)
    clients = [base.clone() for _ in range(n)]
    server = ServerModel.init(graph, cfg.hidden, cfg.mr, rng)
    return FedRunState(
        clients=clients,
        client_opts=[make_optimizers(m, cfg.lr) for m in clients],
        server=server,
        server_opt=AdamState.for_params(server.parameters(), lr=cfg.lr),
        transport=Transport(),
        spatial=np.zeros((n, len(train), cfg.spatial)),
        theta_c=base.state_dict(),
    )


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


def client_epoch(state: FedRunState, i: int, train: SplitWindows, cfg: FedConfig, r_c: int) -> tuple[float, float]:
    """One pass of client ``i`` over its shuffled training windows."""
    data = train.client(i)
    if len(data) == 0:
        raise ValueError(f"client {i} has no training windows")
    m = state.clients[i]
    opt_on, opt_off = state.client_opts[i]
    rng = rng_for(cfg.seed, _SHUFFLE_CLIENT, state.round, i, r_c)
    tot_on = tot_off = 0.0
    for idx in _batches(len(data), cfg.batch_size, rng):
        l_on, l_off = local_train_round(m, data.subset(idx), state.spatial[i][idx], opt_on, opt_off)
        tot_on += l_on * idx.size
        tot_off += l_off * idx.size
    return tot_on / len(data), tot_off / len(data)


def step1_client_phase(state: FedRunState, train: SplitWindows, cfg: FedConfig) -> tuple[float, float]:
    """Local training of every client; returns client-averaged (L_on, L_off) of the last local round."""
    if state.spatial is None:
        raise ValueError("spatial embeddings missing")
    losses = []
    with frozen(state.server.parameters()):
        for i in range(train.n_clients):
            for r_c in range(cfg.rounds_client):
                last = client_epoch(state, i, train, cfg, r_c)
            losses.append(last)
    arr = np.array(losses)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def upload_embeddings(state: FedRunState, train: SplitWindows) -> np.ndarray:
    """Each client encodes all its training windows and uploads them."""
    rows = []
    with no_grad():
        for i, m in enumerate(state.clients):
            h = encode(m, train.x[i]).data
            got = state.transport.upload(i, "embedding", h)
            if got is None:
                raise ValueError(f"embedding upload from client {i} was dropped")
            rows.append(got)
    state.temporal = np.stack(rows, axis=1)
    return state.temporal


def server_loss(state: FedRunState, h_batch: np.ndarray, train: SplitWindows, idx: np.ndarray, rng) -> Tensor:
    """Sum over clients of L_on with the server's spatial embeddings for a window batch."""
    s = server_forward(state.server, Tensor(h_batch), mode="train", rng=rng)
    total = None
    horizon = train.horizon
    for i, m in enumerate(state.clients):
        pred = decode_online(m, h_batch[:, i, :], select(s, i, axis=-2), train.x[i][idx][:, -1, :], horizon)
        l_i = loss_on(pred, train.y[i][idx])
        total = l_i if total is None else total + l_i
    return total


def step2_server_phase(state: FedRunState, train: SplitWindows, cfg: FedConfig) -> float:
    """Server training on the summed online loss; clients stay frozen.

    Returns the window-averaged summed loss of the last server round and
    leaves fresh spatial embeddings in ``state.spatial``.
    """
    h_all = upload_embeddings(state, train)
    n_win = h_all.shape[0]
    client_params = [p for m in state.clients for p in m.parameters()]
    params = state.server.parameters()
    with frozen(client_params):
        for r_s in range(cfg.rounds_server):
            tot = 0.0
            batches = _batches(n_win, cfg.batch_size, rng_for(cfg.seed, _SHUFFLE_SERVER, state.round, r_s))
            for b, idx in enumerate(batches):
                loss = server_loss(state, h_all[idx], train, idx, rng_for(cfg.seed, _MASK, state.round, r_s, b))
                backward(loss)
                adam_step(state.server_opt, params)
                tot += loss.item() * idx.size
            last = tot / n_win
    with no_grad():
        s = server_forward(state.server, h_all, mode="infer", offline=()).data
    state.spatial = np.ascontiguousarray(np.transpose(s, (1, 0, 2)))
    return last


def step3_aggregate_broadcast(state: FedRunState, cfg: FedConfig, sizes: Sequence[float] | None = None) -> FedRunState:
    """FedAvg the uploaded client weights, broadcast them and deliver spatial embeddings."""
    t = state.transport
    uploads = []
    for i, m in enumerate(state.clients):
        sd = m.state_dict()
        if t.upload(i, "params", flatten_state(sd)) is None:
            raise ValueError(f"parameter upload from client {i} was dropped")
        uploads.append(sd)
    theta = fedavg(uploads, sizes if cfg.weighted_fedavg else None)
    state.theta_c = theta
    flat = flatten_state(theta)
    for i, m in enumerate(state.clients):
        if t.download(i, "params", flat) is None:
            raise ValueError(f"parameter broadcast to client {i} was dropped")
        m.load_state_dict(theta)
        if state.spatial is not None:
            got = t.download(i, "spatial", state.spatial[i])
            if got is None:
                raise ValueError(f"spatial embeddings for client {i} were dropped")
            state.spatial[i] = got
    return state


@dataclass
class TrainResult:
    theta_c: dict[str, np.ndarray]
    theta_server: dict[str, np.ndarray]
    state: FedRunState
    metrics: list[dict] = field(default_factory=list)

    def metrics_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.metrics)


def _record(round_: int, phase: str, loss_on=None, loss_off=None, up=None, down=None, **extra) -> dict:
    rec = {"round": round_, "phase": phase, "loss_on": loss_on, "loss_off": loss_off,
           "floats_up": up, "floats_down": down}
    rec.update(extra)
    return rec


def run_training(
    train: SplitWindows,
    graph: MultiGraph,
    cfg: FedConfig,
    val: SplitWindows | None = None,
    standardizer: Standardizer | None = None,
    on_round: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run R_g global rounds of steps 1-3; deterministic for a fixed seed."""
    state = init_state(train, graph, cfg)
    sizes = [len(train)] * train.n_clients
    metrics: list[dict] = []

    def emit(rec):
        metrics.append(rec)
        if on_round is not None:
            on_round(rec)

    for r in range(1, cfg.rounds_global + 1):
        state.round = r
        state.transport.round = r
        l_on, l_off = step1_client_phase(state, train, cfg)
        emit(_record(r, "client", l_on, l_off))
        l_srv = step2_server_phase(state, train, cfg)
        emit(_record(r, "server", l_srv))
        step3_aggregate_broadcast(state, cfg, sizes)
        up, down = state.transport.round_totals(r)
        emit(_record(r, "aggregate", up=up, down=down))
        log.info("round %d: L_on=%.4f L_off=%.4f server=%.4f", r, l_on, l_off, l_srv)
        if val is not None and cfg.eval_every and (r % cfg.eval_every == 0 or r == 1):
            from .evaluation import evaluate

            rep = evaluate(state.clients, state.server, val, (), standardizer)
            emit(_record(r, "validate", val_rmse=rep.rmse_all))
    return TrainResult(state.theta_c, state.theta_server, state, metrics)


def config_dict(cfg: FedConfig) -> dict:
    return asdict(cfg)
