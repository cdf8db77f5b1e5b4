"""GRU encoder-decoder baselines: purely local training and FedAvg.

Both reuse the client encoder and the offline sub-decoder, trained directly
on the ground truth, so inference is the server-free path.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .client import ClientModel, WindowBatch, decode_offline, encode
from .data import SplitWindows
from .federation import FedConfig, _batches, fedavg, rng_for
from .optim import AdamState, adam_step
from .tensor import backward, mse

_BASE_INIT, _BASE_SHUFFLE = 10, 11


def seq2seq_parameters(m: ClientModel):
    return [p for n, p in m.named_parameters() if n.startswith(("encoder.", "dec_off."))]


def seq2seq_step(m: ClientModel, batch: WindowBatch, opt: AdamState) -> float:
    pred = decode_offline(m, encode(m, batch.x), batch.last_obs, batch.horizon)
    loss = mse(pred, batch.y)
    backward(loss)
    adam_step(opt, seq2seq_parameters(m))
    return loss.item()


def _epoch(m: ClientModel, opt: AdamState, data: WindowBatch, cfg: FedConfig, *stream: int) -> float:
    tot = 0.0
    for idx in _batches(len(data), cfg.batch_size, rng_for(cfg.seed, _BASE_SHUFFLE, *stream)):
        tot += seq2seq_step(m, data.subset(idx), opt) * idx.size
    return tot / len(data)


def _init(train: SplitWindows, cfg: FedConfig) -> ClientModel:
    return ClientModel.init(train.x.shape[-1], cfg.hidden, cfg.spatial, cfg.layers, rng_for(cfg.seed, _BASE_INIT))


def train_local_gru(train: SplitWindows, cfg: FedConfig) -> list[ClientModel]:
    """Independent per-client models, R_g * R_c local epochs each."""
    base = _init(train, cfg)
    models = []
    for i in range(train.n_clients):
        m = base.clone()
        opt = AdamState.for_params(seq2seq_parameters(m), lr=cfg.lr)
        data = train.client(i)
        for e in range(cfg.rounds_global * cfg.rounds_client):
            _epoch(m, opt, data, cfg, 0, i, e)
        models.append(m)
    return models


def train_fedavg_gru(train: SplitWindows, cfg: FedConfig) -> list[ClientModel]:
    """R_g rounds of R_c local epochs followed by parameter averaging."""
    base = _init(train, cfg)
    models = [base.clone() for _ in range(train.n_clients)]
    opts = [AdamState.for_params(seq2seq_parameters(m), lr=cfg.lr) for m in models]
    for r in range(cfg.rounds_global):
        for i, m in enumerate(models):
            for e in range(cfg.rounds_client):
                _epoch(m, opts[i], train.client(i), cfg, 1, r, i, e)
        theta = fedavg([m.state_dict() for m in models])
        for m in models:
            m.load_state_dict(theta)
    return models


def offline_all(models: Sequence[ClientModel]) -> np.ndarray:
    """Every client of a baseline runs the server-free path."""
    return np.arange(len(models))
