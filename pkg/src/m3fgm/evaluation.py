"""Inference under ideal and offline scenarios, grouped RMSE and the
mask-rate x offline-rate sweep."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .client import ClientModel, decode_offline, decode_online, encode
from .data import SplitWindows, Standardizer
from .server import ServerModel, masked_count, server_forward
from .tensor import no_grad
from .transport import Transport


@dataclass
class OfflineSchedule:
    """Either an explicit offline set or a rate drawn with a seed.

    Rate-based sets are prefixes of one seeded permutation, so for a fixed
    seed a higher rate takes a superset of the clients a lower rate takes.
    """

    offline_ids: tuple[int, ...] | None = None
    rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.offline_ids is None) == (self.rate is None):
            raise ValueError("give exactly one of offline_ids or rate")
        if self.rate is not None and not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"offline rate must lie in [0, 1], got {self.rate}")

    def resolve(self, n: int) -> np.ndarray:
        if self.offline_ids is not None:
            ids = np.unique(np.asarray(self.offline_ids, dtype=np.intp))
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise ValueError(f"offline client index out of range [0, {n})")
            return ids
        k = masked_count(self.rate, n)
        perm = np.random.default_rng(self.seed).permutation(n)
        return np.sort(perm[:k])


@dataclass
class EvalReport:
    rmse_all: float
    rmse_online: float | None
    rmse_offline: float | None
    n_online: int  # (client, window) pairs per group
    n_offline: int
    offline_ids: list[int]
    per_step: list[float]
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("rmse_online", "rmse_offline"):
            if out[key] is None:
                del out[key]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def infer_pass(
    models: Sequence[ClientModel],
    server: ServerModel | None,
    windows: SplitWindows,
    schedule: OfflineSchedule | np.ndarray | Sequence[int] = (),
    transport: Transport | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forecasts ``(N, W, T, D)`` on the standardized scale plus the offline set.

    Online clients upload their temporal embeddings and decode with the
    returned spatial embeddings; offline clients never talk to the server.
    """
    n = windows.n_clients
    if len(models) != n:
        raise ValueError(f"{len(models)} client models for {n} clients")
    offline = schedule.resolve(n) if isinstance(schedule, OfflineSchedule) else np.unique(np.asarray(schedule, dtype=np.intp))
    if offline.size and (offline.min() < 0 or offline.max() >= n):
        raise ValueError(f"offline client index out of range [0, {n})")
    online = np.setdiff1d(np.arange(n), offline)
    horizon = windows.horizon
    preds = np.empty(windows.y.shape)
    with no_grad():
        hs = {i: encode(models[i], windows.x[i]).data for i in range(n)}
        for i in offline.tolist():
            preds[i] = decode_offline(models[i], hs[i], windows.x[i][:, -1, :], horizon).data
        if online.size:
            if server is None:
                raise ValueError("online clients need a server model")
            rows = []
            for i in online.tolist():
                h = hs[i] if transport is None else transport.upload(i, "embedding", hs[i])
                rows.append(h)
            h_partial = np.stack(rows, axis=1)  # (W, n_online, H)
            s_all = server_forward(server, h_partial, mode="infer", offline=offline).data
            for i in online.tolist():
                s = s_all[:, i, :]
                if transport is not None:
                    s = transport.download(i, "spatial", s)
                preds[i] = decode_online(models[i], hs[i], s, windows.x[i][:, -1, :], horizon).data
    return preds, offline


def rmse(preds: np.ndarray, targets: np.ndarray, group) -> float:
    """Root mean squared error over every (window, step, dim) of the ``group`` clients."""
    group = np.asarray(list(group), dtype=np.intp)
    if group.size == 0:
        raise ValueError("rmse: empty client group")
    diff = preds[group] - targets[group]
    return float(np.sqrt(np.mean(diff * diff)))


def report(preds: np.ndarray, windows: SplitWindows, offline: np.ndarray,
           standardizer: Standardizer | None = None, config: dict | None = None) -> EvalReport:
    """Grouped RMSE on the original data scale."""
    y = windows.y
    if standardizer is not None:
        preds, y = standardizer.inverse(preds), standardizer.inverse(y)
    n = y.shape[0]
    online = np.setdiff1d(np.arange(n), offline)
    per_window = y.shape[1]
    sq = (preds - y) ** 2
    per_step = np.sqrt(sq.mean(axis=(0, 1, 3))).tolist()
    return EvalReport(
        rmse_all=rmse(preds, y, range(n)),
        rmse_online=rmse(preds, y, online) if online.size else None,
        rmse_offline=rmse(preds, y, offline) if offline.size else None,
        n_online=int(online.size * per_window),
        n_offline=int(offline.size * per_window),
        offline_ids=offline.tolist(),
        per_step=per_step,
        config=dict(config or {}),
    )


def evaluate(models, server, windows: SplitWindows, schedule, standardizer=None,
             transport: Transport | None = None, config: dict | None = None) -> EvalReport:
    preds, offline = infer_pass(models, server, windows, schedule, transport)
    return report(preds, windows, offline, standardizer, config)


SWEEP_FIELDS = ["mr", "offline_rate", "seed", "rmse_online", "rmse_offline", "rmse_all"]


@dataclass
class SweepCell:
    mr: float
    offline_rate: float
    seed: int
    report: EvalReport

    def row(self) -> dict:
        r = self.report
        return {"mr": self.mr, "offline_rate": self.offline_rate, "seed": self.seed,
                "rmse_online": r.rmse_online, "rmse_offline": r.rmse_offline, "rmse_all": r.rmse_all}


def sweep(
    models_for: Callable[[float, int], tuple[Sequence[ClientModel], ServerModel]],
    mrs: Sequence[float],
    offline_rates: Sequence[float],
    seeds: Sequence[int],
    windows: SplitWindows,
    standardizer: Standardizer | None = None,
    csv_path=None,
) -> list[SweepCell]:
    """One report per (mask rate, offline rate, seed).

    ``models_for(mr, seed)`` trains or loads the models; each is evaluated
    under every offline rate with the schedule seeded by ``seed``.
    """
    if not mrs or not offline_rates or not seeds:
        raise ValueError("sweep grid is empty")
    cells = []
    for mr in mrs:
        for seed in seeds:
            models, server = models_for(mr, seed)
            for rate in offline_rates:
                rep = evaluate(models, server, windows, OfflineSchedule(rate=rate, seed=seed), standardizer,
                               config={"mr": mr, "offline_rate": rate, "seed": seed})
                cells.append(SweepCell(mr, rate, seed, rep))
    if csv_path is not None:
        write_sweep_csv(csv_path, cells)
    return cells


def write_sweep_csv(path, cells: Sequence[SweepCell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for c in cells:
            w.writerow({k: ("" if v is None else v) for k, v in c.row().items()})


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in SWEEP_FIELDS:
            r[k] = None if r[k] == "" else (int(r[k]) if k == "seed" else float(r[k]))
    return rows


def monotone_violations(rows: Sequence[dict]) -> list[tuple[float, float, float]]:
    """(mr, lower rate, higher rate) where seed-mean online RMSE drops as the offline rate rises."""
    by: dict[tuple[float, float], list[float]] = {}
    for r in rows:
        if r["rmse_online"] is not None and not math.isnan(r["rmse_online"]):
            by.setdefault((r["mr"], r["offline_rate"]), []).append(r["rmse_online"])
    bad = []
    for mr in sorted({k[0] for k in by}):
        rates = sorted(k[1] for k in by if k[0] == mr)
        means = [float(np.mean(by[(mr, q)])) for q in rates]
        for (q0, m0), (q1, m1) in zip(zip(rates, means), zip(rates[1:], means[1:])):
            if m1 < m0:
                bad.append((mr, q0, q1))
    return bad
