"""Command-line driver: synth-data, build-graph, train, infer, eval, sweep, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as config_mod
from .client import ClientModel
from .data import SplitSpec, Standardizer, load_traces, make_windows, synth_dataset, write_traces
from .errors import ConfigError
from .evaluation import (
    OfflineSchedule,
    evaluate,
    infer_pass,
    monotone_violations,
    read_sweep_csv,
    sweep,
)
from .federation import FedConfig, run_training
from .graph import MultiGraph, build_client_graph, build_multigraph, read_distances, write_distances
from .server import ServerModel

log = logging.getLogger("m3fgm")

CLIENT_CKPT = "clients.bin"
SERVER_CKPT = "server.bin"
GRAPH_FILE = "graph.json"
SCALER_FILE = "standardizer.json"
METRICS_FILE = "metrics.ndjson"


def _out_dir(cfg) -> Path:
    p = Path(cfg.output.dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(cfg, out: Path, command: str) -> Path:
    """Persist the merged config; one file per command so eval never hides the training config."""
    path = out / f"config.{command}.ini"
    cfg.save(path)
    return path


def _need_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} file configured (set data.{what})")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def fed_config(cfg, mr: float | None = None, seed: int | None = None) -> FedConfig:
    t, m = cfg.train, cfg.model
    return FedConfig(
        rounds_global=t.R_g, rounds_client=t.R_c, rounds_server=t.R_s,
        mr=t.mr if mr is None else mr, lr=t.lr, seed=t.seed if seed is None else seed,
        batch_size=t.batch, hidden=m.H, spatial=m.H_s, layers=m.layers,
        weighted_fedavg=t.weighted_fedavg, eval_every=t.eval_every,
    )


def _graph(cfg, node_ids) -> MultiGraph:
    dist = read_distances(_need_file(cfg.data.distances, "distances"))
    g = build_client_graph(dist, kappa=cfg.graph.kappa, node_ids=node_ids)
    return build_multigraph(g, m=cfg.graph.M or None, seed=cfg.graph.seed, kappa=cfg.graph.kappa)


def _prepare(cfg):
    """Traces, graph, fitted standardizer and windows for every split."""
    table = load_traces(_need_file(cfg.data.traces, "traces"))
    if table.values.shape[1] < 2:
        raise ConfigError("need at least two sensors")
    if cfg.model.D != 1:
        raise ConfigError("trace CSVs carry one feature per sensor; model.D must be 1")
    graph = _graph(cfg, table.sensor_ids)
    split = SplitSpec(*cfg.data.split)
    lo, hi = split.ranges(table.values.shape[0])["train"]
    scaler = Standardizer.fit(table.values[lo:hi], per_sensor=cfg.data.per_sensor)
    windows = make_windows(scaler.transform(table.values), cfg.data.S, cfg.data.T, split)
    return table, graph, scaler, windows


def _save_scaler(path: Path, s: Standardizer) -> None:
    path.write_text(json.dumps({"mean": np.atleast_1d(s.mean).tolist(), "std": np.atleast_1d(s.std).tolist(),
                                "per_sensor": bool(s.mean.ndim)}))


def _load_scaler(path: Path) -> Standardizer:
    obj = json.loads(path.read_text())
    mean, std = np.array(obj["mean"]), np.array(obj["std"])
    if not obj["per_sensor"]:
        mean, std = np.array(mean[0]), np.array(std[0])
    return Standardizer(mean, std)


def _load_models(cfg, out: Path, n: int):
    for name in (CLIENT_CKPT, SERVER_CKPT, GRAPH_FILE, SCALER_FILE):
        if not (out / name).is_file():
            raise ConfigError(f"missing {out / name}; run `train` first")
    graph = MultiGraph.load(out / GRAPH_FILE)
    if graph.n != n:
        raise ConfigError(f"checkpoint graph has {graph.n} clients, traces have {n}")
    theta_c = checkpoint.load(out / CLIENT_CKPT)
    models = []
    for _ in range(n):
        m = ClientModel.init(cfg.model.D, cfg.model.H, cfg.model.H_s, cfg.model.layers, rng=0)
        m.load_state_dict(theta_c)
        models.append(m)
    server = ServerModel.init(graph, cfg.model.H, cfg.train.mr, np.random.default_rng(0))
    server.load_state_dict(checkpoint.load(out / SERVER_CKPT))
    return models, server, graph, _load_scaler(out / SCALER_FILE)


def _schedule(cfg, seed: int) -> OfflineSchedule:
    if cfg.eval.offline_ids:
        return OfflineSchedule(offline_ids=cfg.eval.offline_ids)
    return OfflineSchedule(rate=cfg.eval.offline_rate or 0.0, seed=seed)


def cmd_synth(cfg) -> int:
    out = _out_dir(cfg)
    s = cfg.synth
    ds = synth_dataset(s.n_clients, s.length, s.clusters, s.noise, s.seed, s.max_lag)
    write_traces(out / "traces.csv", ds.traces)
    write_distances(out / "distances.csv", ds.distances)
    _echo(cfg, out, "synth-data")
    print(f"wrote {out / 'traces.csv'} and {out / 'distances.csv'}")
    return 0


def cmd_graph(cfg) -> int:
    out = _out_dir(cfg)
    node_ids = load_traces(cfg.data.traces).sensor_ids if cfg.data.traces and Path(cfg.data.traces).is_file() else None
    g = _graph(cfg, node_ids)
    g.save(out / GRAPH_FILE)
    _echo(cfg, out, "build-graph")
    print(json.dumps({"M": g.m, "labels": g.assignment.label.tolist()}))
    return 0


def cmd_train(cfg) -> int:
    _, graph, scaler, windows = _prepare(cfg)
    out = _out_dir(cfg)
    _echo(cfg, out, "train")
    fc = fed_config(cfg)
    with open(out / METRICS_FILE, "w") as fh:
        def on_round(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        res = run_training(windows["train"], graph, fc, val=windows["val"], standardizer=scaler, on_round=on_round)
    checkpoint.save(out / CLIENT_CKPT, res.theta_c)
    checkpoint.save(out / SERVER_CKPT, res.theta_server)
    graph.save(out / GRAPH_FILE)
    _save_scaler(out / SCALER_FILE, scaler)
    print(f"trained {fc.rounds_global} rounds; checkpoints in {out}")
    return 0


def cmd_infer(cfg) -> int:
    out = _out_dir(cfg)
    table, _, _, windows = _prepare(cfg)
    models, server, _, scaler = _load_models(cfg, out, table.values.shape[1])
    w = windows[cfg.eval.split]
    preds, offline = infer_pass(models, server, w, _schedule(cfg, cfg.eval.seeds[0]))
    np.savez(out / "predictions.npz", preds=scaler.inverse(preds), targets=scaler.inverse(w.y),
             t=w.t, offline=offline)
    _echo(cfg, out, "infer")
    print(f"wrote {out / 'predictions.npz'}")
    return 0


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    table, _, _, windows = _prepare(cfg)
    models, server, _, scaler = _load_models(cfg, out, table.values.shape[1])
    rep = evaluate(models, server, windows[cfg.eval.split], _schedule(cfg, cfg.eval.seeds[0]), scaler,
                   config=cfg.as_dict())
    (out / "eval.json").write_text(rep.dumps())
    _echo(cfg, out, "eval")
    print(json.dumps({k: v for k, v in rep.to_json().items() if k != "config"}, sort_keys=True))
    return 0


def cmd_sweep(cfg) -> int:
    _, graph, scaler, windows = _prepare(cfg)
    out = _out_dir(cfg)
    _echo(cfg, out, "sweep")

    def models_for(mr, seed):
        log.info("training mr=%s seed=%s", mr, seed)
        res = run_training(windows["train"], graph, fed_config(cfg, mr=mr, seed=seed))
        return res.state.clients, res.state.server

    cells = sweep(models_for, cfg.eval.mrs, cfg.eval.offline_rates, cfg.eval.seeds, windows[cfg.eval.split],
                  scaler, csv_path=out / "sweep.csv")
    print(f"wrote {len(cells)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_report(cfg) -> int:
    out = Path(cfg.output.dir)
    shown = False
    if (out / "eval.json").is_file():
        rep = json.loads((out / "eval.json").read_text())
        print("eval:", " ".join(f"{k}={rep[k]:.4f}" for k in ("rmse_all", "rmse_online", "rmse_offline") if k in rep))
        shown = True
    if (out / "sweep.csv").is_file():
        rows = read_sweep_csv(out / "sweep.csv")
        grid: dict[tuple[float, float], list[float]] = {}
        for r in rows:
            if r["rmse_online"] is not None:
                grid.setdefault((r["mr"], r["offline_rate"]), []).append(r["rmse_online"])
        rates = sorted({k[1] for k in grid})
        print("online RMSE (seed mean)")
        print("mr    " + " ".join(f"{q:>8.2f}" for q in rates))
        for mr in sorted({k[0] for k in grid}):
            cells = [f"{np.mean(grid[(mr, q)]):8.4f}" if (mr, q) in grid else " " * 8 for q in rates]
            print(f"{mr:<5.2f} " + " ".join(cells))
        bad = monotone_violations(rows)
        print(f"monotonicity violations: {len(bad)}")
        shown = True
    if not shown:
        raise ConfigError(f"nothing to report in {out} (no eval.json or sweep.csv)")
    return 0


COMMANDS = {
    "synth-data": (cmd_synth, "generate a synthetic clustered trace set"),
    "build-graph": (cmd_graph, "build the client, cluster and cross-level graphs"),
    "train": (cmd_train, "run federated training and write checkpoints"),
    "infer": (cmd_infer, "write forecasts from trained checkpoints"),
    "eval": (cmd_eval, "grouped RMSE report for one offline schedule"),
    "sweep": (cmd_sweep, "mask-rate x offline-rate grid to CSV"),
    "report": (cmd_report, "summarize eval.json / sweep.csv"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: none, built-in defaults)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for name, f in config_mod.flag_names():
        common.add_argument(f"--{name}", dest=name, default=None, metavar="V",
                            help=f"{f.help} (default: {config_mod._fmt(f.default) or 'unset'})")
    p = argparse.ArgumentParser(prog="m3fgm", description="split federated traffic forecasting simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, desc) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=desc, description=desc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {name: getattr(args, name) for name, _ in config_mod.flag_names() if getattr(args, name) is not None}
    try:
        cfg = config_mod.load(args.config, overrides)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
