"""Operator entry point: pattern extraction, training, evaluation, forecasting, synth.

Configuration comes from flat ``key = value`` files plus CLI-flag
overrides; precedence is CLI flag, then the PMMN_SEED environment variable
(seed only), then the config file, then built-in defaults. Every command
exits 0 on success and nonzero with a single ``error: ...`` line otherwise.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .graph import build_adjacency, load_distance_matrix, write_distances_csv
from .model import ForecastModel, ModelConfig
from .patterns import PatternSet, cluster_patterns, cosine_distances, sample_windows
from .synth import generate_synthetic, write_dataset_csv
from .train import (
    REPORT_HORIZON_MINUTES,
    SeriesDataset,
    evaluate,
    historical_average,
    train_loop,
)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; keys use underscores."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


class Options:
    """Merges CLI flags, the PMMN_SEED env var and the config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        cfg_path = self.args.get("config")
        self.file = read_config_file(cfg_path) if cfg_path else {}

    def get(self, key: str, default=None, cast=None):
        value = self.args.get(key)
        if value is None:
            raw = self.file.get(key)
            if raw is None:
                return default
            value = raw
        if cast is bool and isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return cast(value) if cast is not None and value is not None else value

    def seed(self, default: int = 0) -> int:
        if self.args.get("seed") is not None:
            return int(self.args["seed"])
        env = os.environ.get("PMMN_SEED")
        if env is not None:
            return int(env)
        if "seed" in self.file:
            return int(self.file["seed"])
        return default

    def require(self, key: str, cast=None):
        value = self.get(key, cast=cast)
        if value is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")
        return value


def _load_dataset(opts: Options) -> SeriesDataset:
    path = opts.require("dataset")
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return SeriesDataset.from_csv(path)


def _load_graph(opts: Options, node_ids):
    path = opts.require("distances")
    if not Path(path).exists():
        raise FileNotFoundError(f"distance file not found: {path}")
    dist = load_distance_matrix(path, node_ids)
    sigma = opts.get("sigma", cast=float)
    kappa = opts.get("kappa", default=0.1, cast=float)
    return build_adjacency(node_ids, dist, kappa=kappa, sigma=sigma)


def _load_bank(opts: Options) -> PatternSet:
    path = opts.require("bank")
    if not Path(path).exists():
        raise FileNotFoundError(f"pattern bank not found: {path}")
    return PatternSet.load(path)


def _model_config(opts: Options, bank: PatternSet, seed: int) -> ModelConfig:
    # the input window must match the bank's pattern length; default to it
    return ModelConfig(
        window_len=opts.get("window_len", bank.window_len, int),
        horizon=opts.get("horizon", 18, int),
        hidden_dim=opts.get("hidden_dim", 128, int),
        num_layers=opts.get("num_layers", 3, int),
        num_neighbors=opts.get("k", 3, int),
        num_patterns=bank.count,
        num_heads=opts.get("num_heads", 4, int),
        node_embed_dim=opts.get("node_embed_dim", 10, int),
        seed=seed,
        simple_mem=bool(opts.get("simple_mem", False, bool)),
    )


# ---- subcommands ---------------------------------------------------------------


def cmd_extract_patterns(args) -> int:
    opts = Options(args)
    dataset = _load_dataset(opts)
    window_len = opts.get("window_len", 18, int)
    requested = opts.get("num_patterns", 1000, int)
    seed = opts.seed()
    raw = sample_windows(dataset.train_profiles(), window_len)
    n_patterns = requested
    if raw.shape[0] < requested:
        print(
            f"warning: only {raw.shape[0]} distinct raw patterns; "
            f"clamping bank size from {requested}",
            file=sys.stderr,
        )
        n_patterns = raw.shape[0]
    patterns, info = cluster_patterns(
        raw, n_patterns, max_iter=opts.get("max_iter", 100, int), seed=seed
    )
    out = opts.require("out")
    patterns.save(out)
    csv_path = opts.get("export_csv")
    if csv_path:
        patterns.to_csv(csv_path)
    hist_path = opts.get("histogram")
    if hist_path:
        _write_similarity_histogram(hist_path, raw, patterns)
    print(f"raw={raw.shape[0]} patterns={patterns.count} inertia={info.inertia!r} hash={patterns.content_hash}")
    return 0


def _write_similarity_histogram(path, raw: np.ndarray, patterns: PatternSet) -> None:
    """Cosine similarity of the first raw pattern against the raw pool and the keys."""
    ref = raw[0]
    sim_raw = 1.0 - cosine_distances(ref[None, :], PatternSet.from_values(raw))[0]
    sim_keys = 1.0 - cosine_distances(ref[None, :], patterns)[0]
    edges = np.linspace(-1.0, 1.0, 41)
    count_raw, _ = np.histogram(sim_raw, bins=edges)
    count_keys, _ = np.histogram(sim_keys, bins=edges)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("bin_lo,bin_hi,count_raw,count_keys\n")
        for i in range(len(edges) - 1):
            fh.write(f"{edges[i]:.3f},{edges[i + 1]:.3f},{count_raw[i]},{count_keys[i]}\n")


def cmd_train(args) -> int:
    opts = Options(args)
    dataset = _load_dataset(opts)
    bank = _load_bank(opts)
    graph = _load_graph(opts, dataset.node_ids)
    seed = opts.seed()
    out_dir = Path(opts.require("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.csv"
    ckpt_path = out_dir / "checkpoint.pmmn"

    resume = opts.get("resume")
    start_epoch = 0
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.pattern_hash != bank.content_hash:
            raise ValueError(
                "pattern bank hash mismatch: resumed checkpoint was trained against a different bank"
            )
        model = restore_model(ckpt, graph, bank)
        start_epoch = int(ckpt.extra.get("epoch", 0))
    else:
        model = ForecastModel(_model_config(opts, bank, seed), graph, bank)

    result = train_loop(
        model,
        dataset,
        epochs=opts.get("epochs", 100, int),
        batch_size=opts.get("batch_size", 16, int),
        lr=opts.get("lr", 0.001, float),
        patience=opts.get("patience", 15, int),
        seed=seed,
        start_epoch=start_epoch,
        history_path=history_path,
        append_history=bool(resume),
        log=print,
    )
    last_epoch = result.history[-1]["epoch"] if result.history else start_epoch
    save_checkpoint(
        ckpt_path,
        model,
        extra={
            "epoch": last_epoch,
            "best_epoch": result.best_epoch,
            "best_val_mae": result.best_val_mae,
            "mean": dataset.mean,
            "std": dataset.std,
        },
    )
    print(f"checkpoint={ckpt_path} best_epoch={result.best_epoch} best_val_mae={result.best_val_mae!r}")
    return 0


def _report_horizons(horizon_steps: int, opts: Options) -> list[int]:
    available = 5 * horizon_steps
    requested = opts.get("horizons")
    if requested:
        minutes = [int(x) for x in str(requested).split(",")]
        for m in minutes:
            if m > available or m % 5 != 0:
                raise ValueError(f"horizon {m} min is beyond the model horizon ({available} min)")
        return minutes
    return [m for m in REPORT_HORIZON_MINUTES if m <= available]


def cmd_evaluate(args) -> int:
    opts = Options(args)
    dataset = _load_dataset(opts)
    split = opts.get("split", "test")
    ha_only = bool(opts.get("ha_only", False, bool))
    window_len = opts.get("window_len", 18, int)
    horizon = opts.get("horizon", 18, int)

    model = None
    if not ha_only:
        bank = _load_bank(opts)
        graph = _load_graph(opts, dataset.node_ids)
        ckpt_file = opts.require("checkpoint")
        model = restore_model(load_checkpoint(ckpt_file), graph, bank)
        window_len = model.config.window_len
        horizon = model.config.horizon

    ha = historical_average(dataset, split, window_len=window_len, horizon=horizon)
    report = evaluate(model, dataset, split) if model is not None else None
    minutes = _report_horizons(horizon, opts)

    lines = ["horizon_min,mae,mape,rmse,ha_mae,ha_mape,ha_rmse"]
    for m in minutes:
        ha_mae, ha_mape, ha_rmse = ha.row(m)
        if report is not None:
            mae, mape, rmse = report.row(m)
            lines.append(f"{m},{mae!r},{mape!r},{rmse!r},{ha_mae!r},{ha_mape!r},{ha_rmse!r}")
        else:
            lines.append(f"{m},,,,{ha_mae!r},{ha_mape!r},{ha_rmse!r}")
    out = opts.get("out")
    if out:
        Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_forecast(args) -> int:
    opts = Options(args)
    dataset = _load_dataset(opts)
    bank = _load_bank(opts)
    graph = _load_graph(opts, dataset.node_ids)
    ckpt = load_checkpoint(opts.require("checkpoint"))
    model = restore_model(ckpt, graph, bank)
    t_in, t_out = model.config.window_len, model.config.horizon

    origin = opts.get("origin")
    if origin:
        stamp = np.datetime64(str(origin), "s")
        matches = np.flatnonzero(dataset.timestamps == stamp)
        if matches.size == 0:
            raise ValueError(f"origin timestamp {origin} not found in dataset")
        idx = int(matches[0])
    else:
        idx = dataset.num_steps - 1 - t_out
    if idx < t_in - 1:
        raise ValueError("not enough history before the forecast origin")

    window = dataset.filled[idx - t_in + 1 : idx + 1].T  # (N, T')
    slots = dataset.slots[idx - t_in + 1 : idx + 1]
    preds = model.forecast(window, slots, dataset.mean, dataset.std)

    origin_iso = np.datetime_as_string(dataset.timestamps[idx], unit="s")
    lines = ["node_id,origin_timestamp,horizon_min,y_pred,y_true"]
    for n, node in enumerate(dataset.node_ids):
        for h in range(t_out):
            t = idx + 1 + h
            truth = ""
            if t < dataset.num_steps and dataset.observed[t, n]:
                truth = repr(float(dataset.raw[t, n]))
            lines.append(f"{node},{origin_iso},{5 * (h + 1)},{float(preds[n, h])!r},{truth}")
    out = opts.get("out")
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"forecast origin={origin_iso} nodes={dataset.num_nodes} horizon_steps={t_out}",
          file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    opts = Options(args)
    out_dir = Path(opts.require("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    result = generate_synthetic(
        num_nodes=opts.get("nodes", 10, int),
        days=opts.get("days", 60, int),
        topology=opts.get("topology", "ring"),
        regimes=opts.get("regimes", 3, int),
        noise=opts.get("noise", 2.0, float),
        event_rate=opts.get("event_rate", 0.02, float),
        seed=opts.seed(),
    )
    write_dataset_csv(out_dir / "dataset.csv", result)
    write_distances_csv(out_dir / "distances.csv", result.node_ids, result.distances)
    (out_dir / "nodes.txt").write_text("\n".join(result.node_ids) + "\n", encoding="utf-8")
    print(f"dataset={out_dir / 'dataset.csv'} distances={out_dir / 'distances.csv'} "
          f"steps={result.values.shape[0]} nodes={len(result.node_ids)}")
    return 0


# ---- wiring ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides PMMN_SEED and config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmmemnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-patterns", help="build the pattern key bank")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--num-patterns", dest="num_patterns", type=int)
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--histogram", help="similarity histogram CSV path")
    p.add_argument("--export-csv", dest="export_csv", help="pattern CSV export path")
    p.set_defaults(func=cmd_extract_patterns)

    p = sub.add_parser("train", help="train the forecaster")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--distances")
    p.add_argument("--bank")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--num-heads", dest="num_heads", type=int)
    p.add_argument("--node-embed-dim", dest="node_embed_dim", type=int)
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--simple-mem", dest="simple_mem", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-horizon metrics vs the HA baseline")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--distances")
    p.add_argument("--bank")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--horizons", help="comma-separated minutes, e.g. 15,30,90")
    p.add_argument("--ha-only", dest="ha_only", action="store_const", const=True)
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", help="forecast from one window of history")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--distances")
    p.add_argument("--bank")
    p.add_argument("--checkpoint")
    p.add_argument("--origin", help="ISO-8601 origin timestamp (default: last full window)")
    p.add_argument("--out", help="forecast CSV path (default: stdout)")
    p.add_argument("--kappa", type=float)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("synth", help="generate a synthetic dataset + distances")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--nodes", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--topology", choices=("ring", "grid"))
    p.add_argument("--regimes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--event-rate", dest="event_rate", type=float)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
