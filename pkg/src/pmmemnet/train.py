"""Data preparation, the training loop, metrics and the HA baseline.

Datasets are node-by-time speed matrices at 5-minute resolution. Zeros and
NaNs count as missing; missing entries are filled from each node's
time-of-day training average, then the series is z-scored with training
statistics. Splits are contiguous 70/10/20 in time and windows never cross
a split boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .model import ForecastModel
from .numcore import Tensor, absval, adam_step, no_grad, tsum
from .numcore.tensor import finite_checks
from .patterns import SLOTS_PER_DAY, DailyProfiles, compute_daily_profiles, zero_based
from .gcmem import match_weights
from .patterns import match_many

SPLIT_NAMES = ("train", "val", "test")
REPORT_HORIZON_MINUTES = (15, 30, 45, 60, 75, 90)
MAPE_FLOOR = 1.0  # speed units; targets below this are excluded from MAPE


# ---- normalization -----------------------------------------------------------


def zscore(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std == 0:
        raise ValueError("z-score std must be nonzero")
    return (np.asarray(x, dtype=np.float64) - mean) / std


def unzscore(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * std + mean


# ---- missing-value fill ---------------------------------------------------------


def fill_missing(
    values: np.ndarray,
    observed: np.ndarray,
    slots: np.ndarray,
    profiles: DailyProfiles,
) -> np.ndarray:
    """Replace missing entries with the node's time-of-day training average.

    Slot averages that were themselves unobserved are already interpolated
    inside the profiles, so every missing entry gets a value. Observed
    entries pass through unchanged.
    """
    values = np.asarray(values, dtype=np.float64)
    fill = profiles.means[:, slots].T  # (T, N)
    return np.where(observed, values, fill)


# ---- the dataset ------------------------------------------------------------------


@dataclass
class SeriesDataset:
    """Speed series plus everything training needs derived from it."""

    node_ids: tuple[str, ...]
    timestamps: np.ndarray  # (T,) datetime64[s]
    raw: np.ndarray  # (T, N) as loaded, NaN where unparseable
    observed: np.ndarray  # (T, N) bool, False for NaN or zero sentinels
    slots: np.ndarray  # (T,) time-of-day slot per row
    filled: np.ndarray  # (T, N) missing entries filled from train profiles
    normalized: np.ndarray | None  # (T, N) z-scored; None when the train split is constant
    mean: float
    std: float
    profiles: DailyProfiles  # computed on the training split only
    train_end: int
    val_end: int

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_steps(self) -> int:
        return self.raw.shape[0]

    def split_range(self, split: str) -> tuple[int, int]:
        if split == "train":
            return 0, self.train_end
        if split == "val":
            return self.train_end, self.val_end
        if split == "test":
            return self.val_end, self.num_steps
        raise ValueError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")

    def train_profiles(self) -> DailyProfiles:
        return self.profiles

    @staticmethod
    def from_arrays(values: np.ndarray, timestamps, node_ids) -> "SeriesDataset":
        values = np.asarray(values, dtype=np.float64)
        ts = np.asarray(timestamps, dtype="datetime64[s]")
        if values.ndim != 2 or values.shape[0] != ts.shape[0]:
            raise ValueError("values must be (num_steps, num_nodes) aligned with timestamps")
        seconds = (ts - ts.astype("datetime64[D]")).astype("timedelta64[s]").astype(np.int64)
        slots = (seconds // 300) % SLOTS_PER_DAY
        observed = np.isfinite(values) & (values != 0.0)

        n_steps = values.shape[0]
        train_end = int(n_steps * 0.7)
        val_end = int(n_steps * 0.8)
        if train_end < 1:
            raise ValueError("dataset too short to carve a training split")

        profiles = compute_daily_profiles(
            values[:train_end], slots[:train_end], observed[:train_end], node_ids
        )
        filled = fill_missing(values, observed, slots, profiles)
        mean = float(filled[:train_end].mean())
        std = float(filled[:train_end].std())
        # A constant training split cannot be z-scored; pattern extraction
        # still works, so defer the error until windows are requested.
        normalized = zscore(filled, mean, std) if std > 0 else None
        return SeriesDataset(
            node_ids=tuple(str(n) for n in node_ids),
            timestamps=ts,
            raw=values,
            observed=observed,
            slots=slots.astype(np.intp),
            filled=filled,
            normalized=normalized,
            mean=mean,
            std=std,
            profiles=profiles,
            train_end=train_end,
            val_end=val_end,
        )

    @staticmethod
    def from_csv(path) -> "SeriesDataset":
        """First column: ISO-8601 timestamp. Remaining columns: one per node id.

        Empty cells or NaN tokens mark missing values; zeros are treated as
        missing sentinels as well.
        """
        frame = pd.read_csv(path)
        if frame.shape[1] < 2:
            raise ValueError("dataset CSV needs a timestamp column plus node columns")
        ts = pd.to_datetime(frame.iloc[:, 0]).to_numpy().astype("datetime64[s]")
        node_ids = [str(c) for c in frame.columns[1:]]
        values = frame.iloc[:, 1:].to_numpy(dtype=np.float64)
        return SeriesDataset.from_arrays(values, ts, node_ids)


# ---- windows ------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Stride-1 (input, target) window pairs within one split.

    Arrays are views into the dataset where possible. ``origins`` hold the
    global row index of each window's first input step.
    """

    origins: np.ndarray  # (W,)
    inputs_raw: np.ndarray  # (W, N, T') filled speed units
    inputs_norm: np.ndarray  # (W, N, T')
    targets_raw: np.ndarray  # (W, N, T)
    targets_norm: np.ndarray  # (W, N, T)
    target_observed: np.ndarray  # (W, N, T)
    slots: np.ndarray  # (W, T') input time-of-day indices
    target_slots: np.ndarray  # (W, T)
    match_ids: np.ndarray | None = None
    match_dists: np.ndarray | None = None
    match_wts: np.ndarray | None = None
    residuals: np.ndarray | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]


def make_windows(dataset: SeriesDataset, split: str, window_len: int, horizon: int) -> WindowSet:
    """All stride-1 windows of a split; empty when the split is too short."""
    if dataset.normalized is None:
        raise ValueError("training split is constant; z-scoring impossible")
    lo, hi = dataset.split_range(split)
    span = window_len + horizon
    length = hi - lo
    n = dataset.num_nodes
    if length < span:
        return WindowSet(
            origins=np.empty(0, dtype=np.intp),
            inputs_raw=np.empty((0, n, window_len)),
            inputs_norm=np.empty((0, n, window_len)),
            targets_raw=np.empty((0, n, horizon)),
            targets_norm=np.empty((0, n, horizon)),
            target_observed=np.empty((0, n, horizon), dtype=bool),
            slots=np.empty((0, window_len), dtype=np.intp),
            target_slots=np.empty((0, horizon), dtype=np.intp),
        )
    origins = np.arange(lo, hi - span + 1, dtype=np.intp)
    assert origins[-1] + span <= hi, "window would cross the split boundary"

    def window(series):  # (T, N) -> (W, N, span)
        sv = sliding_window_view(series[lo:hi], span, axis=0)  # (W, N, span)
        return sv

    filled = window(dataset.filled)
    norm = window(dataset.normalized)
    obs = window(dataset.observed)
    slot_view = sliding_window_view(dataset.slots[lo:hi], span)  # (W, span)
    return WindowSet(
        origins=origins,
        inputs_raw=filled[:, :, :window_len],
        inputs_norm=norm[:, :, :window_len],
        targets_raw=filled[:, :, window_len:],
        targets_norm=norm[:, :, window_len:],
        target_observed=obs[:, :, window_len:],
        slots=slot_view[:, :window_len],
        target_slots=slot_view[:, window_len:],
    )


def iter_windows(dataset: SeriesDataset, split: str, window_len: int, horizon: int):
    """Yield (input (N, T'), target (N, T), input slot indices) per origin."""
    ws = make_windows(dataset, split, window_len, horizon)
    for i in range(len(ws)):
        yield ws.inputs_raw[i], ws.targets_raw[i], ws.slots[i]


def attach_matches(ws: WindowSet, model: ForecastModel) -> None:
    """Precompute k-NN matches for every window in one vectorized scan."""
    if len(ws) == 0:
        ws.match_ids = np.empty((0, 0, 0), dtype=np.intp)
        return
    w, n, t_in = ws.inputs_raw.shape
    flat = np.ascontiguousarray(ws.inputs_raw).reshape(w * n, t_in)
    ids, dists = match_many(flat, model.patterns, model.config.num_neighbors)
    ws.match_ids = ids.reshape(w, n, -1)
    ws.match_dists = dists.reshape(w, n, -1)
    ws.match_wts = match_weights(ws.match_dists)
    ws.residuals = (zero_based(flat) - model.patterns.values[ids[:, 0]]).reshape(w, n, t_in)


# ---- loss and metrics ------------------------------------------------------------------


def mae_loss(pred: Tensor, target: np.ndarray, observed: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over observed target entries (normalized units)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if observed is None:
        observed = np.ones(target.shape, dtype=bool)
    count = int(observed.sum())
    if count == 0:
        raise ValueError("no observed target entries to score")
    err = absval(pred - target) * observed.astype(np.float64)
    return tsum(err) * (1.0 / count)


@dataclass
class MetricReport:
    """MAE / MAPE(%) / RMSE (speed units) per forecast horizon."""

    horizon_minutes: tuple[int, ...]
    mae: dict[int, float] = field(default_factory=dict)
    mape: dict[int, float] = field(default_factory=dict)
    rmse: dict[int, float] = field(default_factory=dict)

    def row(self, minutes: int) -> tuple[float, float, float]:
        return self.mae[minutes], self.mape[minutes], self.rmse[minutes]


def metrics_by_horizon(
    preds_raw: np.ndarray, targets_raw: np.ndarray, observed: np.ndarray
) -> MetricReport:
    """Score (W, N, T) raw-unit predictions per horizon over observed targets."""
    horizon = preds_raw.shape[-1]
    minutes = tuple(5 * (h + 1) for h in range(horizon))
    report = MetricReport(horizon_minutes=minutes)
    for h in range(horizon):
        m = observed[..., h]
        err = preds_raw[..., h][m] - targets_raw[..., h][m]
        y = targets_raw[..., h][m]
        if err.size == 0:
            report.mae[minutes[h]] = float("nan")
            report.mape[minutes[h]] = float("nan")
            report.rmse[minutes[h]] = float("nan")
            continue
        report.mae[minutes[h]] = float(np.abs(err).mean())
        report.rmse[minutes[h]] = float(np.sqrt((err ** 2).mean()))
        big = np.abs(y) >= MAPE_FLOOR
        report.mape[minutes[h]] = (
            float(100.0 * (np.abs(err[big]) / np.abs(y[big])).mean()) if big.any() else float("nan")
        )
    return report


def _predict_windows(model: ForecastModel, ws: WindowSet, batch_size: int = 256) -> np.ndarray:
    """Normalized model predictions (W, N, T) over a window set."""
    if ws.match_ids is None:
        attach_matches(ws, model)
    w = len(ws)
    horizon = ws.targets_norm.shape[-1]
    out = np.empty((w, model.num_nodes, horizon))
    with no_grad():
        for lo in range(0, w, batch_size):
            sl = slice(lo, min(lo + batch_size, w))
            preds = model.forward_batch(
                ws.slots[sl],
                ws.match_ids[sl],
                ws.match_wts[sl],
                ws.residuals[sl],
                ws.inputs_norm[sl][:, :, -1:],
                horizon=horizon,
                training=False,
            )
            out[sl] = preds.data
    return out


def evaluate(model: ForecastModel, dataset: SeriesDataset, split: str = "test") -> MetricReport:
    """Per-horizon metrics in speed units on a split's windows."""
    ws = make_windows(dataset, split, model.config.window_len, model.config.horizon)
    if len(ws) == 0:
        raise ValueError(f"split {split!r} too short for any window")
    preds_norm = _predict_windows(model, ws)
    preds_raw = unzscore(preds_norm, dataset.mean, dataset.std)
    return metrics_by_horizon(preds_raw, ws.targets_raw, ws.target_observed)


def historical_average(
    dataset: SeriesDataset, split: str = "test", window_len: int = 18, horizon: int = 18
) -> MetricReport:
    """Baseline: predict each node's training time-of-day average."""
    ws = make_windows(dataset, split, window_len, horizon)
    if len(ws) == 0:
        raise ValueError(f"split {split!r} too short for any window")
    preds = dataset.profiles.means[:, ws.target_slots]  # (N, W, T)
    preds = np.moveaxis(preds, 0, 1)  # (W, N, T)
    return metrics_by_horizon(preds, ws.targets_raw, ws.target_observed)


# ---- training loop --------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_val_mae: float
    best_epoch: int


def train_loop(
    model: ForecastModel,
    dataset: SeriesDataset,
    epochs: int,
    batch_size: int = 16,
    lr: float = 0.001,
    patience: int = 15,
    seed: int | None = None,
    start_epoch: int = 0,
    history_path=None,
    append_history: bool = False,
    log=None,
) -> TrainResult:
    """Shuffled mini-batch Adam training with best-validation early stopping.

    A batch is a set of window origins; every origin covers all nodes. The
    model is left holding the best-validation parameters when training ends.
    Raises on divergence, naming the offending batch.
    """
    cfg = model.config
    train_ws = make_windows(dataset, "train", cfg.window_len, cfg.horizon)
    val_ws = make_windows(dataset, "val", cfg.window_len, cfg.horizon)
    if len(train_ws) == 0:
        raise ValueError("training split too short for any window")
    attach_matches(train_ws, model)
    if len(val_ws):
        attach_matches(val_ws, model)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    history: list[dict] = []
    best_val = float("inf")
    best_epoch = -1
    best_state = None
    stale = 0

    writer = None
    if history_path is not None:
        mode = "a" if append_history else "w"
        writer = open(history_path, mode, encoding="utf-8")
        if not append_history:
            writer.write("epoch,train_mae,val_mae,seconds\n")

    try:
        for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
            t0 = time.time()
            perm = rng.permutation(len(train_ws))
            abs_sum = 0.0
            n_scored = 0
            for b, lo in enumerate(range(0, len(perm), batch_size)):
                idx = perm[lo : lo + batch_size]
                target = train_ws.targets_norm[idx]
                observed = train_ws.target_observed[idx]
                try:
                    # Per-op finiteness checks are off in the hot loop; NaN/Inf
                    # still propagates to the loss, which is checked each batch.
                    with finite_checks(False):
                        preds = model.forward_batch(
                            train_ws.slots[idx],
                            train_ws.match_ids[idx],
                            train_ws.match_wts[idx],
                            train_ws.residuals[idx],
                            train_ws.inputs_norm[idx][:, :, -1:],
                            training=True,
                        )
                        loss = mae_loss(preds, target, observed)
                        if not np.isfinite(loss.data):
                            raise FloatingPointError("non-finite loss")
                        loss.backward()
                    adam_step(model.store, lr=lr)
                except FloatingPointError as exc:
                    raise RuntimeError(
                        f"training diverged at epoch {epoch} batch {b}: {exc}"
                    ) from exc
                count = int(observed.sum())
                abs_sum += float(loss.data) * count
                n_scored += count
            train_mae = abs_sum / n_scored

            if len(val_ws):
                val_preds = _predict_windows(model, val_ws)
                val_err = np.abs(val_preds - val_ws.targets_norm)[val_ws.target_observed]
                val_mae = float(val_err.mean())
            else:
                val_mae = train_mae
            seconds = time.time() - t0
            row = {"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae, "seconds": seconds}
            history.append(row)
            if writer is not None:
                writer.write(f"{epoch},{train_mae!r},{val_mae!r},{seconds:.3f}\n")
                writer.flush()
            if log is not None:
                log(f"epoch {epoch}: train_mae={train_mae:.5f} val_mae={val_mae:.5f} ({seconds:.1f}s)")

            if val_mae < best_val:
                best_val = val_mae
                best_epoch = epoch
                best_state = model.store.state_dict()
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    finally:
        if writer is not None:
            writer.close()

    if best_state is not None:
        model.store.load_state_dict(best_state)
    return TrainResult(history=history, best_val_mae=best_val, best_epoch=best_epoch)
