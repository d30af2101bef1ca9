"""Synthetic road-speed data for desk-scale runs and acceptance checks.

Generates N-node periodic speeds with per-day regime switches and abrupt
congestion drops that propagate to graph neighbors. Fully deterministic
given a seed. When the event rate is positive, at least one drop is
guaranteed to land inside the final 20% of the series (the test split) so
responsiveness checks always have something to react to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patterns import SLOTS_PER_DAY
from .validation import check_positive

_START = np.datetime64("2024-01-01T00:00:00", "s")
_STEP = np.timedelta64(300, "s")
MIN_SPEED = 3.0  # zeros mark missing values, so generated speeds stay positive


@dataclass
class SynthResult:
    values: np.ndarray  # (T, N) speeds
    timestamps: np.ndarray  # (T,) datetime64[s]
    node_ids: list[str]
    distances: np.ndarray  # (N, N), NaN = no edge


def _topology_edges(num_nodes: int, topology: str) -> list[tuple[int, int]]:
    if topology == "ring":
        return [(i, (i + 1) % num_nodes) for i in range(num_nodes)]
    if topology == "grid":
        cols = int(np.ceil(np.sqrt(num_nodes)))
        edges = []
        for i in range(num_nodes):
            r, c = divmod(i, cols)
            for dr, dc in ((0, 1), (1, 0)):
                j = (r + dr) * cols + (c + dc)
                if c + dc < cols and j < num_nodes:
                    edges.append((i, j))
        return edges
    raise ValueError(f"unknown topology {topology!r}; expected ring or grid")


def _regime_profiles(num_nodes: int, regimes: int, rng: np.random.Generator) -> np.ndarray:
    """(regimes, N, 288) daily speed shapes; dips travel along the node index.

    Regimes are deliberately well separated (distinct all-day levels and
    rush-dip depths), so a forecaster that infers the active regime from
    recent history has real headroom over the time-of-day average.
    """
    slots = np.arange(SLOTS_PER_DAY)
    base = 58.0 + rng.uniform(-3.0, 3.0, size=num_nodes)
    profiles = np.empty((regimes, num_nodes, SLOTS_PER_DAY))
    for r in range(regimes):
        depth_am = 8.0 + 10.0 * r
        depth_pm = 10.0 + 8.0 * ((r + 1) % max(regimes, 1))
        level = 9.0 * (r - (regimes - 1) / 2.0)
        for i in range(num_nodes):
            shift = 2 * i  # congestion front moves ~10 min per hop
            am = depth_am * np.exp(-0.5 * (((slots - 96 - shift) % SLOTS_PER_DAY) / 20.0) ** 2)
            pm = depth_pm * np.exp(-0.5 * (((slots - 216 - shift) % SLOTS_PER_DAY) / 24.0) ** 2)
            profiles[r, i] = base[i] + level - am - pm
    return profiles


def _apply_event(values: np.ndarray, node: int, start: int, duration: int, depth: float,
                 neighbors: list[int]) -> None:
    """Trapezoid congestion drop: 2-slot onset, plateau, 4-slot recovery."""
    t_end = min(start + duration, values.shape[0])
    ramp_on, ramp_off = 2, 4
    for offset, (target, scale) in enumerate([(node, 1.0)] + [(nb, 0.5) for nb in neighbors]):
        lag = 2 * min(offset, 1)  # neighbors lag the source by ~10 min
        for t in range(start + lag, t_end + lag):
            if t >= values.shape[0]:
                break
            into = t - (start + lag)
            left = duration - into
            factor = min(1.0, (into + 1) / ramp_on, max(left, 0) / ramp_off)
            values[t, target] -= depth * scale * max(factor, 0.0)


def generate_synthetic(
    num_nodes: int = 10,
    days: int = 60,
    topology: str = "ring",
    regimes: int = 3,
    noise: float = 2.0,
    event_rate: float = 0.02,
    seed: int = 0,
) -> SynthResult:
    """Build the synthetic dataset and its distance table."""
    check_positive(num_nodes, "num_nodes")
    check_positive(days, "days")
    check_positive(regimes, "regimes")
    rng = np.random.default_rng(seed)
    n_steps = days * SLOTS_PER_DAY
    node_ids = [f"n{i:03d}" for i in range(num_nodes)]

    edges = _topology_edges(num_nodes, topology)
    distances = np.full((num_nodes, num_nodes), np.nan)
    for i, j in edges:
        d = rng.uniform(300.0, 800.0)
        distances[i, j] = d
        distances[j, i] = d
    neighbor_map = {i: [] for i in range(num_nodes)}
    for i, j in edges:
        neighbor_map[i].append(j)
        neighbor_map[j].append(i)

    profiles = _regime_profiles(num_nodes, regimes, rng)
    # Per-day regime with persistence, so windows usually see a settled regime.
    day_regimes = np.zeros(days, dtype=int)
    for d in range(1, days):
        if regimes > 1 and rng.random() < 0.35:
            choices = [r for r in range(regimes) if r != day_regimes[d - 1]]
            day_regimes[d] = choices[rng.integers(len(choices))]
        else:
            day_regimes[d] = day_regimes[d - 1]

    values = np.concatenate([profiles[day_regimes[d]].T for d in range(days)], axis=0)

    test_start = int(n_steps * 0.8)
    test_event_seen = False
    if event_rate > 0:
        for d in range(days):
            for i in range(num_nodes):
                if rng.random() < event_rate:
                    start = d * SLOTS_PER_DAY + int(rng.integers(60, 240))
                    duration = int(rng.integers(24, 61))  # 2-5 h: outlasts the horizon
                    depth = float(rng.uniform(28.0, 45.0))
                    _apply_event(values, i, start, duration, depth, neighbor_map[i])
                    if start >= test_start:
                        test_event_seen = True
        if not test_event_seen:
            # Guarantee the test split holds an abrupt drop to react to.
            start = test_start + 2 * SLOTS_PER_DAY + 120
            _apply_event(values, 0, min(start, n_steps - 40), 24, 35.0, neighbor_map[0])

    values = values + rng.normal(0.0, 1.0, size=values.shape) * noise
    values = np.maximum(values, MIN_SPEED)
    timestamps = _START + _STEP * np.arange(n_steps)
    return SynthResult(values=values, timestamps=timestamps, node_ids=node_ids, distances=distances)


def write_dataset_csv(path, result: SynthResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp," + ",".join(result.node_ids) + "\n")
        iso = np.datetime_as_string(result.timestamps, unit="s")
        for t in range(result.values.shape[0]):
            row = ",".join(f"{v:.3f}" for v in result.values[t])
            fh.write(f"{iso[t]},{row}\n")
