import numpy as np

from pmmemnet import ModelConfig, ForecastModel, PatternSet, SeriesDataset, build_adjacency
from pmmemnet.patterns import zero_based


def finite_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return grad


def make_series(num_nodes=3, days=6, seed=0, noise=1.0):
    """Small deterministic speed series with daily structure."""
    rng = np.random.default_rng(seed)
    slots_per_day = 288
    t = np.arange(days * slots_per_day)
    slot = t % slots_per_day
    base = 55.0 + 5.0 * np.sin(2 * np.pi * slot / slots_per_day)[:, None]
    node_off = rng.uniform(-3, 3, size=num_nodes)
    values = base + node_off + rng.normal(0, noise, size=(t.size, num_nodes))
    values = np.maximum(values, 3.0)
    timestamps = np.datetime64("2024-03-01T00:00:00", "s") + np.timedelta64(300, "s") * t
    node_ids = [f"n{i}" for i in range(num_nodes)]
    return values, timestamps, node_ids


def make_dataset(num_nodes=3, days=6, seed=0, noise=1.0) -> SeriesDataset:
    values, timestamps, node_ids = make_series(num_nodes, days, seed, noise)
    return SeriesDataset.from_arrays(values, timestamps, node_ids)


def ring_distances(num_nodes: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dist = np.full((num_nodes, num_nodes), np.nan)
    if num_nodes == 1:
        return dist
    for i in range(num_nodes):
        j = (i + 1) % num_nodes
        d = rng.uniform(300, 800)
        dist[i, j] = d
        dist[j, i] = d
    return dist


def random_patterns(count: int, window_len: int, seed: int = 0) -> PatternSet:
    rng = np.random.default_rng(seed)
    return PatternSet.from_values(rng.normal(0, 5, size=(count, window_len)))


def micro_model(num_nodes=3, window_len=4, horizon=2, hidden_dim=8, num_layers=2,
                num_patterns=6, k=2, num_heads=4, seed=0, simple_mem=False):
    """The small end-to-end configuration used across model-level tests."""
    patterns = random_patterns(num_patterns, window_len, seed=seed + 1)
    graph = build_adjacency([f"n{i}" for i in range(num_nodes)], ring_distances(num_nodes, seed))
    cfg = ModelConfig(
        window_len=window_len, horizon=horizon, hidden_dim=hidden_dim,
        num_layers=num_layers, num_neighbors=k, num_patterns=num_patterns,
        num_heads=num_heads, node_embed_dim=3, seed=seed, simple_mem=simple_mem,
    )
    return ForecastModel(cfg, graph, patterns)


def micro_batch(model: ForecastModel, batch=2, seed=0):
    """Random but deterministic forward inputs for a micro model."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    n = model.num_nodes
    windows = rng.uniform(30, 70, size=(batch, n, cfg.window_len))
    slots = rng.integers(0, 288, size=(batch, cfg.window_len))
    flat = windows.reshape(batch * n, cfg.window_len)
    from pmmemnet.patterns import match_many
    from pmmemnet.gcmem import match_weights
    ids, dists = match_many(flat, model.patterns, cfg.num_neighbors)
    wts = match_weights(dists)
    residuals = zero_based(flat) - model.patterns.values[ids[:, 0]]
    first = rng.normal(0, 1, size=(batch, n, 1))
    return {
        "slots": slots,
        "ids": ids.reshape(batch, n, -1),
        "weights": wts.reshape(batch, n, -1),
        "residuals": residuals.reshape(batch, n, cfg.window_len),
        "first_input": first,
        "targets": rng.normal(0, 1, size=(batch, n, cfg.horizon)),
    }
