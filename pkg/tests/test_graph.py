import math

import numpy as np
import pytest

from pmmemnet.graph import (
    build_adjacency,
    load_distance_matrix,
    load_node_ids,
    normalize_adjacency,
    write_adjacency_csv,
    write_distances_csv,
)


def dist_matrix(entries, n):
    d = np.full((n, n), np.nan)
    for i, j, v in entries:
        d[i, j] = v
    return d


def test_zero_distance_gives_weight_one():
    g = build_adjacency(["a", "b"], dist_matrix([(0, 1, 0.0), (1, 0, 5.0)], 2), kappa=0.0, sigma=2.0)
    assert g.adjacency[0, 1] == 1.0
    assert np.all(np.diag(g.adjacency) == 1.0)


def test_kernel_at_sigma_is_inverse_e():
    # dist == sigma evaluates the kernel at exp(-1)
    d = dist_matrix([(0, 1, 3.0), (1, 0, 6.0)], 2)
    g = build_adjacency(["a", "b"], d, kappa=0.0, sigma=3.0)
    assert math.isclose(g.adjacency[0, 1], math.exp(-1.0), rel_tol=1e-12)
    assert math.isclose(g.adjacency[1, 0], math.exp(-4.0), rel_tol=1e-12)


def test_threshold_zeroes_small_weights():
    d = dist_matrix([(0, 1, 3.0), (1, 0, 1.0)], 2)
    g = build_adjacency(["a", "b"], d, kappa=0.1, sigma=1.0)
    assert g.adjacency[0, 1] == 0.0  # exp(-9) << 0.1
    assert g.adjacency[1, 0] == math.exp(-1.0)


def test_sigma_from_distance_std():
    vals = [100.0, 200.0, 400.0]
    d = dist_matrix([(0, 1, vals[0]), (1, 2, vals[1]), (2, 0, vals[2])], 3)
    g = build_adjacency(["a", "b", "c"], d)
    assert math.isclose(g.sigma, float(np.std(vals)), rel_tol=1e-12)


def test_identical_distances_require_sigma_override():
    d = dist_matrix([(0, 1, 5.0), (1, 0, 5.0)], 2)
    with pytest.raises(ValueError, match="sigma"):
        build_adjacency(["a", "b"], d)
    g = build_adjacency(["a", "b"], d, sigma=5.0)
    assert math.isclose(g.adjacency[0, 1], math.exp(-1.0), rel_tol=1e-12)


def test_missing_distance_means_no_edge():
    g = build_adjacency(["a", "b", "c"], dist_matrix([(0, 1, 1.0), (1, 0, 2.0)], 3), kappa=0.0)
    assert g.adjacency[0, 2] == 0.0
    assert g.adjacency[2, 0] == 0.0


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        build_adjacency(["a", "b"], dist_matrix([(0, 1, -1.0)], 2))


def test_kernel_monotone_in_distance():
    rng = np.random.default_rng(0)
    dists = np.sort(rng.uniform(10, 500, size=9))
    n = 10
    entries = [(0, j + 1, dists[j]) for j in range(9)]
    g = build_adjacency([str(i) for i in range(n)], dist_matrix(entries, n), kappa=0.0)
    weights = g.adjacency[0, 1:]
    assert np.all(np.diff(weights) <= 0)


def test_adjacency_asymmetric_is_allowed():
    d = dist_matrix([(0, 1, 1.0), (1, 0, 4.0)], 2)
    g = build_adjacency(["a", "b"], d, kappa=0.0, sigma=2.0)
    assert g.adjacency[0, 1] != g.adjacency[1, 0]


# ---- normalization ----------------------------------------------------------------


def test_normalize_identity():
    assert np.array_equal(normalize_adjacency(np.eye(3)), np.eye(3))


def test_normalize_proportional_row():
    out = normalize_adjacency(np.array([[2.0, 2.0, 0.0]] * 3))
    assert np.allclose(out[0], [0.5, 0.5, 0.0], atol=1e-15)


def test_normalize_random_vs_row_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 3, size=(4, 4))
    out = normalize_adjacency(a)
    for i in range(4):
        expected = a[i] / a[i].sum()
        assert np.allclose(out[i], expected, atol=1e-15)


def test_normalize_zero_rows_stay_zero_and_sums():
    a = np.array([[0.0, 0.0], [1.0, 3.0]])
    out = normalize_adjacency(a)
    assert np.array_equal(out[0], [0.0, 0.0])
    sums = out.sum(axis=1)
    assert abs(sums[1] - 1.0) < 1e-12 and sums[0] == 0.0


def test_normalize_rejects_negative():
    with pytest.raises(ValueError):
        normalize_adjacency(np.array([[-1.0, 1.0], [0.0, 1.0]]))


# ---- file round trips -----------------------------------------------------------------


def test_csv_roundtrip(tmp_path):
    node_ids = ["a", "b", "c"]
    d = dist_matrix([(0, 1, 120.5), (1, 2, 300.25), (2, 0, 10.0)], 3)
    path = tmp_path / "dist.csv"
    write_distances_csv(path, node_ids, d)
    loaded = load_distance_matrix(path, node_ids)
    np.fill_diagonal(d, 0.0)  # writer skips the diagonal; loader leaves it NaN
    mask = ~np.eye(3, dtype=bool)
    assert np.array_equal(np.nan_to_num(loaded[mask], nan=-1), np.nan_to_num(d[mask], nan=-1))

    ids_path = tmp_path / "nodes.txt"
    ids_path.write_text("a\nb\nc\n")
    assert load_node_ids(ids_path) == node_ids

    g = build_adjacency(node_ids, loaded, kappa=0.0)
    adj_path = tmp_path / "adj.csv"
    write_adjacency_csv(g, adj_path)
    lines = adj_path.read_text().strip().splitlines()
    assert lines[0] == "from,to,weight"
    assert len(lines) == 1 + np.count_nonzero(g.adjacency)


def test_distance_csv_unknown_node(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("from,to,dist\na,zzz,5\n")
    with pytest.raises(ValueError, match="unknown node"):
        load_distance_matrix(path, ["a", "b"])


def test_distance_csv_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("src,dst,w\na,b,5\n")
    with pytest.raises(ValueError, match="header"):
        load_distance_matrix(path, ["a", "b"])


def test_duplicate_node_ids_rejected(tmp_path):
    path = tmp_path / "nodes.txt"
    path.write_text("a\na\n")
    with pytest.raises(ValueError):
        load_node_ids(path)
