import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dim3d.metrics import (MetricsReport, chamfer, coverage, distance_matrix, emd, evaluate,
                           one_nna)


def brute_chamfer(a, b):
    def side(p, q):
        mins = []
        for x in p:
            best = math.inf
            for y in q:
                dx, dy, dz = x[0] - y[0], x[1] - y[1], x[2] - y[2]
                best = min(best, dx * dx + dy * dy + dz * dz)
            mins.append(best)
        return math.fsum(mins) / len(p)
    return side(a, b) + side(b, a)


def brute_emd(a, b):
    n = len(a)
    cost = [[math.sqrt(sum((a[i][k] - b[j][k]) ** 2 for k in range(3))) for j in range(n)] for i in range(n)]
    return min(math.fsum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def brute_coverage(gen, ref):
    covered = set()
    for g in gen:
        d = [brute_chamfer(g, r) for r in ref]
        covered.add(d.index(min(d)))
    return 100.0 * len(covered) / len(ref)


def test_chamfer_hand():
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0
    a = np.random.default_rng(0).normal(size=(10, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=(32, 3)), rng.normal(size=(32, 3))
        assert chamfer(a, b) == brute_chamfer(a, b)


def test_chamfer_unequal_sizes_and_empty():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(12, 3))
    assert chamfer(a, b) == brute_chamfer(a, b)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20), st.integers(1, 20))
def test_chamfer_symmetric_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(a, b) == chamfer(b, a) >= 0.0


def test_emd_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert emd(a, b) == brute_emd(a, b)


def test_emd_basics():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    assert emd(a, a[rng.permutation(20)]) == 0.0
    assert emd(a, b) == emd(b, a)
    v = np.array([3.0, -1.0, 0.5])
    assert abs(emd(a + v, b + v) - emd(a, b)) < 1e-12
    identity_cost = np.linalg.norm(a - b, axis=1).mean()
    assert emd(a, b) <= identity_cost
    with pytest.raises(ValueError, match="equal-size"):
        emd(a, b[:5])


def test_distance_matrix_matches_pairwise():
    rng = np.random.default_rng(5)
    xs = [rng.normal(size=(8, 3)) for _ in range(3)]
    ys = [rng.normal(size=(8, 3)) for _ in range(4)] + [rng.normal(size=(5, 3))]
    for dist, fn in (("cd", chamfer), ("emd", emd)):
        ys_ = ys[:4] if dist == "emd" else ys
        M = distance_matrix(xs, ys_, dist)
        assert all(M[i, j] == fn(x, y) for i, x in enumerate(xs) for j, y in enumerate(ys_))
    with pytest.raises(ValueError, match="unknown distance"):
        distance_matrix(xs, ys, "l2")


def _clusters(rng, center, k, n=16):
    return [center + 0.01 * rng.normal(size=(n, 3)) for _ in range(k)]


@pytest.mark.parametrize("dist", ["cd", "emd"])
def test_one_nna_separated_clusters(dist):
    rng = np.random.default_rng(6)
    gen = _clusters(rng, np.zeros(3), 6)
    ref = _clusters(rng, np.array([10.0, 0, 0]), 6)
    assert one_nna(gen, ref, dist) == 100.0


@pytest.mark.parametrize("dist", ["cd", "emd"])
def test_one_nna_twins(dist):
    rng = np.random.default_rng(7)
    ref = [rng.normal(size=(12, 3)) for _ in range(6)]
    gen = [r.copy() for r in ref]
    assert one_nna(gen, ref, dist) == 0.0
    assert coverage(gen, ref, dist) == 100.0


def test_one_nna_argument_swap():
    rng = np.random.default_rng(8)
    gen = [rng.normal(size=(10, 3)) for _ in range(7)]
    ref = [rng.normal(size=(10, 3)) + 0.3 for _ in range(5)]
    assert one_nna(gen, ref) == one_nna(ref, gen)


def test_one_nna_needs_both_sets():
    with pytest.raises(ValueError):
        one_nna([], [np.zeros((2, 3))])


def test_coverage_identical_generations():
    rng = np.random.default_rng(9)
    ref = [rng.normal(size=(10, 3)) for _ in range(8)]
    gen = [rng.normal(size=(10, 3))] * 5
    assert coverage(gen, ref) == 100.0 / 8


def test_coverage_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(5):
        gen = [rng.normal(size=(6, 3)) for _ in range(5)]
        ref = [rng.normal(size=(6, 3)) for _ in range(7)]
        assert coverage(gen, ref) == brute_coverage(gen, ref)


def test_report_text_is_sorted_and_csv_parses():
    rng = np.random.default_rng(11)
    gen = [rng.normal(size=(8, 3)) for _ in range(3)]
    ref = [rng.normal(size=(8, 3)) for _ in range(4)]
    r = evaluate(gen, ref, "both")
    keys = [line.split(" = ")[0] for line in r.to_text().splitlines()]
    assert keys == sorted(keys)
    assert set(keys) == {"cov_cd", "cov_emd", "mean_cd", "mean_emd", "n_gen", "n_ref",
                         "one_nna_cd", "one_nna_emd"}
    assert r.csv_header().strip().split(",") == keys
    assert len(r.csv_row().split(",")) == len(keys)
    for k in ("cov_cd", "cov_emd", "one_nna_cd", "one_nna_emd"):
        assert 0.0 <= r.fields()[k] <= 100.0


def test_report_single_metric():
    rng = np.random.default_rng(12)
    gen = [rng.normal(size=(8, 3)) for _ in range(2)]
    r = evaluate(gen, gen, "cd")
    assert r.one_nna_emd is None and r.one_nna_cd == 0.0
    assert "emd" not in r.to_text()
    assert isinstance(MetricsReport(1, 1).to_text(), str)
    with pytest.raises(ValueError):
        evaluate(gen, gen, "jsd")
