import math

import numpy as np
import pytest

from mimetic_mlp.init_schemes import apply_rowvec_mean
from mimetic_mlp.population import (
    PopulationError,
    PopulationMatrix,
    analyze,
    collect,
    covariance,
    cross_correlation,
    export_heatmap_data,
    read_heatmap_data,
    stripe_score,
)
from mimetic_mlp.train import WeightSnapshot, save_snapshot


def pop_from(W1, W2=None):
    W1 = np.asarray(W1, dtype=float)
    if W2 is None:
        W2 = np.random.default_rng(99).standard_normal((W1.shape[0], W1.shape[2], W1.shape[1]))
    return PopulationMatrix(0, W1, W2)


def stripe_score_loop(W, axis):
    """Entry-by-entry oracle for the stripe score."""
    K, r, c = W.shape
    s2 = np.mean([[np.var(W[:, i, j], ddof=1) for j in range(c)] for i in range(r)])
    if axis == "columns":
        v = np.mean([np.var(W[:, :, j].mean(axis=1), ddof=1) for j in range(c)])
        return r * v / s2
    v = np.mean([np.var(W[:, i, :].mean(axis=1), ddof=1) for i in range(r)])
    return c * v / s2


def planted_score(p, s, sigma_b):
    """Expected column score of W = base + 1_p b^T with base std s and b ~ N(0, sigma_b^2)."""
    return (s ** 2 + p * sigma_b ** 2) / (s ** 2 + sigma_b ** 2)


# -- covariance -------------------------------------------------------------

def test_covariance_identical_members_is_zero():
    W1 = np.tile(np.arange(6.0).reshape(1, 3, 2), (5, 1, 1))
    W2 = np.tile(np.arange(6.0).reshape(1, 2, 3), (5, 1, 1))
    np.testing.assert_array_equal(covariance(PopulationMatrix(0, W1, W2)), np.zeros((12, 12)))


def test_covariance_two_members_rank_one():
    rng = np.random.default_rng(0)
    pop = PopulationMatrix(0, rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 2, 3)))
    assert np.linalg.matrix_rank(covariance(pop), tol=1e-10) <= 1


def test_covariance_matches_explicit_sum():
    rng = np.random.default_rng(1)
    pop = PopulationMatrix(0, rng.standard_normal((7, 3, 2)), rng.standard_normal((7, 2, 3)))
    X = np.array([np.concatenate([pop.W1[k].ravel(), pop.W2[k].ravel()]) for k in range(7)])
    mu = X.mean(axis=0)
    expected = sum(np.outer(x - mu, x - mu) for x in X) / 6
    np.testing.assert_allclose(covariance(pop), expected, rtol=1e-12, atol=1e-14)


def test_covariance_iid_monte_carlo():
    K = 10_000
    rng = np.random.default_rng(2)
    pop = PopulationMatrix(0, rng.standard_normal((K, 2, 2)), rng.standard_normal((K, 2, 2)))
    cov = covariance(pop)
    tol = 5 / math.sqrt(K)
    assert np.all(np.abs(np.diag(cov) - 1) < tol * math.sqrt(2) * 2)
    off = cov[~np.eye(8, dtype=bool)]
    assert np.all(np.abs(off) < tol)


def test_covariance_row_major_order():
    W1 = np.zeros((3, 2, 2))
    W1[:, 0, 1] = [1.0, 2.0, 3.0]  # row-major index 1
    pop = PopulationMatrix(0, W1, np.zeros((3, 2, 2)))
    cov = covariance(pop)
    assert cov[1, 1] == pytest.approx(1.0)
    assert np.count_nonzero(cov) == 1


def test_covariance_psd_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(5):
        base = rng.standard_normal((20, 4, 3))
        pop = PopulationMatrix(0, base + rng.standard_normal((20, 1, 3)), rng.standard_normal((20, 3, 4)))
        cov = covariance(pop)
        np.testing.assert_array_equal(cov, cov.T)
        eig = np.linalg.eigvalsh(cov)
        assert eig.min() >= -1e-8 * eig.max()
        assert np.all(np.diag(cov) >= 0)


# -- stripe scores ----------------------------------------------------------

@pytest.mark.parametrize("axis", ["rows", "columns"])
def test_stripe_score_matches_loop_oracle(axis):
    W = np.random.default_rng(4).standard_normal((16, 5, 3)) + np.random.default_rng(5).standard_normal((16, 1, 3))
    pop = pop_from(W)
    assert stripe_score(pop, "W1", axis) == pytest.approx(stripe_score_loop(W, axis), rel=1e-12)


def test_stripe_score_iid_interval():
    # interval [0.8, 1.25] from a loop-oracle Monte Carlo, 100 reps x 2 axes:
    # observed range [0.934, 1.084], mean 1.003, sd 0.028
    rng = np.random.default_rng(6)
    for _ in range(20):
        pop = pop_from(rng.standard_normal((256, 8, 8)))
        for axis in ("rows", "columns"):
            assert 0.8 <= stripe_score(pop, "W1", axis) <= 1.25


def test_stripe_score_perfect_columns_equals_group_size():
    rng = np.random.default_rng(7)
    p, n = 6, 4
    c = rng.standard_normal((4000, 1, n))
    W = np.repeat(c, p, axis=1)  # W^(k) = 1_p c^(k)T
    assert stripe_score(pop_from(W), "W1", "columns") == pytest.approx(p, rel=1e-12)


def test_stripe_score_degenerate_errors():
    W = apply_rowvec_mean(np.zeros((4, 3)), 0.0, np.random.default_rng(0))
    with pytest.raises(PopulationError, match="degenerate"):
        stripe_score(pop_from(np.tile(W, (10, 1, 1))), "W1", "columns")
    with pytest.raises(PopulationError):
        stripe_score(pop_from(np.random.default_rng(0).standard_normal((4, 3, 3))), "W1", "rows")


def test_stripe_score_scale_invariant():
    W = np.random.default_rng(8).standard_normal((32, 4, 4)) + np.random.default_rng(9).standard_normal((32, 4, 1))
    for axis in ("rows", "columns"):
        assert stripe_score(pop_from(7.5 * W), "W1", axis) == pytest.approx(stripe_score(pop_from(W), "W1", axis),
                                                                            rel=1e-12)


def test_planted_rowvec_recovery():
    rng = np.random.default_rng(10)
    p, n, s, sigma_b = 16, 8, 1.0, 0.5
    W = np.stack([apply_rowvec_mean(s * rng.standard_normal((p, n)), sigma_b, rng) for _ in range(512)])
    score = stripe_score(pop_from(W), "W1", "columns")
    assert score == pytest.approx(planted_score(p, s, sigma_b), rel=0.15)


def test_planted_score_oracle_monte_carlo():
    """The closed form used above agrees with brute-force sampling."""
    rng = np.random.default_rng(11)
    p, n, s, sigma_b = 8, 6, 0.7, 0.4
    W = s * rng.standard_normal((20000, p, n)) + sigma_b * rng.standard_normal((20000, 1, n))
    assert stripe_score_loop(W, "columns") == pytest.approx(planted_score(p, s, sigma_b), rel=0.03)


# -- cross-correlation ------------------------------------------------------

def test_cross_correlation_exact_cases():
    W1 = np.random.default_rng(12).standard_normal((16, 4, 3))
    assert cross_correlation(PopulationMatrix(0, W1, -np.transpose(W1, (0, 2, 1)))) == pytest.approx(-1.0)
    assert cross_correlation(PopulationMatrix(0, W1, np.transpose(W1, (0, 2, 1)))) == pytest.approx(1.0)


def test_cross_correlation_independent_small():
    rng = np.random.default_rng(13)
    K = 256
    rho = cross_correlation(PopulationMatrix(0, rng.standard_normal((K, 4, 2)), rng.standard_normal((K, 2, 4))))
    assert abs(rho) <= 3 / math.sqrt(K)


def test_cross_correlation_antisymmetric_and_exclusions():
    rng = np.random.default_rng(14)
    W1, W2 = rng.standard_normal((12, 3, 2)), rng.standard_normal((12, 2, 3))
    W1[:, 0, 0] = 1.0
    pop = PopulationMatrix(0, W1, W2)
    rho, excluded = cross_correlation(pop, return_excluded=True)
    assert excluded == 1
    assert cross_correlation(PopulationMatrix(0, W1, -W2)) == pytest.approx(-rho)
    with pytest.raises(PopulationError):
        cross_correlation(PopulationMatrix(0, np.ones((12, 3, 2)), W2))


# -- collect ----------------------------------------------------------------

def _write_pop(tmp_path, seeds, chash="abc", depth=2):
    rng = np.random.default_rng(0)
    for s in seeds:
        tensors = []
        for L in range(depth):
            tensors += [(f"block.{L}.mlp.W1", rng.standard_normal((4, 2))),
                        (f"block.{L}.mlp.W2", rng.standard_normal((2, 4)))]
        save_snapshot(WeightSnapshot(tensors, chash, s, 5), tmp_path / f"seed_{s:05d}.mimw")


def test_collect_skips_corrupt(tmp_path, caplog):
    _write_pop(tmp_path, [2, 0, 1])
    bad = tmp_path / "seed_00003.mimw"
    _write_pop(tmp_path, [3])
    raw = bytearray(bad.read_bytes())
    raw[-1] ^= 0xFF
    bad.write_bytes(bytes(raw))
    pop = collect(tmp_path, 1)
    assert pop.K == 3 and pop.skipped_corrupt == 1
    assert pop.seeds == [0, 1, 2]
    assert pop.W1.shape == (3, 4, 2)


def test_collect_mixed_hash_names_both(tmp_path):
    _write_pop(tmp_path, [0, 1], chash="aaaa")
    _write_pop(tmp_path, [2], chash="bbbb")
    with pytest.raises(PopulationError, match="aaaa.*bbbb"):
        collect(tmp_path, 0)


def test_collect_layer_out_of_range_and_too_few(tmp_path):
    _write_pop(tmp_path, [0, 1])
    with pytest.raises(PopulationError, match="layer_index"):
        collect(tmp_path, 5)
    single = tmp_path / "one"
    single.mkdir()
    _write_pop(single, [0])
    with pytest.raises(PopulationError):
        collect(single, 0)


# -- export -----------------------------------------------------------------

def test_export_heatmap_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    A = rng.standard_normal((4, 4))
    cov = A @ A.T
    path = tmp_path / "cov.csv"
    export_heatmap_data(cov, path, pn=2)
    assert len(path.read_text().strip().splitlines()) == 4
    back, meta = read_heatmap_data(path)
    np.testing.assert_allclose(back, cov, rtol=0, atol=1e-12)
    assert meta["offsets"] == [0, 2, 4]


def test_export_zero_matrix(tmp_path):
    path = tmp_path / "z.csv"
    export_heatmap_data(np.zeros((4, 4)), path)
    back, _ = read_heatmap_data(path)
    assert not back.any()


def test_analyze_schema():
    rng = np.random.default_rng(16)
    stats = analyze(PopulationMatrix(1, rng.standard_normal((10, 4, 2)), rng.standard_normal((10, 2, 4))))
    d = stats.to_dict()
    assert set(d["stripe_scores"]) == {"W1", "W2"}
    assert all(set(v) == {"rows", "columns"} for v in d["stripe_scores"].values())
    assert -1 <= d["rho"] <= 1 and d["K"] == 10
    assert stats.cov.shape == (16, 16)
    assert analyze(stats and PopulationMatrix(0, rng.standard_normal((10, 4, 2)),
                                              rng.standard_normal((10, 2, 4))), dense_cap=4).cov is None
