import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from dequantmc.data import corrupt, load_mnist_idx, synthetic_glyph, to_spins, write_idx_images
from dequantmc.errors import DimensionError, FormatError
from dequantmc.targets import (BayesVarSelect, DiscreteTarget, DiscretizedGMM, IsingDenoise,
                               QuantizedLogReg, TableTarget, UniformTarget, enumerate_grid,
                               exact_distribution, make_gmm2d, make_synthetic_bvs)


class TestGmm:
    def test_unit_cell_mass(self):
        target = DiscretizedGMM([1.0], [[0.0]], [[1.0]], bits=4, span=8.0)
        np.testing.assert_allclose(target.cell_bounds(np.array([8])), ([0.0], [1.0]))
        assert target.log_prob(np.array([8])) == pytest.approx(np.log(0.341345), abs=1e-6)

    def test_mirror_symmetry(self):
        target = DiscretizedGMM([1.0], [[0.0]], [[1.0]], bits=4, span=8.0)
        theta = np.arange(16)[:, None]
        lp = target.log_prob(theta)
        np.testing.assert_allclose(lp, lp[::-1], atol=1e-12)

    def test_grid_sums_to_box_mass(self):
        target = make_gmm2d(seed=0, bits=6)
        _, _, log_z = exact_distribution(target)
        assert abs(np.exp(log_z) - target.box_mass()) <= 1e-6
        assert target.box_mass() >= 0.999

    def test_far_tail_cells_finite(self):
        target = DiscretizedGMM([1.0], [[0.0]], [[1.0]], bits=8, span=30.0)
        lp = target.log_prob(np.array([[0], [255]]))
        assert np.all(np.isfinite(lp)) and lp[0] < -300

    def test_conditional_logits_match_base(self, rng):
        target = make_gmm2d(seed=1, bits=4)
        theta = rng.integers(0, target.K, (6, 2))
        idx = rng.integers(0, 2, 6)
        np.testing.assert_allclose(target.conditional_logits(theta, idx),
                                   DiscreteTarget.conditional_logits(target, theta, idx), atol=1e-10)

    @pytest.mark.parametrize("kwargs", [
        dict(weights=[0.5, 0.4], means=[[0.0], [1.0]], stds=[[1.0], [1.0]]),
        dict(weights=[1.0], means=[[0.0]], stds=[[0.0]]),
        dict(weights=[1.0], means=[[0.0, 1.0]], stds=[[1.0]]),
    ])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises((ValueError, DimensionError)):
            DiscretizedGMM(**kwargs)


class TestIsing:
    def test_all_up_two_by_two(self):
        target = IsingDenoise(np.ones((2, 2)), beta=1.0, eta=1.0)
        assert target.log_prob(np.ones(4, dtype=int)) == pytest.approx(8.0)

    def test_global_flip_without_field(self, rng):
        target = IsingDenoise(to_spins(rng.integers(0, 2, (3, 4))), beta=0.7, eta=0.0)
        theta = rng.integers(0, 2, (20, 12))
        np.testing.assert_allclose(target.log_prob(theta), target.log_prob(1 - theta))

    def test_zero_coupling_is_separable(self, rng):
        obs = to_spins(rng.integers(0, 2, (2, 3)))
        target = IsingDenoise(obs, beta=0.0, eta=0.8)
        _, pmf, _ = exact_distribution(target)
        marg = 1 / (1 + np.exp(-2 * 0.8 * obs.ravel()))
        grid = enumerate_grid(6, 2)
        expected = np.prod(np.where(grid == 1, marg, 1 - marg), axis=1)
        np.testing.assert_allclose(pmf, expected, atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 2), (2, 2), (2, 3), (3, 3), (4, 4)])
    def test_edges_counted_once(self, shape):
        h, w = shape
        obs = np.ones(shape)
        target = IsingDenoise(obs, beta=1.0, eta=0.0)
        n_edges = h * (w - 1) + w * (h - 1)
        assert target.log_prob(np.ones(h * w, dtype=int)) == pytest.approx(n_edges)
        # explicit pair enumeration on a random state
        theta = np.random.default_rng(h * w).integers(0, 2, h * w)
        s = (2 * theta - 1).reshape(shape)
        total = 0.0
        for r, c in itertools.product(range(h), range(w)):
            for dr, dc in ((0, 1), (1, 0)):
                if r + dr < h and c + dc < w:
                    total += s[r, c] * s[r + dr, c + dc]
        assert target.log_prob(theta) == pytest.approx(total)

    def test_conditional_logits_differences(self, rng):
        target = IsingDenoise(to_spins(rng.integers(0, 2, (3, 3))), beta=0.6, eta=0.9)
        theta = rng.integers(0, 2, (10, 9))
        idx = rng.integers(0, 9, 10)
        fast = target.conditional_logits(theta, idx)
        slow = DiscreteTarget.conditional_logits(target, theta, idx)
        np.testing.assert_allclose(fast[:, 1] - fast[:, 0], slow[:, 1] - slow[:, 0], atol=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(beta=-0.1), dict(eta=-1.0)])
    def test_negative_strengths_rejected(self, kwargs):
        with pytest.raises(ValueError):
            IsingDenoise(np.ones((2, 2)), **kwargs)

    def test_observed_must_be_spins(self):
        with pytest.raises(ValueError):
            IsingDenoise(np.zeros((2, 2)))


class TestQuantizedLogReg:
    def test_no_data_is_flat(self, rng):
        target = QuantizedLogReg(np.zeros((0, 3)), np.zeros(0), n_classes=2)
        np.testing.assert_array_equal(target.log_prob(rng.integers(0, 16, (4, target.d))), 0.0)

    def test_equal_class_rows(self):
        target = QuantizedLogReg(np.array([[1.0, -1.0]]), np.array([1]), n_classes=2)
        theta = np.array([5, 9, 3, 5, 9, 3])
        assert target.log_prob(theta) == pytest.approx(np.log(0.5), abs=1e-12)

    def test_hand_computed(self):
        X = np.array([[1.0], [-1.0], [0.5], [2.0]])
        y = np.array([0, 1, 1, 0])
        target = QuantizedLogReg(X, y, n_classes=2, bits=2, lo=-1.5, hi=1.5)
        np.testing.assert_allclose(target.grid, [-1.5, -0.5, 0.5, 1.5])
        theta = np.array([3, 1, 0, 2])  # class 0: w=1.5 b=-0.5; class 1: w=-1.5 b=0.5
        expected = 0.0
        for x, label in zip(X[:, 0], y):
            logits = np.array([1.5 * x - 0.5, -1.5 * x + 0.5])
            expected += logits[label] - logsumexp(logits)
        assert target.log_prob(theta) == pytest.approx(expected, abs=1e-12)

    def test_accuracy(self):
        X = np.array([[1.0], [-1.0]])
        target = QuantizedLogReg(X, np.array([0, 1]), n_classes=2, bits=2, lo=-1.5, hi=1.5)
        np.testing.assert_allclose(target.accuracy(np.array([3, 1, 0, 1])), [1.0])


def _bvs_direct(X, y, sel, nu, w, alpha):
    """Closed form via the marginal Gaussian of y given sigma^2 (no Cholesky path)."""
    n = y.size
    g = nu ** 2
    if sel.size:
        Xs = X[:, sel]
        H = Xs @ np.linalg.solve(Xs.T @ Xs, Xs.T)
        S = y @ y - g / (1 + g) * y @ H @ y
    else:
        S = y @ y
    return -0.5 * sel.size * np.log1p(g) - 0.5 * (n + alpha) * np.log(alpha * w + S)


class TestBayesVarSelect:
    def test_empty_model(self, rng):
        X, y = rng.standard_normal((12, 3)), rng.standard_normal(12)
        target = BayesVarSelect(X, y, nu=5.0, w=2.0, alpha=3.0)
        expected = -0.5 * (12 + 3.0) * np.log(3.0 * 2.0 + y @ y)
        assert target.log_prob(np.zeros(3, dtype=int)) == pytest.approx(expected, rel=1e-12)

    def test_matches_projection_form(self, rng):
        X, y = rng.standard_normal((20, 4)), rng.standard_normal(20)
        target = BayesVarSelect(X, y)
        for theta in enumerate_grid(4, 2):
            expected = _bvs_direct(X, y, np.flatnonzero(theta), 10.0, 1.0, 1.0)
            assert target.log_prob(theta) == pytest.approx(expected, rel=1e-9)

    def test_duplicate_column_stays_finite(self, rng):
        x = rng.standard_normal(15)
        X = np.stack([x, x, rng.standard_normal(15)], axis=1)
        target = BayesVarSelect(X, 2 * x + 0.1 * rng.standard_normal(15))
        both = target.log_prob(np.array([1, 1, 0]))
        one = target.log_prob(np.array([1, 0, 0]))
        assert np.isfinite(both)
        assert both < one

    def test_single_column_quadrature(self):
        rng = np.random.default_rng(3)
        X, y = rng.standard_normal((3, 1)), rng.standard_normal(3)
        nu, w, alpha = 2.0, 1.5, 3.0
        target = BayesVarSelect(X, y, nu=nu, w=w, alpha=alpha)
        inv_gamma = stats.invgamma(alpha / 2, scale=alpha * w / 2)
        from scipy.integrate import quad

        def marginal(cov_fn):
            f = lambda t: np.exp(stats.multivariate_normal(np.zeros(3), cov_fn(np.exp(t))).logpdf(y)
                                 + inv_gamma.logpdf(np.exp(t)) + t)
            return quad(f, -20, 20, limit=200)[0]

        G = nu ** 2 * X @ np.linalg.inv(X.T @ X) @ X.T
        full = marginal(lambda s2: s2 * (np.eye(3) + G))
        empty = marginal(lambda s2: s2 * np.eye(3))
        ratio = target.log_prob(np.array([1])) - target.log_prob(np.array([0]))
        assert ratio == pytest.approx(np.log(full / empty), abs=1e-6)

    def test_synthetic_without_signal(self):
        target, info = make_synthetic_bvs(4, 0, 50, seed=2)
        assert info["support"] == [] and np.allclose(info["beta"], 0.0)
        assert target.d == 4

    def test_synthetic_reproducible(self):
        a, ia = make_synthetic_bvs(6, 2, 30, seed=9)
        b, ib = make_synthetic_bvs(6, 2, 30, seed=9)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
        assert ia == ib

    def test_synthetic_large_support_recovered(self):
        target, info = make_synthetic_bvs(100, 10, 1000, seed=0)
        true = np.zeros(100, dtype=int)
        true[info["support"]] = 1
        missing = true.copy()
        missing[info["support"][0]] = 0
        assert target.log_prob(true) > target.log_prob(missing)
        assert target.log_prob(true) > target.log_prob(np.zeros(100, dtype=int))


class TestData:
    def test_idx_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (3, 5, 4)).astype(np.uint8)
        write_idx_images(tmp_path / "x.idx", imgs)
        np.testing.assert_array_equal(load_mnist_idx(tmp_path / "x.idx"), imgs)

    def test_idx_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(bytes(16))
        with pytest.raises(FormatError):
            load_mnist_idx(tmp_path / "bad.idx")

    def test_corrupt_extremes(self):
        img = synthetic_glyph(16)
        np.testing.assert_array_equal(corrupt(img, 0.0, seed=1), img)
        np.testing.assert_array_equal(corrupt(img, 1.0, seed=1), 1 - img)

    def test_corrupt_rate(self):
        img = np.zeros((28, 28), dtype=int)
        flips = int(corrupt(img, 0.1, seed=0).sum())
        assert 50 <= flips <= 110


class TestExact:
    def test_uniform(self):
        grid, pmf, log_z = exact_distribution(UniformTarget(3, 3))
        assert grid.shape == (27, 3)
        np.testing.assert_allclose(pmf, 1 / 27)
        assert log_z == pytest.approx(np.log(27))

    def test_too_large(self):
        with pytest.raises(DimensionError):
            exact_distribution(UniformTarget(30, 2))

    def test_table_shape_checked(self):
        with pytest.raises(DimensionError):
            TableTarget(np.zeros((2, 3)))

    def test_log_prob_shape_checked(self):
        with pytest.raises(DimensionError):
            UniformTarget(3, 2).log_prob(np.zeros((2, 4), dtype=int))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 16))
def test_binary_targets_finite_everywhere(d, seed):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((8, d)), rng.standard_normal(8)
    lp = BayesVarSelect(X, y).log_prob(enumerate_grid(d, 2)) if d <= 6 else \
        BayesVarSelect(X, y).log_prob(rng.integers(0, 2, (64, d)))
    assert np.all(np.isfinite(lp))
    side = 3 if d >= 9 else 2
    obs = to_spins(rng.integers(0, 2, (side, d // side))) if d >= side else np.ones((1, d))
    ising = IsingDenoise(obs, beta=rng.uniform(0, 2), eta=rng.uniform(0, 2))
    if ising.d <= 12:
        _, pmf, log_z = exact_distribution(ising)
        assert np.isfinite(log_z) and pmf.sum() == pytest.approx(1.0)
