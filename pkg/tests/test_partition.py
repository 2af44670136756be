import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hha import partition
from hha.hybrid_model import HybridSystemParams, most_likely_mode


def recurrence_params(W_x, r, N=1):
    W_x = np.atleast_2d(np.asarray(W_x, dtype=float))
    K, M = W_x.shape
    return HybridSystemParams(
        A=np.tile(np.eye(M), (K, 1, 1)),
        B=np.zeros((K, M, N)),
        b=np.zeros((K, M)),
        Q=np.ones((K, M)),
        W_x=W_x,
        W_u=np.ones((K, N)),  # must be ignored: geometry uses u = 0
        r=np.asarray(r, dtype=float),
    )


def chain_1d():
    return recurrence_params([[-10.0], [0.0], [10.0]], [-10.0, 0.0, -10.0])


def sampled_adjacency(W, r, bounds, eps, n=100_000, seed=0):
    """Pairs whose logits are the top two and within ``eps`` at some sample."""
    rng = np.random.default_rng(seed)
    lb, ub = np.asarray(bounds).T
    X = rng.uniform(lb, ub, (n, len(lb)))
    V = X @ W.T + r
    order = np.argsort(-V, axis=1)
    top, second = order[:, 0], order[:, 1]
    gap = V[np.arange(n), top] - V[np.arange(n), second]
    K = len(r)
    adj = np.eye(K, dtype=bool)
    close = gap < eps
    adj[top[close], second[close]] = True
    adj[second[close], top[close]] = True
    return adj


class TestAdjacency:
    def test_two_regions(self):
        adj = partition.extract_adjacency(recurrence_params([[1.0], [-1.0]], [0, 0]), [[-1, 1]])
        assert adj.tolist() == [[True, True], [True, True]]

    def test_three_region_chain(self):
        adj = partition.extract_adjacency(chain_1d(), [[-3, 3]])
        expected = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
        np.testing.assert_array_equal(adj, expected)

    def test_boundary_outside_bounds(self):
        # boundary at x = 2 lies outside [-1, 1]
        params = recurrence_params([[1.0], [-1.0]], [-2.0, 2.0])
        assert not partition.extract_adjacency(params, [[-1, 1]])[0, 1]

    def test_single_mode(self):
        adj = partition.extract_adjacency(recurrence_params([[0.0]], [0.0]), [[-1, 1]])
        assert adj.tolist() == [[True]]

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            partition.extract_adjacency(chain_1d(), [[1, -1]])

    @pytest.mark.parametrize("seed", range(5))
    def test_agrees_with_sampling(self, seed):
        rng = np.random.default_rng(100 + seed)
        K = 5
        W = rng.normal(0, 3, (K, 2))
        r = rng.normal(0, 1, K)
        bounds = [[-1, 1], [-1, 1]]
        lp = partition.extract_adjacency(recurrence_params(W, r), bounds)
        assert np.array_equal(lp, lp.T)
        fine = sampled_adjacency(W, r, bounds, eps=1e-3, seed=seed)
        coarse = sampled_adjacency(W, r, bounds, eps=0.5, seed=seed)
        assert np.all(lp[fine]), "sampling found a boundary the LP missed"
        assert not np.any(lp & ~coarse), "LP claims a boundary no sample comes near"


class TestRegionMargin:
    def test_signs(self):
        params = recurrence_params([[1.0], [-1.0]], [-2.0, 2.0])
        # on [-1, 1], logit 1 always wins by at least 2
        assert partition.region_margin(params.W_x, params.r, 1, [[-1, 1]]) == pytest.approx(6.0)
        assert partition.region_margin(params.W_x, params.r, 0, [[-1, 1]]) == pytest.approx(-2.0)


class TestControlPrior:
    def test_two_class_threshold(self):
        params = recurrence_params([[1.0], [-1.0]], [0, 0])
        cp = partition.control_prior(params, 0, theta=0.7, bounds=[[-5, 5]], init=[0.0])
        assert cp.success
        assert cp.point[0] >= np.log(7 / 3) / 2 - 1e-12
        assert cp.attained_probability >= 0.7

    def test_unreachable_target(self):
        params = recurrence_params([[1.0], [-1.0]], [-20.0, 20.0])
        cp = partition.control_prior(params, 0, bounds=[[-1, 1]], init=[0.0])
        assert not cp.success
        assert cp.attained_probability < 0.7
        assert -1 <= cp.point[0] <= 1

    def test_already_satisfied(self):
        params = recurrence_params([[1.0], [-1.0]], [0, 0])
        cp = partition.control_prior(params, 0, bounds=[[-5, 5]], init=[3.0])
        assert cp.iterations == 0
        assert cp.point[0] == 3.0

    def test_theta_range(self):
        with pytest.raises(ValueError):
            partition.control_prior(chain_1d(), 0, theta=1.0, bounds=[[-3, 3]])

    def test_chain_priors_classify_to_target(self):
        priors = partition.control_priors(chain_1d(), [[-3, 3]])
        for p in priors:
            assert p.success
            assert most_likely_mode(p.point, np.zeros(1), chain_1d()) == p.mode

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        K, M = 4, 3
        W = rng.normal(0, 1, (K, M))
        r = rng.normal(0, 1, K)
        x = rng.normal(0, 1, M)
        j = int(rng.integers(K))
        _, g = partition.softmax_input_gradient(x, j, W, r)
        h = 1e-6
        for d in range(M):
            e = np.zeros(M)
            e[d] = h
            fd = (
                partition.softmax_input_gradient(x + e, j, W, r)[0]
                - partition.softmax_input_gradient(x - e, j, W, r)[0]
            ) / (2 * h)
            assert abs(fd - g[d]) <= 1e-6 * max(1.0, abs(fd))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_successful_priors_classify_to_target(self, seed):
        rng = np.random.default_rng(seed)
        params = recurrence_params(rng.normal(0, 3, (4, 2)), rng.normal(0, 1, 4))
        for p in partition.control_priors(params, [[-1, 1], [-1, 1]]):
            assert np.all(np.abs(p.point) <= 1)
            if p.success:
                assert most_likely_mode(p.point, np.zeros(1), params) == p.mode
