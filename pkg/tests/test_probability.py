import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isfedavg.probability import (
    AgentProbabilityState,
    DegenerateProbabilityWarning,
    RenormalizationError,
    alpha,
    approx_update_agent_probs,
    approx_update_data_probs,
    floor_probs,
    optimal_agent_probs,
    optimal_data_probs,
    sigma_sk,
    sigma_sk_estimate,
)


def test_alpha_range():
    a = alpha([1, 1, 5, 2], [1, 10, 10, 3])
    np.testing.assert_allclose(a, [9.0, 3.6, 3.12, 4.0])
    assert np.all((a > 3) & (a <= 9))


class TestOptimalData:
    def test_equal_norms(self):
        np.testing.assert_allclose(optimal_data_probs([2.0] * 5), 0.2)

    def test_proportional(self):
        np.testing.assert_allclose(optimal_data_probs([1, 2, 3]), [1 / 6, 1 / 3, 1 / 2])

    def test_zero_norms_are_floored(self):
        p = optimal_data_probs([0, 0, 5], eps=1e-8)
        assert p[0] == p[1] == pytest.approx(1e-8 / 3)
        assert p[2] == pytest.approx(1.0) and abs(p.sum() - 1) < 1e-15

    def test_all_zero_falls_back(self):
        with pytest.warns(DegenerateProbabilityWarning):
            np.testing.assert_allclose(optimal_data_probs([0.0, 0.0]), 0.5)

    def test_scale_invariant(self, rng):
        g = rng.exponential(size=9)
        np.testing.assert_allclose(optimal_data_probs(g), optimal_data_probs(37.5 * g), atol=1e-12)


class TestSigma:
    def test_uniform(self):
        # sum_n N g^2 / N^2 = g^2, times 6 / (E B)
        assert sigma_sk(np.full(4, 0.25), np.full(4, 1.5), 2, 3, 4) == pytest.approx(6 * 1.5**2 / 6)

    def test_zero_norms(self):
        assert sigma_sk(np.full(3, 1 / 3), np.zeros(3), 1, 1, 3) == 0.0

    def test_single_point(self):
        assert sigma_sk([1.0], [0.7], 1, 1, 1) == pytest.approx(6 * 0.49)

    def test_zero_probability_rejected(self):
        with pytest.raises(ValueError):
            sigma_sk([1.0, 0.0], [1.0, 1.0], 1, 1, 2)

    def test_batch_estimate_of_full_batch(self, rng):
        p = rng.dirichlet(np.ones(6))
        g = rng.exponential(size=6)
        # with the whole dataset as the batch, N/B = 1 and B = N
        assert sigma_sk_estimate(p, g, 2, 6) == pytest.approx(sigma_sk(p, g, 2, 6, 6))


class TestOptimalAgent:
    def test_homogeneous(self):
        np.testing.assert_allclose(optimal_agent_probs([1.0] * 4, [4.0] * 4, [0.5] * 4), 0.25)

    def test_worked_example(self):
        np.testing.assert_allclose(optimal_agent_probs([0, 0], [9, 9], [1, 2]), [1 / 3, 2 / 3])

    def test_single(self):
        np.testing.assert_array_equal(optimal_agent_probs([0.3], [5.0], [1.0]), [1.0])

    def test_degenerate(self):
        with pytest.warns(DegenerateProbabilityWarning):
            np.testing.assert_allclose(optimal_agent_probs([0, 0, 0], [9, 9, 9], [0, 0, 0]), 1 / 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            optimal_agent_probs([0, 0], [9, 9], [1])

    def test_scale_invariant(self, rng):
        s, a, g = rng.exponential(size=5), 3 + rng.random(5), rng.exponential(size=5)
        c = 4.2
        # scaling every radicand by c^2
        np.testing.assert_allclose(
            optimal_agent_probs(s, a, g), optimal_agent_probs(c**2 * s, a, c * g), atol=1e-12
        )


def _state(k, p=None):
    st_ = AgentProbabilityState.uniform([1] * k, [1] * k)
    if p is not None:
        st_.p = np.asarray(p, dtype=float)
    return st_


class TestApproxAgent:
    def test_worked_example(self):
        # roots sqrt(1) = 1 and sqrt(4) = 2 split the free mass 2/3 as 1:2
        new = approx_update_agent_probs(_state(3), [0, 1], np.zeros((2, 2)), sigma2=[1.0, 4.0])
        np.testing.assert_allclose(new.p, [2 / 9, 4 / 9, 1 / 3])
        np.testing.assert_allclose(new.sigma2, [1.0, 4.0, 0.0])

    def test_full_participation_is_optimal(self, rng):
        k = 5
        state = AgentProbabilityState(rng.dirichlet(np.ones(k)), rng.exponential(size=k),
                                      alpha(rng.integers(1, 6, k), rng.integers(1, 11, k)))
        grads = rng.standard_normal((k, 3))
        new = approx_update_agent_probs(state, np.arange(k), grads)
        expect = optimal_agent_probs(state.sigma2, state.alpha, np.linalg.norm(grads, axis=1))
        np.testing.assert_allclose(new.p, expect, atol=1e-12)

    def test_equal_gradients_share_equally(self):
        new = approx_update_agent_probs(_state(4, [0.1, 0.2, 0.3, 0.4]), [1, 3], np.ones((2, 2)))
        np.testing.assert_allclose(new.p, [0.1, 0.3, 0.3, 0.3])

    def test_does_not_mutate_input(self):
        s = _state(3)
        approx_update_agent_probs(s, [0], np.ones((1, 2)), sigma2=[5.0])
        np.testing.assert_array_equal(s.p, np.full(3, 1 / 3))
        np.testing.assert_array_equal(s.sigma2, 0)

    def test_no_mass_left(self):
        with pytest.raises(RenormalizationError):
            approx_update_agent_probs(_state(3, [1.0, 0, 0]), [1, 2], np.ones((2, 1)))

    def test_gradient_count_checked(self):
        with pytest.raises(ValueError):
            approx_update_agent_probs(_state(3), [0, 1], np.ones((1, 2)))


class TestApproxData:
    def test_worked_example(self):
        np.testing.assert_allclose(
            approx_update_data_probs(np.full(3, 1 / 3), [0, 1], [1.0, 3.0]), [1 / 6, 1 / 2, 1 / 3]
        )

    def test_full_batch_is_optimal(self, rng):
        g = rng.exponential(size=7)
        np.testing.assert_allclose(
            approx_update_data_probs(rng.dirichlet(np.ones(7)), np.arange(7), g),
            g / g.sum(), atol=1e-12,
        )

    def test_equal_norms(self):
        np.testing.assert_allclose(
            approx_update_data_probs([0.5, 0.1, 0.4], [0, 2], [2.0, 2.0]), [0.45, 0.1, 0.45]
        )

    def test_duplicate_batch_rejected(self):
        with pytest.raises(ValueError):
            approx_update_data_probs(np.full(3, 1 / 3), [0, 0], [1.0, 1.0])


class TestFloor:
    def test_unchanged_without_zeros(self, rng):
        p = rng.dirichlet(np.ones(6))
        np.testing.assert_allclose(floor_probs(p, 1e-14), p, atol=1e-12)

    def test_point_mass(self):
        q = floor_probs([1.0, 0.0], 1e-8)
        assert q[1] >= 5e-9 and q[0] == pytest.approx(1.0) and abs(q.sum() - 1) < 1e-15

    def test_uniform(self):
        np.testing.assert_allclose(floor_probs(np.full(4, 0.25), 1e-8), 0.25)

    def test_large_floor_cascades(self):
        q = floor_probs([0.7, 0.25, 0.05, 0.0], 0.6)
        assert np.all(q >= 0.15 - 1e-15) and abs(q.sum() - 1) < 1e-12
        assert q[0] > q[1] >= q[2] == q[3]


prob_vectors = st.integers(2, 10).flatmap(
    lambda n: st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)
).filter(lambda xs: sum(xs) > 0.01).map(lambda xs: np.array(xs) / np.sum(xs))


@given(prob_vectors, st.floats(1e-10, 0.5))
def test_floor_properties(p, eps):
    q = floor_probs(p, eps)
    assert abs(q.sum() - 1) < 1e-12
    assert np.all(q >= eps / p.size * (1 - 1e-12))
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(q[order]) >= -1e-15)


@given(prob_vectors, st.data())
def test_mass_conservation(p, data):
    n = p.size
    members = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n, unique=True))
    if p[members].sum() <= 1e-9:
        return
    scores = np.array(data.draw(st.lists(st.floats(0.0, 10.0), min_size=len(members),
                                         max_size=len(members))))
    q = approx_update_data_probs(p, members, scores)
    outside = np.setdiff1d(np.arange(n), members)
    np.testing.assert_array_equal(q[outside], p[outside])
    assert abs(q.sum() - 1) < 1e-12
    assert np.all(q >= 0)
