import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zodpo.errors import DimensionError, ValidationError
from zodpo.lq import (
    DecentralizedPolicy,
    GaussianNoise,
    LinearSystem,
    ObservationPattern,
    QuadraticCost,
    closed_loop,
    global_gain,
    simulate,
)

OVERLAP_SETS = [[1, 2, 3], [3, 4, 5], [3, 5, 6, 7, 8]]


def scalar_problem(a=0.5):
    system = LinearSystem([[a]], [[1.0]], [[1.0]])
    pattern = ObservationPattern.full(1, 1)
    cost = QuadraticCost((np.eye(1),), (np.eye(1),))
    return system, pattern, cost


def overlap_pattern():
    return ObservationPattern.from_one_based(8, OVERLAP_SETS, [2, 2, 2])


def random_policy(pattern, rng, bias=False):
    Ks = tuple(rng.normal(size=pattern.gain_shape(i)) for i in range(pattern.N))
    bs = tuple(rng.normal(size=m) for m in pattern.input_dims) if bias else None
    return DecentralizedPolicy(Ks, bs)


def test_global_gain_full_observation_is_identity_map():
    pattern = ObservationPattern.full(3, 2)
    K = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(global_gain(DecentralizedPolicy((K,)), pattern), K)


def test_global_gain_overlapping_sparsity():
    pattern = overlap_pattern()
    rng = np.random.default_rng(0)
    M = global_gain(random_policy(pattern, rng), pattern)
    assert M.shape == (6, 8)
    expected_cols = [{0, 1, 2}, {2, 3, 4}, {2, 4, 5, 6, 7}]
    for i, cols in enumerate(expected_cols):
        block = M[2 * i : 2 * i + 2]
        assert set(np.flatnonzero(np.any(block != 0, axis=0))) == cols


def test_global_gain_zero_policy():
    pattern = overlap_pattern()
    assert not np.any(global_gain(DecentralizedPolicy.zeros(pattern), pattern))


def test_global_gain_shape_mismatch():
    pattern = overlap_pattern()
    bad = DecentralizedPolicy((np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 5))))
    with pytest.raises(DimensionError):
        global_gain(bad, pattern)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_global_gain_linear(seed, alpha, beta):
    pattern = overlap_pattern()
    rng = np.random.default_rng(seed)
    p1, p2 = random_policy(pattern, rng), random_policy(pattern, rng)
    combo = p1.with_vector(alpha * p1.vectorize() + beta * p2.vectorize())
    np.testing.assert_allclose(
        global_gain(combo, pattern),
        alpha * global_gain(p1, pattern) + beta * global_gain(p2, pattern),
        atol=1e-12,
    )


def test_global_gain_injective():
    pattern = overlap_pattern()
    n_K = DecentralizedPolicy.zeros(pattern).n_params
    cols = []
    for k in range(n_K):
        e = np.zeros(n_K)
        e[k] = 1.0
        cols.append(global_gain(DecentralizedPolicy.zeros(pattern).with_vector(e), pattern).ravel())
    assert np.linalg.matrix_rank(np.array(cols)) == n_K


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_vectorize_roundtrip_and_norm(seed, bias):
    pattern = overlap_pattern()
    rng = np.random.default_rng(seed)
    p = random_policy(pattern, rng, bias=bias)
    v = p.vectorize()
    q = p.with_vector(v)
    for a, b in zip(p.K_list, q.K_list):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(q.vectorize(), v)
    expected = sum(2 * n for n in (3, 3, 5)) + (6 if bias else 0)
    assert p.n_params == expected
    if not bias:
        assert np.linalg.norm(v) == pytest.approx(np.sqrt(sum(np.sum(k * k) for k in p.K_list)), rel=1e-14)


def test_closed_loop_examples():
    system, _, _ = scalar_problem()
    assert closed_loop(system, np.zeros((1, 1)))[0, 0] == 0.5
    assert closed_loop(system, np.array([[-0.5]]))[0, 0] == 0.0


def test_simulate_zero_everything():
    system = LinearSystem(np.diag([0.3, 0.9]), np.eye(2), np.eye(2))
    pattern = ObservationPattern(2, ((0,), (1,)), (1, 1))
    cost = QuadraticCost((np.eye(2), np.eye(2)), (np.eye(2), np.eye(2)))
    traj = simulate(system, DecentralizedPolicy.zeros(pattern), pattern, cost, np.zeros(2), 20)
    assert not np.any(traj.states)
    assert not np.any(traj.local_costs)


def test_simulate_geometric_decay():
    system, pattern, cost = scalar_problem()
    traj = simulate(system, DecentralizedPolicy.zeros(pattern), pattern, cost, [1.0], 6)
    np.testing.assert_allclose(traj.states[:, 0], 0.5 ** np.arange(7))
    np.testing.assert_allclose(traj.local_costs[:, 0], 0.25 ** np.arange(7))


def test_simulate_matches_hand_recursion():
    rng = np.random.default_rng(3)
    A = np.array([[0.6, 0.2], [-0.1, 0.7]])
    B = np.array([[1.0, 0.0], [0.3, 1.0]])
    system = LinearSystem(A, B, np.eye(2), d=np.array([0.1, -0.2]))
    pattern = ObservationPattern(2, ((0, 1), (1,)), (1, 1))
    Q1, Q2 = np.diag([1.0, 0.0]), np.diag([0.0, 2.0])
    cost = QuadraticCost((Q1, Q2), (np.eye(2), 0.5 * np.eye(2)))
    policy = DecentralizedPolicy((np.array([[-0.2, 0.1]]), np.array([[-0.3]])), (np.array([0.05]), np.array([-0.1])))
    w = rng.normal(size=(40, 2))
    traj = simulate(system, policy, pattern, cost, [1.0, -1.0], 40, noise=w)

    x = np.array([1.0, -1.0])
    for t in range(41):
        u = np.array([-0.2 * x[0] + 0.1 * x[1] + 0.05, -0.3 * x[1] - 0.1])
        np.testing.assert_allclose(traj.states[t], x, rtol=0, atol=1e-12)
        np.testing.assert_allclose(traj.inputs[t], u, atol=1e-12)
        c = [x @ Q1 @ x + u @ u, x @ Q2 @ x + 0.5 * u @ u]
        np.testing.assert_allclose(traj.local_costs[t], c, atol=1e-12)
        # averaged cost identity
        avg = x @ cost.Q @ x + u @ cost.R @ u
        assert traj.local_costs[t].mean() == pytest.approx(avg, rel=1e-10, abs=1e-14)
        if t < 40:
            x = A @ x + B @ u + system.d + w[t]


def test_simulate_divergence_is_flagged_not_raised():
    system = LinearSystem([[3.0]], [[1.0]], [[1.0]])
    pattern = ObservationPattern.full(1, 1)
    cost = QuadraticCost((np.eye(1),), (np.eye(1),))
    traj = simulate(system, DecentralizedPolicy.zeros(pattern), pattern, cost, [1.0], 1000)
    assert traj.diverged
    assert traj.horizon < 1000
    assert np.all(np.abs(traj.states) <= 1e9)
    assert len(traj.states) == len(traj.inputs) == len(traj.local_costs)


def test_simulate_exogenous_feedforward():
    system = LinearSystem([[0.5]], [[1.0]], [[1.0]], e=[0.2])
    pattern = ObservationPattern.full(1, 1)
    cost = QuadraticCost((np.eye(1),), (np.eye(1),))
    policy = DecentralizedPolicy((np.array([[0.0]]),), None, (np.array([-0.2]),))
    # feedforward cancels the exogenous drift exactly
    traj = simulate(system, policy, pattern, cost, [0.0], 10, exo=np.linspace(0, 5, 11))
    np.testing.assert_allclose(traj.states, 0.0, atol=1e-15)


def test_gaussian_noise_covariance():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    w = GaussianNoise(S, np.random.default_rng(0)).take(200_000)
    np.testing.assert_allclose(np.cov(w.T), S, atol=0.03)


def test_invariants_rejected():
    with pytest.raises(ValidationError):
        LinearSystem(np.eye(2), np.eye(2), np.array([[1.0, 0.2], [0.0, 1.0]]))
    with pytest.raises(ValidationError):
        LinearSystem(np.eye(2), np.eye(2), np.diag([1.0, 0.0]))
    with pytest.raises(DimensionError):
        LinearSystem(np.eye(2), np.eye(3), np.eye(2))
    with pytest.raises(ValidationError):
        ObservationPattern.from_one_based(3, [[1, 4]], [1])
    with pytest.raises(ValidationError):
        QuadraticCost((np.diag([1.0, 0.0]),), (np.eye(1),))
    with pytest.raises(ValidationError):
        QuadraticCost((-np.eye(1),), (np.eye(1),))


def test_overlapping_sets_allowed():
    pattern = overlap_pattern()
    assert pattern.N == 3 and pattern.m == 6
