import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapvote.exceptions import DomainError, SingularityError, UnderdeterminedError
from shapvote.game import FunctionGame, TabularGame, enumerate_coalitions, exact_shapley
from shapvote.wls import (
    WlsProblem,
    estimate_shapley_sampled,
    full_enumeration_problem,
    kernel_shap_exact,
    solve_constrained_wls,
)


def glove(s):
    return float(s[2] and (s[0] or s[1]))


def test_glove_full_enumeration():
    phi = kernel_shap_exact(FunctionGame(glove, 3))
    assert np.max(np.abs(phi - [1 / 6, 1 / 6, 2 / 3])) <= 1e-8


def test_additive_full_enumeration():
    c = np.array([0.5, -1.0, 2.0])
    phi = kernel_shap_exact(FunctionGame(lambda s: float(s @ c), 3))
    assert np.max(np.abs(phi - c)) <= 1e-8


@pytest.mark.parametrize("seed", range(30))
def test_full_enumeration_matches_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    game = TabularGame(rng.uniform(-1, 1, 1 << n))
    assert np.max(np.abs(kernel_shap_exact(game) - exact_shapley(game))) <= 1e-8


def test_closed_form_matches_generic_kkt_solve():
    """Solve the bordered KKT system directly as an independent route."""
    rng = np.random.default_rng(4)
    n = 5
    problem = full_enumeration_problem(TabularGame(rng.uniform(-1, 1, 1 << n)))
    s = problem.masks.astype(float)
    w = problem.weights
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2 * (s.T * w) @ s
    kkt[:n, n] = kkt[n, :n] = 1.0
    rhs = np.concatenate([2 * (s.T * w) @ problem.value_deltas, [problem.total_delta]])
    expected = np.linalg.solve(kkt, rhs)[:n]
    np.testing.assert_allclose(solve_constrained_wls(problem), expected, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 9), st.integers(0, 2**32 - 1), st.integers(30, 400))
def test_constraint_exact(n, seed, n_samples):
    rng = np.random.default_rng(seed)
    game = TabularGame(rng.uniform(-5, 5, 1 << n))
    n_samples = max(n_samples, 2 * n)
    phi = estimate_shapley_sampled(game, 0, n_samples, rng, paired=bool(seed % 2))
    total = game.table[-1, 0] - game.table[0, 0]
    assert abs(phi.sum() - total) <= 1e-10 * max(1.0, abs(total))


def test_sampled_close_to_exact():
    game = TabularGame(np.random.default_rng(99).uniform(-1, 1, 256))
    phi = estimate_shapley_sampled(game, 0, 10_000, np.random.default_rng(0), paired=True)
    assert np.max(np.abs(phi - exact_shapley(game))) <= 0.05


def test_sampled_deterministic():
    game = TabularGame(np.random.default_rng(1).uniform(-1, 1, 64))
    a = estimate_shapley_sampled(game, 0, 100, np.random.default_rng(5))
    b = estimate_shapley_sampled(game, 0, 100, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_unpaired_sampling_also_converges():
    game = TabularGame(np.random.default_rng(2).uniform(-1, 1, 64))
    phi = estimate_shapley_sampled(game, 0, 20_000, np.random.default_rng(1), paired=False)
    assert np.max(np.abs(phi - exact_shapley(game))) <= 0.05


def test_deduplication_preserves_optimum():
    rng = np.random.default_rng(3)
    masks = enumerate_coalitions(4)[1:-1]
    deltas = rng.normal(size=len(masks))
    once = WlsProblem(4, masks, np.ones(len(masks)), deltas, 0.7)
    twice = WlsProblem(4, np.vstack([masks, masks[:3]]), np.ones(len(masks) + 3),
                       np.concatenate([deltas, deltas[:3]]), 0.7)
    weighted = WlsProblem(4, masks, np.r_[2.0, 2.0, 2.0, np.ones(len(masks) - 3)], deltas, 0.7)
    np.testing.assert_allclose(solve_constrained_wls(twice), solve_constrained_wls(weighted), atol=1e-12)
    assert not np.allclose(solve_constrained_wls(once), solve_constrained_wls(twice))


def test_underdetermined():
    masks = np.array([[True, False, False], [False, True, False]])
    with pytest.raises(UnderdeterminedError):
        solve_constrained_wls(WlsProblem(3, masks, [1.0, 1.0], [0.1, 0.2], 1.0))


def test_singular_without_ridge():
    # three distinct masks that never separate players 0 and 1
    masks = np.array([[True, True, False, False], [False, False, True, False],
                      [True, True, True, False], [False, False, False, True]])
    problem = WlsProblem(4, masks, np.ones(4), [0.1, 0.2, 0.3, 0.4], 1.0)
    with pytest.raises(SingularityError, match="ridge"):
        solve_constrained_wls(problem, ridge=0.0)
    phi = solve_constrained_wls(problem, ridge=1e-6)
    assert abs(phi.sum() - 1.0) <= 1e-10


@pytest.mark.parametrize("bad", [
    dict(masks=[[False, False, False]]),
    dict(masks=[[True, True, True]]),
    dict(weights=[0.0]),
])
def test_problem_validation(bad):
    kwargs = dict(masks=[[True, False, False]], weights=[1.0], value_deltas=[0.0], total_delta=0.0)
    kwargs.update(bad)
    with pytest.raises(DomainError):
        WlsProblem(3, **kwargs)


def test_too_few_samples():
    with pytest.raises(DomainError):
        estimate_shapley_sampled(TabularGame(np.zeros(16)), 0, 7, np.random.default_rng(0))
