import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapvote.exceptions import CapacityError, DimensionError, DomainError
from shapvote.game import (
    FunctionGame,
    ShapleyKernel,
    TabularGame,
    enumerate_coalitions,
    exact_shapley,
    kernel_weight,
    pack_mask,
    sample_coalition,
    sample_coalition_paired,
    sample_coalitions,
    shapley_from_table,
    unpack_mask,
)


def permutation_shapley(value, n):
    """Average marginal contribution over all player orderings."""
    phi = np.zeros(n)
    orders = list(itertools.permutations(range(n)))
    for order in orders:
        present = np.zeros(n, dtype=bool)
        before = value(present)
        for player in order:
            present[player] = True
            after = value(present)
            phi[player] += after - before
            before = after
    return phi / len(orders)


def glove(s):
    return float(s[2] and (s[0] or s[1]))


class TestKernelWeight:
    @pytest.mark.parametrize("n,size,expected", [(4, 1, 0.25), (4, 2, 0.125), (2, 1, 0.5)])
    def test_examples(self, n, size, expected):
        assert kernel_weight(n, size) == expected

    @pytest.mark.parametrize("n", range(2, 21))
    def test_matches_rational(self, n):
        for k in range(1, n):
            exact = Fraction((n - 1) * math.factorial(k - 1) * math.factorial(n - k - 1), math.factorial(n))
            assert kernel_weight(n, k) == float(exact)

    def test_symmetry_exact(self):
        for n in range(2, 21):
            for k in range(1, n):
                assert kernel_weight(n, k) == kernel_weight(n, n - k)

    def test_log_space_branch_agrees(self):
        n, k = 30, 7
        exact = Fraction((n - 1) * math.factorial(k - 1) * math.factorial(n - k - 1), math.factorial(n))
        assert kernel_weight(n, k) == pytest.approx(float(exact), rel=1e-12)

    @pytest.mark.parametrize("n,size", [(4, 0), (4, 4), (1, 1), (5, -1)])
    def test_domain(self, n, size):
        with pytest.raises(DomainError):
            kernel_weight(n, size)


class TestShapleyKernel:
    @pytest.mark.parametrize("n", [2, 3, 4, 8, 16, 25, 100])
    def test_marginals_normalised_and_symmetric(self, n):
        dist = ShapleyKernel(n)
        assert abs(dist.size_marginals.sum() - 1.0) <= 1e-12
        np.testing.assert_array_equal(dist.size_weights, dist.size_weights[::-1])
        np.testing.assert_allclose(dist.size_marginals, dist.size_marginals[::-1], rtol=1e-12)

    @pytest.mark.parametrize("n", [5, 12, 25, 60])
    def test_marginals_match_rational(self, n):
        mass = [
            Fraction((n - 1) * math.factorial(k - 1) * math.factorial(n - k - 1), math.factorial(n))
            * math.comb(n, k)
            for k in range(1, n)
        ]
        expected = [float(m / sum(mass)) for m in mass]
        np.testing.assert_allclose(ShapleyKernel(n).size_marginals, expected, rtol=1e-13)

    def test_n4_marginals(self):
        np.testing.assert_allclose(ShapleyKernel(4).size_marginals, [4 / 11, 3 / 11, 4 / 11], rtol=1e-14)

    def test_rejects_single_player(self):
        with pytest.raises(DomainError):
            ShapleyKernel(1)


class TestSampling:
    def test_two_players_single_bit(self):
        for seed in range(20):
            assert sample_coalition(np.random.default_rng(seed), ShapleyKernel(2)).sum() == 1

    def test_size_frequencies_n4(self):
        masks = sample_coalitions(np.random.default_rng(0), ShapleyKernel(4), 100_000)
        freq = np.bincount(masks.sum(axis=1), minlength=5) / len(masks)
        assert abs(freq[1] - 4 / 11) <= 0.01
        assert abs(freq[2] - 3 / 11) <= 0.01
        assert freq[0] == 0 and freq[4] == 0

    def test_subsets_uniform_within_size(self):
        masks = sample_coalitions(np.random.default_rng(1), ShapleyKernel(4), 60_000)
        pairs = masks[masks.sum(axis=1) == 2]
        codes = [pack_mask(m) for m in pairs]
        counts = np.bincount(codes, minlength=16)[[3, 5, 6, 9, 10, 12]]
        assert counts.min() / counts.max() > 0.9

    def test_deterministic(self):
        d = ShapleyKernel(7)
        a = sample_coalitions(np.random.default_rng(3), d, 50)
        b = sample_coalitions(np.random.default_rng(3), d, 50)
        np.testing.assert_array_equal(a, b)

    def test_paired_is_complement(self):
        dist = ShapleyKernel(4)
        for seed in range(30):
            s, t = sample_coalition_paired(np.random.default_rng(seed), dist)
            np.testing.assert_array_equal(t, ~s)
            assert 1 <= t.sum() <= 3 and s.sum() + t.sum() == 4

    def test_paired_example(self):
        s = np.array([False, True, False, True])
        assert pack_mask(~s) == pack_mask(np.array([True, False, True, False]))


class TestEnumeration:
    def test_n2_order(self):
        np.testing.assert_array_equal(
            enumerate_coalitions(2), [[False, False], [True, False], [False, True], [True, True]]
        )

    def test_distinct_and_ordered(self):
        masks = enumerate_coalitions(5)
        assert len(masks) == 32
        assert [pack_mask(m) for m in masks] == list(range(32))
        assert len(enumerate_coalitions(3)) == 8

    def test_cap(self):
        with pytest.raises(CapacityError):
            enumerate_coalitions(21)

    @given(st.integers(0, 2**12 - 1))
    def test_pack_roundtrip(self, code):
        assert pack_mask(unpack_mask(code, 12)) == code


class TestExactShapley:
    def test_additive(self):
        c = np.array([0.5, -1.0, 2.0])
        phi = exact_shapley(FunctionGame(lambda s: float(s @ c), 3))
        np.testing.assert_allclose(phi, c, atol=1e-15)

    def test_glove(self):
        phi = exact_shapley(FunctionGame(glove, 3))
        assert np.max(np.abs(phi - [1 / 6, 1 / 6, 2 / 3])) <= 1e-12
        np.testing.assert_allclose(permutation_shapley(glove, 3), [1 / 6, 1 / 6, 2 / 3], atol=1e-15)

    def test_zero_game(self):
        np.testing.assert_array_equal(exact_shapley(TabularGame(np.zeros(16))), np.zeros(4))

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_matches_permutation_oracle(self, n):
        table = np.random.default_rng(n).uniform(-1, 1, 1 << n)
        value = lambda s: table[pack_mask(s)]
        np.testing.assert_allclose(exact_shapley(TabularGame(table)), permutation_shapley(value, n), atol=1e-12)

    def test_multiclass_table(self):
        table = np.random.default_rng(0).normal(size=(32, 3))
        phi = shapley_from_table(table)
        for y in range(3):
            np.testing.assert_allclose(phi[:, y], exact_shapley(TabularGame(table), y), atol=0)

    def test_capacity_guard(self):
        game = FunctionGame(lambda s: 0.0, 21)
        with pytest.raises(CapacityError):
            exact_shapley(game)

    def test_bad_class(self):
        with pytest.raises(DomainError):
            exact_shapley(TabularGame(np.zeros(8)), 1)

    def test_evaluate_checks_mask(self):
        with pytest.raises(DimensionError):
            TabularGame(np.zeros(8)).evaluate(np.ones(2, bool), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_efficiency_property(n, seed):
    table = np.random.default_rng(seed).uniform(-1, 1, 1 << n)
    total = table[-1] - table[0]
    assert abs(exact_shapley(TabularGame(table)).sum() - total) <= 1e-9 * max(1.0, abs(total))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2**32 - 1))
def test_symmetry_and_null_player(n, seed):
    rng = np.random.default_rng(seed)
    codes = np.arange(1 << n)
    # v depends on players 0 and 1 only through their count; player n-1 is null
    base = rng.uniform(-1, 1, 1 << n)
    canon = (codes & ~0b11) | np.where(np.bitwise_count(codes & 0b11) == 2, 0b11, np.where(codes & 0b11, 0b01, 0))
    table = base[canon & ~(1 << (n - 1))]
    phi = exact_shapley(TabularGame(table))
    assert abs(phi[0] - phi[1]) <= 1e-10
    assert abs(phi[n - 1]) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(n, seed, a, b):
    rng = np.random.default_rng(seed)
    v1, v2 = rng.uniform(-1, 1, (2, 1 << n))
    lhs = exact_shapley(TabularGame(a * v1 + b * v2))
    rhs = a * exact_shapley(TabularGame(v1)) + b * exact_shapley(TabularGame(v2))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9
