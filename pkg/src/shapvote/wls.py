"""KernelSHAP: Shapley values as an equality-constrained weighted least squares fit."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import DomainError, SingularityError, UnderdeterminedError
from .game import (
    GameOracle,
    ShapleyKernel,
    enumerate_coalitions,
    kernel_weight,
    sample_coalitions,
)

DEFAULT_SAMPLED_RIDGE = 1e-6


@dataclass
class WlsProblem:
    """Weighted observations ``(mask, weight, v(s) - v(0))`` plus ``v(1) - v(0)``."""

    n_players: int
    masks: np.ndarray
    weights: np.ndarray
    value_deltas: np.ndarray
    total_delta: float

    def __post_init__(self):
        self.masks = np.atleast_2d(np.asarray(self.masks, dtype=bool))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.value_deltas = np.asarray(self.value_deltas, dtype=np.float64)
        if self.masks.shape[1] != self.n_players:
            raise DomainError(
                f"masks have {self.masks.shape[1]} columns, expected {self.n_players}"
            )
        if not (len(self.masks) == len(self.weights) == len(self.value_deltas)):
            raise DomainError("masks, weights and value_deltas differ in length")
        sizes = self.masks.sum(axis=1)
        if np.any(sizes < 1) or np.any(sizes > self.n_players - 1):
            raise DomainError("observation masks must have size in [1, N-1]")
        if np.any(self.weights <= 0):
            raise DomainError("observation weights must be strictly positive")

    def deduplicated(self) -> "WlsProblem":
        """Merge repeated masks: weights add, deltas are weight-averaged."""
        masks, inverse = np.unique(self.masks, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        weights = np.zeros(len(masks))
        weighted = np.zeros(len(masks))
        np.add.at(weights, inverse, self.weights)
        np.add.at(weighted, inverse, self.weights * self.value_deltas)
        return WlsProblem(self.n_players, masks, weights, weighted / weights, self.total_delta)


def _solve_spd(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    tiny = 1e-13 * a.shape[0] * max(np.abs(a).max(), np.finfo(float).tiny)
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
        if np.diag(factor[0]).min() ** 2 > tiny:
            return linalg.cho_solve(factor, rhs)
    except linalg.LinAlgError:
        pass
    try:
        with np.errstate(all="raise"), warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            lu = linalg.lu_factor(a)
            if np.abs(np.diag(lu[0])).min() <= tiny:
                raise linalg.LinAlgError("singular")
            return linalg.lu_solve(lu, rhs)
    except (linalg.LinAlgError, linalg.LinAlgWarning, FloatingPointError) as exc:
        raise SingularityError(
            "the weighted Gram matrix is singular; pass a positive ridge"
        ) from exc


def solve_constrained_wls(problem: WlsProblem, ridge: float = 0.0) -> np.ndarray:
    """Minimise ``sum w (dv - s.phi)^2`` subject to ``sum(phi) == total_delta``.

    Solved in closed form from the KKT conditions::

        A = sum w s s^T + ridge I,   b = sum w s dv
        phi = A^-1 (b - 1 (1^T A^-1 b - total) / (1^T A^-1 1))
    """
    if ridge < 0:
        raise DomainError(f"ridge must be non-negative, got {ridge}")
    problem = problem.deduplicated()
    n = problem.n_players
    if len(problem.masks) < n:
        raise UnderdeterminedError(
            f"{len(problem.masks)} distinct coalitions cannot identify {n} values"
        )
    s = problem.masks.astype(np.float64)
    ws = s * problem.weights[:, None]
    a = ws.T @ s + ridge * np.eye(n)
    b = ws.T @ problem.value_deltas
    ones = np.ones(n)
    sol = _solve_spd(a, np.column_stack([b, ones]))
    a_inv_b, a_inv_1 = sol[:, 0], sol[:, 1]
    phi = a_inv_b - a_inv_1 * (a_inv_b.sum() - problem.total_delta) / a_inv_1.sum()
    # remove the residual roundoff so the constraint holds to working precision
    phi += (problem.total_delta - phi.sum()) / n
    return phi


def full_enumeration_problem(game: GameOracle, y: int = 0) -> WlsProblem:
    """Every proper non-empty coalition, weighted by the Shapley kernel."""
    n = game.n_players
    masks = enumerate_coalitions(n)
    table = game.values(masks)[:, y]
    v0, v1 = table[0], table[-1]
    inner = masks[1:-1]
    sizes = inner.sum(axis=1)
    weights = np.array([kernel_weight(n, k) for k in range(1, n)])[sizes - 1]
    return WlsProblem(n, inner, weights, table[1:-1] - v0, v1 - v0)


def kernel_shap_exact(game: GameOracle, y: int = 0) -> np.ndarray:
    """KernelSHAP over the full coalition enumeration; equals the Shapley values."""
    return solve_constrained_wls(full_enumeration_problem(game, y), ridge=0.0)


def estimate_shapley_sampled(
    game: GameOracle,
    y: int,
    n_samples: int,
    rng: np.random.Generator,
    paired: bool = True,
    ridge: float = DEFAULT_SAMPLED_RIDGE,
) -> np.ndarray:
    """Sampled KernelSHAP with unit weights (the sampler already follows the kernel).

    ``n_samples`` counts game evaluations; with ``paired`` every draw
    contributes itself and its complement.
    """
    n = game.n_players
    if n_samples < 2 * n:
        raise DomainError(f"n_samples must be at least 2N = {2 * n}, got {n_samples}")
    dist = ShapleyKernel(n)
    if paired:
        half = sample_coalitions(rng, dist, (n_samples + 1) // 2)
        masks = np.empty((2 * len(half), n), dtype=bool)
        masks[0::2] = half
        masks[1::2] = ~half
        masks = masks[:n_samples]
    else:
        masks = sample_coalitions(rng, dist, n_samples)
    ends = game.values(np.vstack([np.zeros(n, bool), np.ones(n, bool)]))[:, y]
    v = game.values(masks)[:, y]
    problem = WlsProblem(n, masks, np.ones(len(masks)), v - ends[0], ends[1] - ends[0])
    return solve_constrained_wls(problem, ridge=ridge)
