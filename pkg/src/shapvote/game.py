"""Coalitions, the Shapley kernel and a brute-force Shapley oracle.

A coalition over ``N`` players is a length-``N`` boolean numpy array; player
``i`` is present when ``mask[i]`` is true. Where a coalition must be packed
into an integer, bit ``i`` holds player ``i`` (so ``[True, False]`` is ``1``).
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import CapacityError, DimensionError, DomainError

MAX_ENUMERATION_PLAYERS = 20

__all__ = [
    "GameOracle",
    "TabularGame",
    "FunctionGame",
    "ShapleyKernel",
    "kernel_weight",
    "enumerate_coalitions",
    "pack_mask",
    "unpack_mask",
    "sample_coalition",
    "sample_coalitions",
    "sample_coalition_paired",
    "exact_shapley",
    "shapley_from_table",
]


def check_mask(mask, n_players: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.shape[0] != n_players:
        raise DimensionError(
            f"mask has shape {mask.shape}, expected ({n_players},)"
        )
    return mask.astype(bool, copy=False)


def pack_mask(mask) -> int:
    """Pack a boolean coalition into an integer (bit ``i`` = player ``i``)."""
    mask = np.asarray(mask, dtype=bool)
    return int(sum(1 << i for i in np.flatnonzero(mask)))


def unpack_mask(code: int, n_players: int) -> np.ndarray:
    return ((code >> np.arange(n_players)) & 1).astype(bool)


def _check_enumerable(n: int) -> None:
    if n < 1:
        raise DomainError(f"n_players must be positive, got {n}")
    if n > MAX_ENUMERATION_PLAYERS:
        raise CapacityError(
            f"enumeration over {n} players exceeds the cap of "
            f"{MAX_ENUMERATION_PLAYERS}"
        )


def enumerate_coalitions(n: int) -> np.ndarray:
    """All ``2**n`` coalitions as a ``(2**n, n)`` boolean array.

    Rows follow increasing integer order of the packed representation, so row
    ``c`` is ``unpack_mask(c, n)``.
    """
    _check_enumerable(n)
    codes = np.arange(1 << n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


# -- game oracles -------------------------------------------------------------


class GameOracle(ABC):
    """A cooperative game ``v_y(s)`` over ``n_players`` for ``n_classes`` outputs.

    Subclasses implement :meth:`values`, which evaluates a batch of
    coalitions for every class at once. ``evaluate`` is the scalar view.
    """

    n_players: int
    n_classes: int

    @abstractmethod
    def values(self, masks: np.ndarray) -> np.ndarray:
        """Return a ``(len(masks), n_classes)`` array of coalition values."""

    def evaluate(self, mask, y: int) -> float:
        mask = check_mask(mask, self.n_players)
        if not 0 <= y < self.n_classes:
            raise DomainError(f"class {y} outside [0, {self.n_classes})")
        return float(self.values(mask[None, :])[0, y])

    def value_table(self) -> np.ndarray:
        """Values of every coalition, indexed by packed integer code."""
        return np.asarray(
            self.values(enumerate_coalitions(self.n_players)), dtype=np.float64
        )


class TabularGame(GameOracle):
    """A game given explicitly by its ``(2**N,)`` or ``(2**N, K)`` value table."""

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim == 1:
            table = table[:, None]
        n = int(round(math.log2(table.shape[0]))) if table.shape[0] else 0
        if n < 1 or table.shape[0] != 1 << n:
            raise DimensionError(
                f"table length {table.shape[0]} is not a power of two >= 2"
            )
        self.n_players = n
        self.n_classes = table.shape[1]
        self.table = table

    def values(self, masks):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        codes = masks.astype(np.int64) @ (np.int64(1) << np.arange(self.n_players))
        return self.table[codes]

    def value_table(self):
        return self.table.copy()


class FunctionGame(GameOracle):
    """Wrap ``fn(mask) -> float`` (or ``-> array of K values``) as a game."""

    def __init__(self, fn: Callable[[np.ndarray], float], n_players: int, n_classes: int = 1):
        self.fn = fn
        self.n_players = n_players
        self.n_classes = n_classes

    def values(self, masks):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = np.empty((masks.shape[0], self.n_classes))
        for row, mask in enumerate(masks):
            out[row] = self.fn(mask)
        return out


# -- Shapley kernel -------------------------------------------------------------


def _log_factorial(k: int) -> float:
    return math.lgamma(k + 1)


def kernel_weight(n: int, size: int) -> float:
    """Per-coalition Shapley kernel weight ``(n-1)(size-1)!(n-size-1)!/n!``."""
    if n < 2:
        raise DomainError(f"the Shapley kernel needs n >= 2, got {n}")
    if not 0 < size < n:
        raise DomainError(
            f"coalition size must lie strictly between 0 and {n}, got {size}"
        )
    size = min(size, n - size)  # the weight is symmetric; keep it bit-exactly so
    if n <= MAX_ENUMERATION_PLAYERS:
        num = (n - 1) * math.factorial(size - 1) * math.factorial(n - size - 1)
        return num / math.factorial(n)
    return math.exp(
        math.log(n - 1)
        + _log_factorial(size - 1)
        + _log_factorial(n - size - 1)
        - _log_factorial(n)
    )


@dataclass(frozen=True)
class ShapleyKernel:
    """Sampling distribution over coalitions of size ``1..N-1``.

    ``size_weights[k-1]`` is the weight of one coalition of size ``k`` and
    ``size_marginals[k-1]`` the probability of drawing any coalition of that
    size.
    """

    n_players: int
    size_weights: np.ndarray = field(init=False, repr=False)
    size_marginals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_players
        if n < 2:
            raise DomainError(f"the Shapley kernel needs n >= 2, got {n}")
        sizes = np.arange(1, n)
        weights = np.array([kernel_weight(n, int(k)) for k in sizes])
        # weight * C(n, k) collapses to (n - 1) / (k (n - k))
        mass = (n - 1) / (sizes * (n - sizes)).astype(np.float64)
        object.__setattr__(self, "size_weights", weights)
        object.__setattr__(self, "size_marginals", mass / mass.sum())


def sample_coalitions(rng: np.random.Generator, dist: ShapleyKernel, n_draws: int) -> np.ndarray:
    """Draw ``n_draws`` coalitions: a size from the kernel, then a uniform subset."""
    n = dist.n_players
    sizes = rng.choice(np.arange(1, n), size=n_draws, p=dist.size_marginals)
    keys = rng.random((n_draws, n))
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ranks < sizes[:, None]


def sample_coalition(rng: np.random.Generator, dist: ShapleyKernel) -> np.ndarray:
    return sample_coalitions(rng, dist, 1)[0]


def sample_coalition_paired(rng: np.random.Generator, dist: ShapleyKernel):
    """A kernel draw together with its complement."""
    s = sample_coalition(rng, dist)
    return s, ~s


# -- exact Shapley values -------------------------------------------------------


def _shapley_coefficients(n: int) -> np.ndarray:
    # weight of a coalition of size k that excludes the player, k = 0..n-1
    return np.array(
        [math.factorial(k) * math.factorial(n - 1 - k) / math.factorial(n) for k in range(n)]
    )


def shapley_from_table(table) -> np.ndarray:
    """Exact Shapley values from a value table indexed by packed coalition code.

    ``table`` may be ``(2**N,)`` or ``(2**N, K)``; the result has shape
    ``(N,)`` or ``(N, K)`` respectively.
    """
    table = np.asarray(table, dtype=np.float64)
    squeeze = table.ndim == 1
    if squeeze:
        table = table[:, None]
    n = int(round(math.log2(table.shape[0]))) if table.shape[0] > 1 else 0
    if n < 1 or table.shape[0] != 1 << n:
        raise DimensionError(f"table length {table.shape[0]} is not 2**N with N >= 1")
    _check_enumerable(n)
    codes = np.arange(1 << n, dtype=np.int64)
    sizes = np.bitwise_count(codes)
    coef = _shapley_coefficients(n)
    phi = np.empty((n, table.shape[1]))
    for i in range(n):
        without = codes[((codes >> i) & 1) == 0]
        gains = table[without | (1 << i)] - table[without]
        phi[i] = coef[sizes[without]] @ gains
    return phi[:, 0] if squeeze else phi


def exact_shapley(game: GameOracle, y: int = 0) -> np.ndarray:
    """Exact Shapley values of class ``y`` by enumerating every coalition."""
    _check_enumerable(game.n_players)
    if not 0 <= y < game.n_classes:
        raise DomainError(f"class {y} outside [0, {game.n_classes})")
    return shapley_from_table(game.value_table()[:, y])
