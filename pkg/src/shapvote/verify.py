"""Self-checks run by ``shapvote verify``.

Each check returns a :class:`CheckResult`; the suite passes only if all do.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffnet import finite_difference_check
from .game import (
    FunctionGame,
    ShapleyKernel,
    TabularGame,
    exact_shapley,
    sample_coalitions,
)
from .model import PatchNet
from .trainer import TrainConfig, draw_step_randomness, loss_and_grad
from .wls import estimate_shapley_sampled, kernel_shap_exact


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def randomize(net: PatchNet, rng: np.random.Generator, scale: float = 1.0) -> PatchNet:
    for p in net.parameters():
        p.value[...] = rng.uniform(-scale, scale, p.value.shape)
    net.mark_updated()
    return net


def _glove(s):
    return float(s[2] and (s[0] or s[1]))


def check_axioms(n_games: int = 100, seed: int = 0) -> CheckResult:
    glove = exact_shapley(FunctionGame(_glove, 3))
    worst = float(np.max(np.abs(glove - [1 / 6, 1 / 6, 2 / 3])))
    ok = worst <= 1e-12
    rng = np.random.default_rng(seed)
    for _ in range(n_games):
        n = int(rng.integers(2, 11))
        table = rng.uniform(-1, 1, 1 << n)
        phi = exact_shapley(TabularGame(table))
        gap = abs(phi.sum() - (table[-1] - table[0]))
        ok &= gap <= 1e-9 * max(1.0, abs(table[-1] - table[0]))
        other = rng.uniform(-1, 1, 1 << n)
        a, b = rng.uniform(-2, 2, 2)
        lin = exact_shapley(TabularGame(a * table + b * other)) - (a * phi + b * exact_shapley(TabularGame(other)))
        ok &= np.max(np.abs(lin)) <= 1e-9
        # make player 0 a null player and players 1, 2 symmetric
        codes = np.arange(1 << n)
        nulled = table[codes & ~1]
        phi_null = exact_shapley(TabularGame(nulled))
        ok &= abs(phi_null[0]) <= 1e-10
        if n >= 3:
            swapped = codes ^ (((codes >> 1) ^ (codes >> 2)) & 1) * 0b110
            sym = 0.5 * (table + table[swapped])
            phi_sym = exact_shapley(TabularGame(sym))
            ok &= abs(phi_sym[1] - phi_sym[2]) <= 1e-10
    return CheckResult("shapley_axioms", bool(ok), worst, 1e-12, f"glove + {n_games} random games")


def check_wls_equivalence(n_games: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_games):
        n = int(rng.integers(3, 11))
        game = TabularGame(rng.uniform(-1, 1, 1 << n))
        worst = max(worst, float(np.max(np.abs(kernel_shap_exact(game) - exact_shapley(game)))))
    return CheckResult("wls_equivalence", worst <= 1e-8, worst, 1e-8, f"{n_games} games, N in 3..10")


def check_sampled_kernelshap(seed: int = 0) -> CheckResult:
    game = TabularGame(np.random.default_rng(seed + 1000).uniform(-1, 1, 1 << 8))
    est = estimate_shapley_sampled(game, 0, 10_000, np.random.default_rng(seed), paired=True)
    err = float(np.max(np.abs(est - exact_shapley(game))))
    return CheckResult("sampled_kernelshap", err <= 0.05, err, 0.05, "N=8, 10000 paired samples")


def check_kernel_sampler(draws: int = 100_000, seed: int = 0) -> CheckResult:
    worst = 0.0
    for n in (4, 8, 16):
        dist = ShapleyKernel(n)
        sizes = sample_coalitions(np.random.default_rng([seed, n]), dist, draws).sum(axis=1)
        hist = np.bincount(sizes, minlength=n)[1:n] / draws
        worst = max(worst, float(np.abs(hist - dist.size_marginals).sum()))
    return CheckResult("kernel_sampler", worst <= 0.01, worst, 0.01, f"L1, {draws} draws, N in 4,8,16")


def _total_loss_closure(net, x, labels, classes, masks, lam) -> Callable[[], float]:
    def closure():
        net.zero_grad()
        net.mark_updated()
        return loss_and_grad(net, x, labels, classes, masks, lam)[0]
    return closure


def gradient_error(seed: int, mutate: bool = False, n_coords: int = 200) -> float:
    """Finite-difference error of the total loss on a random small problem."""
    rng = np.random.default_rng([seed, 7])
    net = PatchNet(9, 16, 8, 4, 4, rng=rng)
    # initialised weights; biases moved off zero so their gradients are exercised
    for p in (net.embed_b, net.mix_b, net.head_b):
        p.value[...] = rng.uniform(-0.1, 0.1, p.value.shape)
    x = rng.uniform(-1, 1, (3, 9, 16))
    labels = rng.integers(4, size=3)
    classes, masks = draw_step_randomness(rng, 3, net, TrainConfig(masks_per_example=1))
    closure = _total_loss_closure(net, x, labels, classes, masks, lam=1.0)
    closure()
    grads = [p.grad.copy() for p in net.parameters()]
    if mutate:
        grads[0][0, 0] *= 1.1
        n_coords = sum(g.size for g in grads)
    return finite_difference_check(closure, net.parameters(), n_coords=n_coords, rng=rng, grads=grads)


def check_gradients(n_seeds: int = 20, inject_mutation: bool = False) -> CheckResult:
    worst = float(max(gradient_error(s, mutate=inject_mutation) for s in range(n_seeds)))
    caught = gradient_error(0, mutate=True)
    ok = worst <= 1e-4 and caught > 0.05
    return CheckResult(
        "gradient_check", bool(ok), worst, 1e-4,
        f"{n_seeds} seeds; mutated gradient error {caught:.3g}"
        + (" (mutation injected)" if inject_mutation else ""),
    )


def check_efficiency_identity(n_pairs: int = 1000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for i in range(n_pairs):
        mode = ("removal", "zero_fill")[i % 2]
        net = randomize(PatchNet(9, 16, 8, 4, 4, masking_mode=mode, rng=rng), rng)
        x = rng.uniform(-1, 1, (9, 16))
        phi, logits, _ = net.forward_full(x)
        ok &= bool(np.array_equal(logits, phi.sum(axis=0)))
        ok &= bool(np.all(net.masked_values(x, np.zeros((1, 9), bool)) == 0.0))
    return CheckResult("efficiency_identity", bool(ok), 0.0, 0.0, f"{n_pairs} random (params, input) pairs")


def check_additive_ablation(n_triples: int = 1000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    dist = ShapleyKernel(9)
    for _ in range(n_triples):
        net = randomize(PatchNet(9, 16, 8, 4, 4, mixing=False, rng=rng), rng)
        x = rng.uniform(-1, 1, (1, 9, 16))
        mask = sample_coalitions(rng, dist, 1)
        y = rng.integers(4, size=(1, 1))
        shap = loss_and_grad(net, x, np.zeros(1, int), y, mask[None], 1.0, 0.0, backward=False)[2]
        worst = max(worst, shap)
    return CheckResult("additive_ablation", worst <= 1e-12, worst, 1e-12, f"{n_triples} random triples")


def run_all(quick: bool = False, inject_mutation: bool = False) -> list[CheckResult]:
    scale = 10 if quick else 1
    return [
        check_axioms(100 // scale),
        check_wls_equivalence(100 // scale),
        check_sampled_kernelshap(),
        check_kernel_sampler(),
        check_gradients(20 // scale or 1, inject_mutation=inject_mutation),
        check_efficiency_identity(1000 // scale),
        check_additive_ablation(1000 // scale),
    ]
