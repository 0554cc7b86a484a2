"""Joint training of classification and Shapley-consistency objectives.

Every step evaluates the network twice with the same parameters: on the full
input (per-patch scores and logits) and on kernel-sampled coalitions (the
value of the coalition). The Shapley loss is the squared gap between a
coalition's value and the sum of the full-input scores of its members.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .diffnet import softmax_cross_entropy
from .exceptions import DivergenceError, DomainError
from .game import ShapleyKernel, sample_coalitions
from .metrics import shap_fidelity
from .model import PatchNet, decompose_batch, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss_total", "loss_cls", "loss_shap", "val_acc", "val_shap_fidelity")


@dataclass
class TrainConfig:
    lam: float = 1.0
    masks_per_example: int = 1
    paired_sampling: bool = True
    all_classes: bool = False
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    masking_mode: str = "removal"
    mixing: bool = True
    embed_dim: int = 32
    eval_every: int = 0
    fidelity_examples: int = 32

    def validate(self) -> None:
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise DomainError(f"lam must be finite and >= 0, got {self.lam}")
        for name in ("masks_per_example", "epochs", "batch_size", "embed_dim"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise DomainError("learning_rate and adam_eps must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1)")
        if self.eval_every < 0 or self.fidelity_examples < 0:
            raise DomainError("eval_every and fidelity_examples must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values (config file / CLI); unknown keys raise ``KeyError``."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise KeyError(key)
            kwargs[key] = coerce_value(raw, type(getattr(cls(), key)))
        return cls(**kwargs)


def coerce_value(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


# -- optimiser -------------------------------------------------------------------


@dataclass
class AdamState:
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_net(cls, net: PatchNet) -> "AdamState":
        params = net.parameters()
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adam_update(net: PatchNet, state: AdamState, config: TrainConfig) -> None:
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(net.parameters(), state.first, state.second):
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    net.mark_updated()


# -- losses ----------------------------------------------------------------------


def classification_loss(net: PatchNet, x, labels, backward: bool = True) -> float:
    """Cross-entropy of the summed patch scores; accumulates gradients if asked."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    phi, logits, cache = net.forward_full_batch(x)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    if backward:
        net.backward(cache, np.broadcast_to(grad_logits[:, None, :], phi.shape).copy())
    return loss


def shapley_loss(net: PatchNet, patches, mask, y: int, backward: bool = True) -> float:
    """``(v_y(s) - s . phi(x)[:, y])**2`` for one input and coalition."""
    mask = np.asarray(mask, dtype=bool)
    n = net.n_patches
    if mask.shape != (n,) or not 0 < mask.sum() < n:
        raise DomainError("Shapley-loss coalitions must have size in [1, N-1]")
    if not 0 <= y < net.n_classes:
        raise DomainError(f"class {y} outside [0, {net.n_classes})")
    x = np.asarray(patches, dtype=np.float64)[None]
    _, _, shap = loss_and_grad(
        net, x, np.zeros(1, dtype=np.int64), np.array([[y]]), mask[None, None], lam=1.0,
        cls_weight=0.0, backward=backward,
    )
    return shap


def loss_and_grad(
    net: PatchNet,
    x: np.ndarray,
    labels: np.ndarray,
    classes: np.ndarray,
    masks: np.ndarray,
    lam: float,
    cls_weight: float = 1.0,
    backward: bool = True,
    detach_masked: bool = False,
) -> tuple[float, float, float]:
    """Evaluate ``cls_weight * l_cls + lam * l_shap`` and accumulate its gradient.

    ``x`` is ``(B, N, D)``, ``classes`` ``(B, C)`` class indices per example,
    ``masks`` ``(B, R, N)`` coalitions per example. The Shapley term averages
    over examples and coalitions and sums over the ``C`` classes. Gradients
    are added to ``param.grad`` (callers zero them). ``detach_masked`` drops
    the coalition branch from the gradient; it exists for testing.

    Returns ``(total, l_cls, l_shap)``.
    """
    b, r, n = masks.shape
    phi, logits, cache_full = net.forward_full_batch(x)
    loss_cls, grad_logits = softmax_cross_entropy(logits, labels)
    grad_full = np.broadcast_to((cls_weight * grad_logits)[:, None, :], phi.shape).copy()

    flat_masks = masks.reshape(b * r, n)
    xm = np.repeat(x, r, axis=0)
    phi_m, values, cache_m = net.forward_masked_batch(xm, flat_masks)
    keep = flat_masks.astype(np.float64)
    rows = np.arange(b * r)
    phi_rep = np.repeat(phi, r, axis=0)
    loss_shap = 0.0
    grad_m = np.zeros_like(phi_m)
    for c in range(classes.shape[1]):
        y = np.repeat(classes[:, c], r)
        target = (keep * phi_rep[rows, :, y]).sum(axis=1)
        gap = values[rows, y] - target
        loss_shap += float(np.mean(gap * gap))
        coef = lam * 2.0 * gap / (b * r)
        grad_m[rows, :, y] += coef[:, None] * keep
        np.add.at(grad_full, (np.repeat(np.arange(b), r), slice(None), y), -coef[:, None] * keep)

    total = cls_weight * loss_cls + lam * loss_shap
    if backward:
        if lam != 0.0 and not detach_masked:
            net.backward(cache_m, grad_m)
        net.backward(cache_full, grad_full)
    return total, loss_cls, loss_shap


# -- training loop -----------------------------------------------------------------


def draw_step_randomness(rng: np.random.Generator, batch_size: int, net: PatchNet, config: TrainConfig):
    """Classes ``(B, C)`` and coalitions ``(B, R, N)`` for one step."""
    k, n = net.n_classes, net.n_patches
    if config.all_classes:
        classes = np.tile(np.arange(k), (batch_size, 1))
    else:
        classes = rng.integers(k, size=(batch_size, 1))
    dist = ShapleyKernel(n)
    draws = sample_coalitions(rng, dist, batch_size * config.masks_per_example)
    draws = draws.reshape(batch_size, config.masks_per_example, n)
    if config.paired_sampling:
        masks = np.empty((batch_size, 2 * config.masks_per_example, n), dtype=bool)
        masks[:, 0::2] = draws
        masks[:, 1::2] = ~draws
    else:
        masks = draws
    return classes, masks


def train_step(net: PatchNet, opt: AdamState, x, labels, config: TrainConfig, rng: np.random.Generator) -> dict:
    """One Adam step on a batch; returns the loss components."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise DomainError("empty batch")
    classes, masks = draw_step_randomness(rng, len(x), net, config)
    net.zero_grad()
    total, loss_cls, loss_shap = loss_and_grad(net, x, labels, classes, masks, config.lam)
    if not (math.isfinite(total) and math.isfinite(loss_cls) and math.isfinite(loss_shap)):
        raise DivergenceError(
            f"non-finite loss at step {opt.step + 1}: total={total} cls={loss_cls} shap={loss_shap}"
        )
    adam_update(net, opt, config)
    return {"loss_total": total, "loss_cls": loss_cls, "loss_shap": loss_shap}


def build_net(n_patches: int, in_features: int, n_classes: int, patch_size: int, config: TrainConfig) -> PatchNet:
    return PatchNet(
        n_patches, in_features, config.embed_dim, n_classes, patch_size,
        config.masking_mode, config.mixing, rng=np.random.default_rng([config.seed, 0]),
    )


def accuracy(net: PatchNet, x, labels) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(net.predict_logits(x), axis=1) == labels))


def mean_fidelity_error(net: PatchNet, x) -> float:
    """Mean |phi - exact Shapley| over examples, patches and classes."""
    errors = [shap_fidelity(net, patches) for patches in x]
    return float(np.mean(errors)) if errors else float("nan")


def validation_shapley_loss(net: PatchNet, x, labels, config: TrainConfig, seed: int = 0) -> float:
    """Mean Shapley loss on a fixed, seed-determined set of classes and coalitions."""
    if len(x) == 0:
        return float("nan")
    rng = np.random.default_rng([seed, 3])
    classes, masks = draw_step_randomness(rng, len(x), net, config)
    return loss_and_grad(net, x, labels, classes, masks, 1.0, cls_weight=0.0, backward=False)[2]


@dataclass
class TrainResult:
    net: PatchNet
    log: list[dict]
    optimizer: AdamState


def train_patches(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    patch_size: int,
    config: TrainConfig,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> TrainResult:
    """Train on ``(n, N, D)`` patch arrays with integer labels in ``[0, n_classes)``."""
    config.validate()
    n_examples, n_patches, in_features = x.shape
    if n_examples == 0:
        raise DomainError("cannot train on an empty dataset")
    net = build_net(n_patches, in_features, n_classes, patch_size, config)
    opt = AdamState.for_net(net)
    has_val = x_val is not None and len(x_val) > 0
    steps_per_epoch = -(-n_examples // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(n_examples)
        for start in range(0, n_examples, config.batch_size):
            idx = order[start:start + config.batch_size]
            step += 1
            rng = np.random.default_rng([config.seed, 1, step])
            metrics = train_step(net, opt, x[idx], y[idx], config, rng)
            row = {"step": step, "epoch": epoch + 1, **metrics, "val_acc": None, "val_shap_fidelity": None}
            if config.eval_every:
                due = step % config.eval_every == 0
            else:
                due = start + config.batch_size >= n_examples
            if has_val and (due or step == total_steps):
                row["val_acc"] = accuracy(net, x_val, y_val)
                if n_patches <= 12 and config.fidelity_examples:
                    row["val_shap_fidelity"] = mean_fidelity_error(net, x_val[:config.fidelity_examples])
                logger.info("step %d epoch %d: %s", step, epoch + 1, row)
            log.append(row)
    return TrainResult(net, log, opt)


def train(
    train_data: Dataset,
    config: TrainConfig,
    val_data: Dataset | None = None,
    out_dir=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of seeded mini-batch training.

    Writes ``model.sxpnet`` and ``train_log.csv`` into ``out_dir`` when given.
    """
    x = decompose_batch(train_data.images, train_data.patch_size)
    if val_data is not None and len(val_data):
        xv, yv = decompose_batch(val_data.images, val_data.patch_size), val_data.labels
    else:
        xv = yv = None
    result = train_patches(x, train_data.labels, train_data.n_classes, train_data.patch_size, config, xv, yv)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(result.net, os.path.join(out_dir, "model.sxpnet"))
        write_log(result.log, os.path.join(out_dir, "train_log.csv"))
    return result


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_log(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow([format_value(row[c]) for c in LOG_COLUMNS])
