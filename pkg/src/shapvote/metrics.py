"""Faithfulness and localisation scores for per-patch saliency maps.

The perturbation unit is the patch, and removing a patch means hiding it with
the network's own masking mode. Probabilities are softmax probabilities of
the explained class; the empty coalition has value 0, hence probability 1/K.
Patches are ranked by saliency, highest first, ties going to the lower index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np
from sklearn.metrics import average_precision_score

from .diffnet import softmax
from .exceptions import CapacityError, DimensionError, DomainError
from .model import PatchNet, exact_patch_shapley

DEFAULT_LODDS_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5)
LODDS_FLOOR = 1e-12
MAX_FIDELITY_PATCHES = 12


def rank_patches(saliency) -> np.ndarray:
    """Patch indices by decreasing saliency; equal scores keep index order."""
    return np.argsort(-np.asarray(saliency, dtype=np.float64), kind="stable")


def _class_proba(net: PatchNet, patches, masks, y: int) -> np.ndarray:
    return softmax(net.masked_values(patches, masks))[:, y]


def _prefix_masks(order: np.ndarray, counts, present: bool) -> np.ndarray:
    """One mask per count: the first ``count`` ranked patches removed (or kept)."""
    n = len(order)
    masks = np.full((len(counts), n), present)
    for row, count in enumerate(counts):
        masks[row, order[:count]] = not present
    return masks


def aopc(net: PatchNet, patches, saliency, y: int, steps: int = 10) -> float:
    """Mean probability drop while removing the top ``ceil(kN/steps)`` patches, k = 0..steps."""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    n = net.n_patches
    counts = [-(-k * n // steps) for k in range(steps + 1)]
    probs = _class_proba(net, patches, _prefix_masks(rank_patches(saliency), counts, True), y)
    return float(np.mean(probs[0] - probs))


def log_odds(net: PatchNet, patches, saliency, y: int, ratios=DEFAULT_LODDS_RATIOS) -> float:
    """Mean ``log(p(top-r removed) / p(full))`` over removal ratios ``r``."""
    n = net.n_patches
    counts = []
    for r in ratios:
        if not 0 < r < 1:
            raise DomainError(f"ratios must lie in (0, 1), got {r}")
        counts.append(math.ceil(Fraction(r).limit_denominator(10**6) * n))
    masks = _prefix_masks(rank_patches(saliency), [0] + counts, True)
    probs = np.maximum(_class_proba(net, patches, masks, y), LODDS_FLOOR)
    return float(np.mean(np.log(probs[1:] / probs[0])))


def saco(net: PatchNet, patches, saliency, y: int, groups: int = 10) -> float:
    """Rank consistency between group saliency and the probability drop of each group.

    Patches sorted by saliency are split into ``groups`` contiguous groups
    (earlier groups take the remainder). For every pair ``i < j`` the
    saliency gap counts positively when group ``i`` also causes at least as
    large a drop as group ``j``, negatively otherwise; the total is
    normalised by the summed absolute gaps (0 when those are all zero).
    """
    n = net.n_patches
    if groups > n:
        raise DomainError(f"cannot form {groups} groups from {n} patches")
    saliency = np.asarray(saliency, dtype=np.float64)
    parts = np.array_split(rank_patches(saliency), groups)
    group_saliency = np.array([saliency[p].sum() for p in parts])
    masks = np.ones((groups + 1, n), dtype=bool)
    for g, part in enumerate(parts, start=1):
        masks[g, part] = False
    probs = _class_proba(net, patches, masks, y)
    impact = probs[0] - probs[1:]
    num = den = 0.0
    for i in range(groups):
        for j in range(i + 1, groups):
            gap = group_saliency[i] - group_saliency[j]
            num += gap if impact[i] >= impact[j] else -gap
            den += abs(gap)
    return num / den if den > 0 else 0.0


def deletion_curve(net: PatchNet, patches, saliency, y: int) -> np.ndarray:
    n = net.n_patches
    return _class_proba(net, patches, _prefix_masks(rank_patches(saliency), range(n + 1), True), y)


def insertion_curve(net: PatchNet, patches, saliency, y: int) -> np.ndarray:
    n = net.n_patches
    return _class_proba(net, patches, _prefix_masks(rank_patches(saliency), range(n + 1), False), y)


def _auc(curve: np.ndarray) -> float:
    return float(np.trapezoid(curve, dx=1.0 / (len(curve) - 1)))


def insertion_deletion(net: PatchNet, patches, saliency, y: int) -> tuple[float, float]:
    """Areas under the insertion and deletion curves, x-axis scaled to [0, 1]."""
    return (
        _auc(insertion_curve(net, patches, saliency, y)),
        _auc(deletion_curve(net, patches, saliency, y)),
    )


def binarize(saliency) -> np.ndarray:
    """Foreground = saliency strictly above the map's mean."""
    saliency = np.asarray(saliency, dtype=np.float64)
    return saliency > saliency.mean(axis=-1, keepdims=True)


def localization(saliencies, gt_masks) -> tuple[float, float, float]:
    """Pixel accuracy, mean average precision and mean IoU against ground truth.

    ``saliencies`` and ``gt_masks`` are ``(n, N)``. An example with empty
    prediction and empty ground truth has IoU 1; examples without any
    ground-truth patch are skipped for mAP.
    """
    sal = np.atleast_2d(np.asarray(saliencies, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_masks, dtype=bool))
    if sal.shape != gt.shape:
        raise DimensionError(f"saliency {sal.shape} and ground truth {gt.shape} differ")
    pred = binarize(sal)
    pix_acc = float(np.mean(pred == gt))
    inter = (pred & gt).sum(axis=1)
    union = (pred | gt).sum(axis=1)
    iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    aps = [
        average_precision_score(g, s) for s, g in zip(sal, gt) if g.any()
    ]
    m_ap = float(np.mean(aps)) if aps else float("nan")
    return pix_acc, m_ap, float(np.mean(iou))


def shap_fidelity(net: PatchNet, patches) -> float:
    """Mean absolute gap between the network's scores and its exact Shapley values."""
    if net.n_patches > MAX_FIDELITY_PATCHES:
        raise CapacityError(
            f"exact fidelity is limited to {MAX_FIDELITY_PATCHES} patches, got {net.n_patches}"
        )
    phi = net.forward_full(patches)[0]
    return float(np.mean(np.abs(phi - exact_patch_shapley(net, patches))))


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    aopc: float | None = None
    lodds: float | None = None
    saco: float | None = None
    insertion_auc: float | None = None
    deletion_auc: float | None = None
    pix_acc: float | None = None
    map: float | None = None
    miou: float | None = None
    shap_fidelity: float | None = None
    n_examples: int = 0
    per_example: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "per_example"]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


def evaluate(
    net: PatchNet,
    x: np.ndarray,
    saliencies: np.ndarray,
    classes: np.ndarray,
    gt_masks: np.ndarray | None = None,
    aopc_steps: int = 10,
    lodds_ratios=DEFAULT_LODDS_RATIOS,
    saco_groups: int = 10,
    fidelity: bool = False,
) -> MetricReport:
    """Score saliency maps ``(n, N)`` for patch inputs ``(n, N, D)``; means over examples."""
    n = len(x)
    per = {name: np.empty(n) for name in ("aopc", "lodds", "saco", "insertion_auc", "deletion_auc")}
    for i in range(n):
        y = int(classes[i])
        per["aopc"][i] = aopc(net, x[i], saliencies[i], y, aopc_steps)
        per["lodds"][i] = log_odds(net, x[i], saliencies[i], y, lodds_ratios)
        per["saco"][i] = saco(net, x[i], saliencies[i], y, saco_groups)
        per["insertion_auc"][i], per["deletion_auc"][i] = insertion_deletion(net, x[i], saliencies[i], y)
    report = MetricReport(n_examples=n, per_example=per)
    for name, values in per.items():
        setattr(report, name, float(np.mean(values)) if n else None)
    if gt_masks is not None and n:
        report.pix_acc, report.map, report.miou = localization(saliencies, gt_masks)
    if fidelity and n:
        per["shap_fidelity"] = np.array([shap_fidelity(net, p) for p in x])
        report.shap_fidelity = float(np.mean(per["shap_fidelity"]))
    return report


def intrinsic_saliency(net: PatchNet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The network's own explanation: the score column of its predicted class.

    Returns ``(saliency (n, N), predicted classes (n,))``.
    """
    phi, logits, _ = net.forward_full_batch(x)
    pred = np.argmax(logits, axis=1)
    return phi[np.arange(len(x)), :, pred], pred


def heatmap_pgm(saliency, grid_shape: tuple[int, int], scale: int = 1) -> bytes:
    """Binary 8-bit PGM of one map, min-max normalised; a flat map renders black."""
    sal = np.asarray(saliency, dtype=np.float64).reshape(grid_shape)
    lo, hi = sal.min(), sal.max()
    norm = (sal - lo) / (hi - lo) if hi > lo else np.zeros_like(sal)
    pixels = np.rint(norm * 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()
