"""scikit-learn style wrapper around the patch-voting network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .diffnet import softmax
from .exceptions import DimensionError
from .model import decompose_batch, exact_patch_shapley
from .trainer import TrainConfig, train_patches


def _check_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim not in (3, 4):
        raise DimensionError(f"expected images shaped (n, H, W) or (n, C, H, W), got {X.shape}")
    return X if X.ndim == 4 else X[:, None]


class ShapleyVotingClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier whose per-patch class scores are trained to be Shapley values.

    ``fit`` takes images shaped ``(n, H, W)`` or ``(n, C, H, W)``. After
    fitting, ``explain`` returns the ``(n, N, K)`` per-patch scores whose column
    sums are the logits, and ``transform`` returns the ``(n, N)`` scores of the
    predicted class (the model's own saliency map).

    Parameters mirror :class:`shapvote.trainer.TrainConfig`; ``lam`` weights
    the Shapley loss and ``random_state`` seeds initialisation, shuffling and
    coalition sampling.
    """

    def __init__(
        self,
        patch_size=4,
        embed_dim=32,
        lam=1.0,
        masks_per_example=1,
        paired_sampling=True,
        all_classes=False,
        epochs=30,
        batch_size=32,
        learning_rate=1e-3,
        adam_beta1=0.9,
        adam_beta2=0.999,
        adam_eps=1e-8,
        masking_mode="removal",
        mixing=True,
        random_state=0,
    ):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.lam = lam
        self.masks_per_example = masks_per_example
        self.paired_sampling = paired_sampling
        self.all_classes = all_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.masking_mode = masking_mode
        self.mixing = mixing
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lam=float(self.lam),
            masks_per_example=self.masks_per_example,
            paired_sampling=self.paired_sampling,
            all_classes=self.all_classes,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=0 if self.random_state is None else int(self.random_state),
            masking_mode=self.masking_mode,
            mixing=self.mixing,
            embed_dim=self.embed_dim,
            fidelity_examples=0,
        )

    def _patches(self, X) -> np.ndarray:
        return decompose_batch(_check_images(X), self.patch_size)

    def fit(self, X, y):
        x = self._patches(X)
        self._label_encoder = LabelEncoder().fit(y)
        self.classes_ = self._label_encoder.classes_
        codes = self._label_encoder.transform(y)
        if len(codes) != len(x):
            raise DimensionError(f"{len(x)} images but {len(codes)} labels")
        result = train_patches(x, codes, len(self.classes_), self.patch_size, self._config())
        self.net_ = result.net
        self.training_log_ = result.log
        self.n_patches_ = x.shape[1]
        return self

    def _checked_patches(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        x = self._patches(X)
        if x.shape[1:] != (self.net_.n_patches, self.net_.in_features):
            raise DimensionError(
                f"images give {x.shape[1:]} patches, model expects "
                f"{(self.net_.n_patches, self.net_.in_features)}"
            )
        return x

    def decision_function(self, X) -> np.ndarray:
        x = self._checked_patches(X)
        return self.net_.predict_logits(x)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def explain(self, X) -> np.ndarray:
        """Per-patch class scores ``(n, N, K)``."""
        x = self._checked_patches(X)
        return self.net_.forward_full_batch(x)[0]

    def transform(self, X) -> np.ndarray:
        x = self._checked_patches(X)
        phi, logits, _ = self.net_.forward_full_batch(x)
        return phi[np.arange(len(phi)), :, np.argmax(logits, axis=1)]

    def exact_shapley_values(self, X) -> np.ndarray:
        """Brute-force ``(n, N, K)`` Shapley values of the model's own masked game."""
        x = self._checked_patches(X)
        return np.stack([exact_patch_shapley(self.net_, p) for p in x])
