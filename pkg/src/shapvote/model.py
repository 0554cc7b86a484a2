"""The self-explaining patch-voting network.

Each patch is embedded on its own, mixed once with the mean embedding of the
patches that are present, and mapped to one score per class. Class logits are
the column sums of that ``(N, K)`` score matrix, so the per-patch scores are
an additive decomposition of the prediction by construction.

Two ways of hiding patches are supported:

``removal``
    Hidden patches take no part in the computation: they are left out of the
    context mean and out of the final sum.
``zero_fill``
    Hidden patches have their pixels set to zero and are processed like any
    other patch; only the rows of the present patches are summed (a gather).
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .diffnet import (
    Parameter,
    glorot_uniform,
    linear_backward,
    linear_forward,
    masked_mean_rows,
    masked_mean_rows_backward,
    tanh_backward,
    tanh_forward,
)
from .exceptions import DimensionError, DomainError, FormatError, LengthError, UsageError
from .game import GameOracle, check_mask, enumerate_coalitions, shapley_from_table

MASKING_MODES = ("removal", "zero_fill")
CHECKPOINT_MAGIC = b"SXPNET1\n"


# -- patches ---------------------------------------------------------------------


@dataclass
class PatchGrid:
    """An image cut into ``P x P`` patches, listed in raster order."""

    patches: np.ndarray
    channels: int
    height: int
    width: int
    patch_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def decompose(image, patch_size: int) -> PatchGrid:
    """Split a ``C x H x W`` (or ``H x W``) image into flattened patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise DimensionError(f"expected a C x H x W image, got shape {image.shape}")
    c, h, w = image.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    hp, wp = h // p, w // p
    patches = (
        image.reshape(c, hp, p, wp, p).transpose(1, 3, 0, 2, 4).reshape(hp * wp, c * p * p)
    )
    return PatchGrid(patches.copy(), c, h, w, p)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`decompose`; always returns ``C x H x W``."""
    hp, wp = grid.grid_shape
    p, c = grid.patch_size, grid.channels
    return (
        grid.patches.reshape(hp, wp, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, grid.height, grid.width)
    )


def decompose_batch(images, patch_size: int) -> np.ndarray:
    """``(B, [C,] H, W)`` images to a ``(B, N, C*P*P)`` patch array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W) images, got shape {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise DimensionError(f"images {h}x{w} are not divisible into {p}x{p} patches")
    hp, wp = h // p, w // p
    return images.reshape(b, c, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, hp * wp, c * p * p)


def _patches_of(x) -> np.ndarray:
    if isinstance(x, PatchGrid):
        return x.patches
    return np.asarray(x, dtype=np.float64)


# -- network ---------------------------------------------------------------------


class PatchNet:
    """Parameters and forward/backward passes of the patch-voting network.

    Parameters
    ----------
    n_patches, in_features, embed_dim, n_classes, patch_size : int
        Network dimensions; ``in_features`` is ``C * P * P``.
    masking_mode : {"removal", "zero_fill"}
    mixing : bool
        With ``False`` the context-mixing layer is skipped and every patch
        score depends on that patch alone (an additive game).
    rng : numpy Generator used for initialisation.
    """

    def __init__(
        self,
        n_patches: int,
        in_features: int,
        embed_dim: int = 32,
        n_classes: int = 4,
        patch_size: int = 4,
        masking_mode: str = "removal",
        mixing: bool = True,
        rng: np.random.Generator | None = None,
    ):
        if masking_mode not in MASKING_MODES:
            raise DomainError(f"masking_mode must be one of {MASKING_MODES}, got {masking_mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_patches = n_patches
        self.in_features = in_features
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.patch_size = patch_size
        self.masking_mode = masking_mode
        self.mixing = mixing
        L = embed_dim
        self.embed_w = Parameter(glorot_uniform(rng, in_features, L), "embed_w")
        self.embed_b = Parameter(np.zeros((1, L)), "embed_b")
        if mixing:
            self.mix_w = Parameter(glorot_uniform(rng, 2 * L, L), "mix_w")
            self.mix_b = Parameter(np.zeros((1, L)), "mix_b")
        else:
            self.mix_w = Parameter(np.zeros((0, 0)), "mix_w")
            self.mix_b = Parameter(np.zeros((0, 0)), "mix_b")
        self.head_w = Parameter(glorot_uniform(rng, L, n_classes), "head_w")
        self.head_b = Parameter(np.zeros((1, n_classes)), "head_b")
        self._version = 0

    def parameters(self) -> list[Parameter]:
        """Parameters in checkpoint order."""
        params = [self.embed_w, self.embed_b]
        if self.mixing:
            params += [self.mix_w, self.mix_b]
        return params + [self.head_w, self.head_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def mark_updated(self) -> None:
        """Invalidate caches from earlier forward passes."""
        self._version += 1

    # -- batched core --

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.n_patches, self.in_features):
            raise DimensionError(
                f"expected (B, {self.n_patches}, {self.in_features}) patches, got {x.shape}"
            )

    def _forward(self, x, mask):
        # x: (B, N, D); mask: (B, N) bool, all true for the full branch
        keep = mask.astype(np.float64)
        if self.masking_mode == "zero_fill":
            x_in = x * keep[..., None]
            context_rows = np.ones_like(keep)
        else:
            x_in = x
            # rows of an empty coalition are never read; any positive weights do
            context_rows = np.where(keep.sum(axis=1, keepdims=True) > 0, keep, 1.0)
        emb = tanh_forward(linear_forward(x_in, self.embed_w, self.embed_b))
        cache = {"x": x_in, "emb": emb, "keep": keep, "ctx_rows": context_rows, "version": self._version}
        if self.mixing:
            ctx = masked_mean_rows(emb, context_rows)
            z = np.concatenate([emb, np.broadcast_to(ctx, emb.shape)], axis=-1)
            hidden = tanh_forward(linear_forward(z, self.mix_w, self.mix_b))
            cache.update(z=z, hidden=hidden)
        else:
            hidden = emb
        phi = linear_forward(hidden, self.head_w, self.head_b)
        cache["hidden"] = hidden
        return phi, cache

    def forward_full_batch(self, x):
        """``(B, N, D)`` patches to ``(phi (B, N, K), logits (B, K), cache)``."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        phi, cache = self._forward(x, np.ones(x.shape[:2], dtype=bool))
        return phi, phi.sum(axis=1), cache

    def forward_masked_batch(self, x, masks):
        """Coalition values for ``(B, N)`` masks.

        Returns ``(phi (B, N, K), values (B, K), cache)``; rows of ``phi`` at
        hidden positions are not part of the coalition and carry no meaning.
        Empty coalitions have value 0.
        """
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != x.shape[:2]:
            raise DimensionError(f"masks {masks.shape} do not match patches {x.shape[:2]}")
        phi, cache = self._forward(x, masks)
        values = (phi * cache["keep"][..., None]).sum(axis=1)
        return phi, values, cache

    def backward(self, cache, grad_phi) -> None:
        """Accumulate parameter gradients of a scalar with ``d/dphi = grad_phi``.

        Gradients of logits or coalition values enter through ``grad_phi``:
        they are row sums of ``phi`` (restricted to present rows for values).
        """
        if cache.get("version") != self._version:
            raise UsageError("forward cache predates a parameter update")
        grad_hidden = linear_backward(grad_phi, cache["hidden"], self.head_w, self.head_b)
        emb = cache["emb"]
        if self.mixing:
            L = self.embed_dim
            grad_pre = tanh_backward(grad_hidden, cache["hidden"])
            grad_z = linear_backward(grad_pre, cache["z"], self.mix_w, self.mix_b)
            grad_emb = grad_z[..., :L].copy()
            grad_ctx = grad_z[..., L:].sum(axis=-2, keepdims=True)
            grad_emb += masked_mean_rows_backward(grad_ctx, cache["ctx_rows"])
        else:
            grad_emb = grad_hidden
        grad_pre_emb = tanh_backward(grad_emb, emb)
        linear_backward(grad_pre_emb, cache["x"], self.embed_w, self.embed_b)

    # -- single-example views --

    def forward_full(self, grid):
        """Attribution matrix ``(N, K)``, logits ``(K,)`` and cache for one input."""
        phi, logits, cache = self.forward_full_batch(_patches_of(grid)[None])
        return phi[0], logits[0], cache

    def forward_masked(self, grid, mask):
        """Present-patch scores ``(M, K)``, coalition values ``(K,)`` and cache."""
        mask = check_mask(mask, self.n_patches)
        if not mask.any():
            return np.zeros((0, self.n_classes)), np.zeros(self.n_classes), None
        phi, values, cache = self.forward_masked_batch(_patches_of(grid)[None], mask[None])
        return phi[0][mask], values[0], cache

    def predict_logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.forward_full_batch(x)[1]

    def masked_values(self, patches, masks, chunk: int = 4096) -> np.ndarray:
        """Coalition values ``(M, K)`` of one input for many masks."""
        patches = _patches_of(patches)
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = np.empty((masks.shape[0], self.n_classes))
        for start in range(0, masks.shape[0], chunk):
            part = masks[start:start + chunk]
            x = np.broadcast_to(patches, (part.shape[0],) + patches.shape)
            out[start:start + chunk] = self.forward_masked_batch(x, part)[1]
        return out

    def as_game_oracle(self, grid) -> "PatchGame":
        return PatchGame(self, _patches_of(grid))

    def copy(self) -> "PatchNet":
        other = object.__new__(PatchNet)
        other.__dict__.update(self.__dict__)
        for p in self.parameters():
            clone = Parameter(p.value, p.name)
            setattr(other, p.name, clone)
        if not self.mixing:
            other.mix_w = Parameter(np.zeros((0, 0)), "mix_w")
            other.mix_b = Parameter(np.zeros((0, 0)), "mix_b")
        other._version = 0
        return other


class PatchGame(GameOracle):
    """The network's own prediction game on one input: ``v_y(s)``."""

    def __init__(self, net: PatchNet, patches: np.ndarray):
        self.net = net
        self.patches = patches
        self.n_players = net.n_patches
        self.n_classes = net.n_classes

    def values(self, masks):
        return self.net.masked_values(self.patches, masks)


def exact_patch_shapley(net: PatchNet, patches) -> np.ndarray:
    """Exact ``(N, K)`` Shapley values of the network's game on one input."""
    patches = _patches_of(patches)
    table = net.masked_values(patches, enumerate_coalitions(net.n_patches))
    return shapley_from_table(table)


# -- checkpoints -----------------------------------------------------------------

_MODE_CODES = {"removal": 0, "zero_fill": 1}


def checkpoint_bytes(net: PatchNet) -> bytes:
    """Serialise ``net``.

    Layout: magic ``SXPNET1\\n``; int32 LE ``N, L, K, P, mode``; six matrices
    (embed_w, embed_b, mix_w, mix_b, head_w, head_b) each as int32 rows, int32
    cols, then float64 LE row-major data; finally the CRC32 (uint32 LE) of
    everything after the magic. Without mixing the two mix matrices are 0x0.
    """
    buf = io.BytesIO()
    buf.write(struct.pack(
        "<5i", net.n_patches, net.embed_dim, net.n_classes, net.patch_size, _MODE_CODES[net.masking_mode]
    ))
    for p in (net.embed_w, net.embed_b, net.mix_w, net.mix_b, net.head_w, net.head_b):
        rows, cols = p.value.shape
        buf.write(struct.pack("<2i", rows, cols))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    payload = buf.getvalue()
    return CHECKPOINT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def checkpoint_from_bytes(blob: bytes) -> PatchNet:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not an SXPNET1 checkpoint (bad magic)")
    if len(blob) < len(CHECKPOINT_MAGIC) + 20 + 4:
        raise LengthError("checkpoint is truncated")
    payload, crc = blob[len(CHECKPOINT_MAGIC):-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint CRC mismatch")
    n, L, k, p, mode = struct.unpack_from("<5i", payload, 0)
    offset = 20
    mats = []
    for _ in range(6):
        if offset + 8 > len(payload):
            raise LengthError("checkpoint is truncated")
        rows, cols = struct.unpack_from("<2i", payload, offset)
        offset += 8
        size = rows * cols * 8
        if offset + size > len(payload):
            raise LengthError("checkpoint is truncated")
        mats.append(np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols))
        offset += size
    modes = {v: key for key, v in _MODE_CODES.items()}
    if mode not in modes:
        raise FormatError(f"unknown masking mode code {mode}")
    mixing = mats[2].size > 0
    net = PatchNet(n, mats[0].shape[0], L, k, p, modes[mode], mixing)
    for param, mat in zip((net.embed_w, net.embed_b, net.mix_w, net.mix_b, net.head_w, net.head_b), mats):
        if param.value.shape != mat.shape:
            raise FormatError(f"{param.name} has shape {mat.shape}, expected {param.value.shape}")
        param.value[...] = mat
    return net


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(net: PatchNet, path) -> None:
    atomic_write(path, checkpoint_bytes(net))


def load_checkpoint(path) -> PatchNet:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
