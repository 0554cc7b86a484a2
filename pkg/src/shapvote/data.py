"""Synthetic patch-pattern classification data and its binary file format."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .exceptions import DomainError, FormatError, LengthError
from .model import atomic_write

DATA_MAGIC = b"SXPDATA1"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    grid_h: int = 4
    grid_w: int = 4
    patch_size: int = 4
    n_classes: int = 4
    signal_patches: int = 4
    signal_amplitude: float = 2.0
    noise_std: float = 0.5
    n_train: int = 2000
    n_val: int = 500
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if not 1 <= self.signal_patches <= self.n_patches:
            raise DomainError(f"signal_patches must lie in [1, {self.n_patches}]")
        if self.signal_amplitude <= 0 or self.noise_std < 0:
            raise DomainError("signal_amplitude must be > 0 and noise_std >= 0")
        if self.n_classes < 1 or self.n_classes >= self.patch_size ** 2:
            raise DomainError(
                f"need fewer than P*P = {self.patch_size ** 2} classes for orthogonal templates"
            )
        if self.n_train < 0 or self.n_val < 0:
            raise DomainError("dataset sizes must be non-negative")


@dataclass
class Dataset:
    """Single-channel images with labels in ``[0, K)`` and ground-truth patch masks."""

    images: np.ndarray  # (n, H, W) float64
    labels: np.ndarray  # (n,) int64
    gt_masks: np.ndarray  # (n, N) bool
    patch_size: int
    n_classes: int
    signal_patches: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_patches(self) -> int:
        h, w = self.images.shape[1:]
        return (h // self.patch_size) * (w // self.patch_size)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.images[idx], self.labels[idx], self.gt_masks[idx],
            self.patch_size, self.n_classes, self.signal_patches,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.gt_masks, other.gt_masks)
            and (self.patch_size, self.n_classes, self.signal_patches)
            == (other.patch_size, other.n_classes, other.signal_patches)
        )


def class_templates(n_classes: int, patch_size: int, amplitude: float) -> np.ndarray:
    """Mutually orthogonal ``P x P`` sign patterns, one per class.

    Rows 1..K of a Sylvester Hadamard matrix (row 0, the constant pattern, is
    skipped), scaled by ``amplitude``. ``P * P`` must be a power of two.
    """
    h = hadamard(patch_size * patch_size).astype(np.float64)
    return amplitude * h[1:n_classes + 1].reshape(n_classes, patch_size, patch_size)


def _generate_split(spec: SyntheticTaskSpec, n: int, templates, rng) -> Dataset:
    p, hp, wp = spec.patch_size, spec.grid_h, spec.grid_w
    n_patches = hp * wp
    images = np.zeros((n, hp * p, wp * p))
    labels = np.arange(n, dtype=np.int64) % spec.n_classes
    labels = labels[rng.permutation(n)]
    gt = np.zeros((n, n_patches), dtype=bool)
    for i in range(n):
        where = rng.choice(n_patches, size=spec.signal_patches, replace=False)
        gt[i, where] = True
        for cell in where:
            r, c = divmod(int(cell), wp)
            images[i, r * p:(r + 1) * p, c * p:(c + 1) * p] = templates[labels[i]]
    images += spec.noise_std * rng.standard_normal(images.shape)
    return Dataset(images, labels, gt, p, spec.n_classes, spec.signal_patches)


def generate(spec: SyntheticTaskSpec = SyntheticTaskSpec()) -> tuple[Dataset, Dataset]:
    """Build seeded, class-balanced train and validation splits."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec.n_classes, spec.patch_size, spec.signal_amplitude)
    train = _generate_split(spec, spec.n_train, templates, rng)
    val = _generate_split(spec, spec.n_val, templates, rng)
    return train, val


# -- file format -----------------------------------------------------------------


def dataset_bytes(data: Dataset) -> bytes:
    """Serialise to the SXPDATA1 layout.

    Magic ``SXPDATA1``; int32 LE ``count, H, W, P, K, q``; per example the
    float64 LE image (row-major), a uint16 LE label and the ground-truth mask
    packed into ``ceil(N/8)`` bytes (bit ``i % 8`` of byte ``i // 8`` is patch
    ``i``); then the CRC32 (uint32 LE) of everything after the magic.
    """
    n = len(data)
    h, w = data.images.shape[1:] if data.images.ndim == 3 else (0, 0)
    buf = io.BytesIO()
    buf.write(struct.pack("<6i", n, h, w, data.patch_size, data.n_classes, data.signal_patches))
    for i in range(n):
        buf.write(np.ascontiguousarray(data.images[i], dtype="<f8").tobytes())
        buf.write(struct.pack("<H", int(data.labels[i])))
        buf.write(np.packbits(data.gt_masks[i], bitorder="little").tobytes())
    payload = buf.getvalue()
    return DATA_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def dataset_from_bytes(blob: bytes) -> Dataset:
    head = len(DATA_MAGIC)
    if blob[:head] != DATA_MAGIC:
        raise FormatError("not an SXPDATA1 file (bad magic)")
    if len(blob) < head + 24 + 4:
        raise LengthError("dataset file is truncated")
    n, h, w, p, k, q = struct.unpack_from("<6i", blob, head)
    if p < 1 or h % p or w % p or min(n, h, w) < 0:
        raise FormatError(f"inconsistent header: count={n} H={h} W={w} P={p}")
    n_patches = (h // p) * (w // p)
    mask_bytes = -(-n_patches // 8)
    record = h * w * 8 + 2 + mask_bytes
    expected = head + 24 + n * record + 4
    if len(blob) < expected:
        raise LengthError(f"dataset file holds {len(blob)} bytes, header implies {expected}")
    if len(blob) > expected:
        raise FormatError("trailing bytes after dataset payload")
    payload = blob[head:-4]
    if zlib.crc32(payload) != struct.unpack("<I", blob[-4:])[0]:
        raise FormatError("dataset CRC mismatch")
    rec = np.frombuffer(payload, dtype=np.uint8, offset=24).reshape(n, record)
    images = rec[:, :h * w * 8].copy().view("<f8").reshape(n, h, w).astype(np.float64)
    labels = rec[:, h * w * 8:h * w * 8 + 2].copy().view("<u2").reshape(n).astype(np.int64)
    masks = np.unpackbits(rec[:, h * w * 8 + 2:], axis=1, bitorder="little")[:, :n_patches].astype(bool)
    return Dataset(images, labels, masks, p, k, q)


def write_dataset(data: Dataset, path) -> None:
    atomic_write(path, dataset_bytes(data))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
