import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_net
from shapvote.diffnet import finite_difference_check
from shapvote.exceptions import DimensionError, DomainError, FormatError, LengthError, UsageError
from shapvote.game import enumerate_coalitions
from shapvote.model import (
    CHECKPOINT_MAGIC,
    PatchNet,
    checkpoint_bytes,
    checkpoint_from_bytes,
    decompose,
    decompose_batch,
    exact_patch_shapley,
    load_checkpoint,
    reassemble,
    save_checkpoint,
)


def reference_value(net, x, mask):
    """Coalition value computed the slow way, one layer at a time."""
    def emb(rows):
        return np.tanh(rows @ net.embed_w.value + net.embed_b.value)

    def head(e, ctx_source):
        if net.mixing:
            ctx = ctx_source.mean(axis=0, keepdims=True).repeat(len(e), axis=0)
            e = np.tanh(np.hstack([e, ctx]) @ net.mix_w.value + net.mix_b.value)
        return e @ net.head_w.value + net.head_b.value

    if not mask.any():
        return np.zeros(net.n_classes)
    if net.masking_mode == "removal":
        kept = emb(x[mask])
        return head(kept, kept).sum(axis=0)
    full = emb(x * mask[:, None])
    return head(full, full)[mask].sum(axis=0)


# -- patch grids --


def test_decompose_layout():
    image = np.arange(16, dtype=float).reshape(4, 4)
    grid = decompose(image, 2)
    assert grid.grid_shape == (2, 2) and grid.n_patches == 4
    assert grid.patches[0].tolist() == [0, 1, 4, 5]
    assert grid.patches[1].tolist() == [2, 3, 6, 7]
    assert grid.patches[2].tolist() == [8, 9, 12, 13]


def test_decompose_multichannel_batch():
    images = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    x = decompose_batch(images, 2)
    assert x.shape == (2, 4, 12)
    np.testing.assert_array_equal(x[1, 3].reshape(3, 2, 2), images[1, :, 2:, 2:])


def test_decompose_rejects_ragged():
    with pytest.raises(DimensionError):
        decompose(np.zeros((5, 4)), 2)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
    st.integers(0, 2**32 - 1),
)
def test_reassemble_round_trip(hp, wp, p, c, seed):
    shape = (c, hp * p, wp * p) if c > 1 else (hp * p, wp * p)
    image = np.random.default_rng(seed).normal(size=shape)
    np.testing.assert_array_equal(reassemble(decompose(image, p)), image.reshape(c, hp * p, wp * p))


# -- forward passes --


def test_hand_worked_scores():
    net = PatchNet(2, 2, embed_dim=2, n_classes=2, patch_size=1, mixing=False)
    net.embed_w.value[...] = np.eye(2)
    net.head_w.value[...] = np.eye(2)
    x = np.arctanh(np.array([[0.0, 0.1], [0.0, 0.3]]))
    phi, logits, _ = net.forward_full(x)
    np.testing.assert_allclose(phi, [[0.0, 0.1], [0.0, 0.3]], atol=1e-15)
    np.testing.assert_allclose(logits, [0.0, 0.4], atol=1e-15)


@pytest.mark.parametrize("mode", ["removal", "zero_fill"])
def test_logits_are_score_sums_bit_exact(rng, mode):
    net = small_net(rng, n_patches=6, masking_mode=mode)
    x = rng.normal(size=(5, 6, 4))
    phi, logits, _ = net.forward_full_batch(x)
    assert np.array_equal(logits, phi.sum(axis=1))


def test_permuting_patches_permutes_scores(rng):
    net = small_net(rng, n_patches=5)
    x = rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    phi = net.forward_full(x)[0]
    np.testing.assert_allclose(net.forward_full(x[perm])[0], phi[perm], atol=1e-13)


@pytest.mark.parametrize("mode", ["removal", "zero_fill"])
def test_full_mask_equals_full_forward(rng, mode):
    net = small_net(rng, n_patches=5, masking_mode=mode)
    x = rng.normal(size=(5, 4))
    _, values, _ = net.forward_masked(x, np.ones(5, bool))
    np.testing.assert_allclose(values, net.forward_full(x)[1], atol=1e-13)


def test_empty_mask_is_zero(rng):
    net = small_net(rng)
    scores, values, cache = net.forward_masked(rng.normal(size=(4, 4)), np.zeros(4, bool))
    assert scores.shape == (0, 3) and cache is None
    assert np.all(values == 0.0)
    assert np.all(net.masked_values(rng.normal(size=(4, 4)), np.zeros((2, 4), bool)) == 0.0)


@pytest.mark.parametrize("mode", ["removal", "zero_fill"])
@pytest.mark.parametrize("mixing", [True, False])
def test_masked_values_match_reference(rng, mode, mixing):
    net = small_net(rng, n_patches=5, masking_mode=mode, mixing=mixing)
    x = rng.normal(size=(5, 4))
    masks = enumerate_coalitions(5)
    got = net.masked_values(x, masks, chunk=7)
    want = np.array([reference_value(net, x, m) for m in masks])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_additive_ablation_partial_sums(rng):
    net = small_net(rng, n_patches=6, mixing=False)
    x = rng.normal(size=(6, 4))
    phi = net.forward_full(x)[0]
    masks = enumerate_coalitions(6)
    np.testing.assert_allclose(net.masked_values(x, masks), masks @ phi, atol=1e-12)
    np.testing.assert_allclose(exact_patch_shapley(net, x), phi, atol=1e-12)


def test_mixing_makes_game_non_additive(rng):
    net = small_net(rng, n_patches=5)
    x = rng.normal(size=(5, 4))
    masks = enumerate_coalitions(5)
    phi = net.forward_full(x)[0]
    assert np.max(np.abs(net.masked_values(x, masks) - masks @ phi)) > 1e-3


def test_shapley_of_own_game_is_efficient(rng):
    net = small_net(rng, n_patches=9)
    x = rng.normal(size=(9, 4))
    shap = exact_patch_shapley(net, x)
    np.testing.assert_allclose(shap.sum(axis=0), net.forward_full(x)[1], atol=1e-10)


def test_input_shape_checked(rng):
    net = small_net(rng)
    with pytest.raises(DimensionError):
        net.forward_full_batch(np.zeros((1, 5, 4)))
    with pytest.raises(DimensionError):
        net.forward_masked_batch(np.zeros((1, 4, 4)), np.ones((2, 4), bool))


def test_unknown_masking_mode():
    with pytest.raises(DomainError):
        PatchNet(4, 4, masking_mode="blur")


# -- backward --


@pytest.mark.parametrize("mode", ["removal", "zero_fill"])
@pytest.mark.parametrize("mixing", [True, False])
def test_backward_matches_finite_differences(mode, mixing):
    rng = np.random.default_rng(5)
    net = PatchNet(5, 4, 6, 3, 2, masking_mode=mode, mixing=mixing, rng=rng)
    for p in net.parameters():
        p.value[...] += rng.uniform(-0.1, 0.1, p.value.shape)
    x = rng.normal(size=(2, 5, 4))
    masks = rng.random((2, 5)) < 0.5
    masks[:, 0] = True
    coef = rng.normal(size=(2, 3))

    def func():
        net.zero_grad()
        net.mark_updated()
        phi, values, cache = net.forward_masked_batch(x, masks)
        keep = masks[..., None].astype(float)
        net.backward(cache, keep * coef[:, None, :])
        return float((values * coef).sum())

    assert finite_difference_check(func, net.parameters(), n_coords=500, rng=rng) <= 1e-6


def test_head_bias_gradient_of_logit_is_patch_count(rng):
    net = small_net(rng, n_patches=7)
    phi, _, cache = net.forward_full_batch(rng.normal(size=(1, 7, 4)))
    grad = np.zeros_like(phi)
    grad[..., 1] = 1.0  # d logit_1 / d phi[:, 1]
    net.zero_grad()
    net.backward(cache, grad)
    assert net.head_b.grad.tolist() == [[0.0, 7.0, 0.0]]


def test_stale_cache_rejected(rng):
    net = small_net(rng)
    phi, _, cache = net.forward_full_batch(rng.normal(size=(1, 4, 4)))
    net.mark_updated()
    with pytest.raises(UsageError):
        net.backward(cache, np.ones_like(phi))


def test_copy_is_independent(rng):
    net = small_net(rng)
    other = net.copy()
    other.head_w.value += 1.0
    assert not np.array_equal(net.head_w.value, other.head_w.value)


# -- checkpoints --


@pytest.mark.parametrize("mode", ["removal", "zero_fill"])
@pytest.mark.parametrize("mixing", [True, False])
def test_checkpoint_round_trip(rng, tmp_path, mode, mixing):
    net = small_net(rng, masking_mode=mode, mixing=mixing)
    path = tmp_path / "m.sxpnet"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert (back.masking_mode, back.mixing, back.patch_size) == (mode, mixing, 2)
    assert checkpoint_bytes(back) == path.read_bytes()
    x = rng.normal(size=(3, 4, 4))
    assert np.array_equal(back.predict_logits(x), net.predict_logits(x))


def test_checkpoint_layout_header(rng):
    blob = checkpoint_bytes(small_net(rng))
    assert blob.startswith(CHECKPOINT_MAGIC)
    assert np.frombuffer(blob[8:28], "<i4").tolist() == [4, 6, 3, 2, 0]


def test_checkpoint_corruption_detected(rng):
    blob = bytearray(checkpoint_bytes(small_net(rng)))
    blob[40] ^= 1
    with pytest.raises(FormatError, match="CRC"):
        checkpoint_from_bytes(bytes(blob))


def test_checkpoint_bad_magic_and_truncation(rng):
    blob = checkpoint_bytes(small_net(rng))
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"X" + blob[1:])
    with pytest.raises(LengthError):
        checkpoint_from_bytes(blob[:20])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob[:-10])
