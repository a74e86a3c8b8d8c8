import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import border_flood_fill_holes, exact_mean_field, half_pixel_weights_1d
from pancut.errors import ShapeError
from pancut.mask_refine import (
    CrfConfig,
    bilinear_resize,
    crf_refine,
    fill_holes,
    masks_to_probs,
    resize_mask,
    resolve_overlaps,
    upsample_mask,
)
from pancut.panoptic_cut import ObjectMask

bool_grids = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12))


def test_ring_is_filled():
    m = np.ones((5, 5), dtype=bool)
    m[1:4, 1:4] = False
    assert fill_holes(m).all()


def test_border_background_untouched():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:3] = True
    assert np.array_equal(fill_holes(m), m)


def test_nested_rings():
    m = np.zeros((9, 9), dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    m[2, 2:7] = m[6, 2:7] = m[2:7, 2] = m[2:7, 6] = True
    assert fill_holes(m).all()
    assert np.array_equal(fill_holes(m), border_flood_fill_holes(m))


def test_diagonal_gap_is_not_a_leak():
    # background touching only diagonally stays a hole under 4-connectivity
    m = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
    assert fill_holes(m)[1, 1]


@settings(max_examples=300, deadline=None)
@given(bool_grids)
def test_fill_holes_properties(m):
    f = fill_holes(m)
    assert np.array_equal(f, border_flood_fill_holes(m))
    assert np.array_equal(fill_holes(f), f)
    assert not np.any(m & ~f)


def test_fill_holes_rejects_empty_grid():
    with pytest.raises(ValueError):
        fill_holes(np.zeros((0, 3), dtype=bool))


def test_upsample_single_patch():
    assert upsample_mask(np.array([[True]]), 8).all()
    assert upsample_mask(np.array([[True]]), 8).shape == (8, 8)


def test_upsample_two_patches_left_half():
    out = upsample_mask(np.array([[True, False]]), 8)
    assert out.shape == (8, 16)
    assert out[:, :8].all() and not out[:, 8:].any()


def test_exact_half_goes_to_background():
    # the middle output column samples the source at exactly 0.5
    assert half_pixel_weights_1d(2, 3)[1].tolist() == [0.5, 0.5]
    out = upsample_mask(np.array([[True, False]]), 1, 1, 3)
    assert out.tolist() == [[True, False, False]]


def test_upsample_identity_and_errors():
    m = np.random.default_rng(0).random((5, 7)) > 0.5
    assert np.array_equal(upsample_mask(m, 1), m)
    with pytest.raises(ShapeError):
        upsample_mask(m, 1, 4, 7)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_bilinear_matches_scalar_weights(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).normal(size=(h, w))
    ref = half_pixel_weights_1d(h, oh) @ x @ half_pixel_weights_1d(w, ow).T
    assert np.allclose(bilinear_resize(x, oh, ow), ref, atol=1e-12)
    assert np.allclose(bilinear_resize(np.stack([x, 2 * x], -1), oh, ow)[..., 1], 2 * ref, atol=1e-12)


def test_resize_mask_down():
    m = np.kron(np.eye(2, dtype=bool), np.ones((4, 4), dtype=bool))
    assert np.array_equal(resize_mask(m, 2, 2), np.eye(2, dtype=bool))


def _obj(i, order, pix):
    return ObjectMask(i, np.ones((1, 1), dtype=bool), order, np.asarray(pix, dtype=bool))


def test_resolve_overlaps():
    a = _obj(1, 1, [[1, 1, 0, 0]])
    b = _obj(2, 2, [[0, 0, 1, 1]])
    out = resolve_overlaps([a, b])
    assert [o.pixel_mask.tolist() for o in out] == [a.pixel_mask.tolist(), b.pixel_mask.tolist()]
    inner = _obj(2, 2, [[0, 1, 0, 0]])
    assert [o.id for o in resolve_overlaps([a, inner])] == [1]
    late = _obj(3, 3, [[0, 1, 1, 0]])
    out = resolve_overlaps([late, a])
    assert [o.id for o in out] == [3, 1]
    assert out[0].pixel_mask.tolist() == [[False, False, True, False]]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_resolve_overlaps_priority_oracle(k, seed):
    rng = np.random.default_rng(seed)
    orders = rng.permutation(k) + 1
    masks = [_obj(i + 1, int(orders[i]), rng.random((6, 6)) > 0.5) for i in range(k)]
    out = resolve_overlaps(masks)
    owner = np.zeros((6, 6), dtype=int)
    for m in sorted(masks, key=lambda m: -m.discovery_order):
        owner[m.pixel_mask] = m.id
    total = sum(o.pixel_mask.astype(int) for o in out) if out else np.zeros((6, 6), int)
    assert total.max() <= 1
    for o in out:
        assert np.array_equal(o.pixel_mask, owner == o.id)
    assert {o.id for o in out} == set(np.unique(owner)) - {0}


def test_masks_to_probs():
    p = masks_to_probs(np.array([[0, 1]]), 2)
    assert np.allclose(p[0, 0], [0.9, 0.1]) and np.allclose(p[0, 1], [0.1, 0.9])
    p = masks_to_probs(np.array([[2]]), 3, 0.2)
    assert np.allclose(p[0, 0], [0.1, 0.1, 0.8])


def test_crf_config_invariants():
    with pytest.raises(ValueError):
        CrfConfig(iterations=0)
    with pytest.raises(ValueError):
        CrfConfig(spatial_sigma=0)


def test_crf_crisp_fixed_point():
    img = np.full((12, 12, 3), 128, dtype=np.uint8)
    lab = np.zeros((12, 12), dtype=int)
    lab[:, 6:] = 1
    probs = masks_to_probs(lab, 2, 0.01)
    assert np.array_equal(crf_refine(probs, img), lab)


def test_crf_removes_salt_pixel():
    img = np.full((16, 16, 3), 90, dtype=np.uint8)
    probs = np.tile([0.6, 0.4], (16, 16, 1))
    probs[7, 9] = [0.4, 0.6]
    assert np.argmax(probs, -1)[7, 9] == 1
    out = crf_refine(probs, img)
    exact, _ = exact_mean_field(probs, img)
    assert not out.any() and not exact.any()


def test_crf_keeps_normalization_and_checks_shapes():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (10, 9, 3), dtype=np.uint8)
    probs = rng.dirichlet(np.ones(3), size=(10, 9))
    for it in (1, 3):
        _, q = crf_refine(probs, img, CrfConfig(iterations=it), return_probs=True)
        assert np.allclose(q.sum(-1), 1, atol=1e-6) and q.min() >= 0
    with pytest.raises(ShapeError):
        crf_refine(probs, img[:5])
    with pytest.raises(ValueError):
        crf_refine(probs * 2, img)


def test_crf_agrees_with_exact_mean_field():
    rng = np.random.default_rng(11)
    agree = []
    for _ in range(3):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        img[:, :8] = rng.integers(0, 256, 3)
        img[:, 8:] = rng.integers(0, 256, 3)
        img = np.clip(img + rng.normal(0, 8, img.shape), 0, 255).astype(np.uint8)
        lab = (rng.random((16, 16)) < 0.3).astype(int)
        lab[:, 8:] = 1 - lab[:, 8:]
        probs = masks_to_probs(lab, 2, 0.35)
        exact, _ = exact_mean_field(probs, img)
        agree.append((crf_refine(probs, img) == exact).mean())
    assert min(agree) >= 0.98
