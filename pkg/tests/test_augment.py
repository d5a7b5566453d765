import numpy as np
import pytest

from tsenet.augment import (
    AugmentedView,
    StrongParams,
    augment_strong,
    augment_weak,
    dihedral,
    source_coords,
)


def test_dihedral_group_is_closed_and_distinct():
    a = np.arange(16.0).reshape(4, 4)
    outs = {dihedral(a, k).tobytes() for k in range(8)}
    assert len(outs) == 8
    np.testing.assert_array_equal(dihedral(dihedral(a, 1), 3), a)


def test_weak_view_all_valid():
    img = np.random.default_rng(0).uniform(size=(3, 8, 8))
    v = augment_weak(img, np.random.default_rng(1), k=5)
    np.testing.assert_array_equal(v.image, dihedral(img, 5))
    assert v.valid.all() and v.params["dihedral"] == 5


def test_identity_strong_params_is_center_crop():
    size = 16
    img = np.random.default_rng(2).uniform(size=(3, size, size))
    h = np.arange(size * size, dtype=float).reshape(size, size)
    p = StrongParams(crop_y=4, crop_x=2)
    v = augment_strong(AugmentedView(img, heights=h), params=p)
    np.testing.assert_allclose(v.image, img[:, 4:12, 2:10], atol=1e-12)
    np.testing.assert_array_equal(v.heights, h[4:12, 2:10])
    assert v.valid.all()


def test_labels_follow_geometry_only():
    size = 16
    img = np.random.default_rng(3).uniform(size=(3, size, size))
    h = np.random.default_rng(4).uniform(0, 20, (size, size))
    probs = np.random.default_rng(5).uniform(size=(4, size, size))
    p = StrongParams(angle_deg=37.0, crop_y=3, crop_x=5, gamma=1.3, brightness=0.1, contrast=1.2, blur_sigma=1.0)
    v = augment_strong(AugmentedView(img, heights=h, probs=probs), params=p)
    # nearest-neighbour sampling: every label value comes from the source
    assert set(v.heights.ravel()) <= set(h.ravel())
    sy, sx = source_coords(size, p)
    iy = np.clip(np.rint(sy), 0, size - 1).astype(int)
    ix = np.clip(np.rint(sx), 0, size - 1).astype(int)
    np.testing.assert_array_equal(v.probs, probs[:, iy, ix])


def test_rotation_marks_outside_pixels_invalid():
    size = 16
    img = np.zeros((3, size, size))
    v = augment_strong(AugmentedView(img), params=StrongParams(angle_deg=45.0, crop_y=0, crop_x=0))
    assert v.valid[0, 0] == 0 and v.valid[-1, -1] == 1
    # prior invalid pixels stay invalid
    prior = np.ones((size, size))
    prior[:, :] = 0
    v2 = augment_strong(AugmentedView(img, valid=prior), params=StrongParams())
    assert not v2.valid.any()


def test_too_small_for_crop():
    with pytest.raises(ValueError, match="minimum"):
        augment_strong(AugmentedView(np.zeros((3, 8, 8))), params=StrongParams())
