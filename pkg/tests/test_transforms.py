import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshg.errors import GeometryError
from lshg.pipeline.annotations import FLIP_PAIRS, Annotation
from lshg.pipeline.synth import JOINT_COLORS, make_synthetic_dataset
from lshg.pipeline.transforms import augment, crop_and_resize, make_targets, prepare_sample, with_targets


def ann_with(joints_xy, center=(128, 128), scale=1.28, vis=None):
    joints_xy = np.asarray(joints_xy, dtype=np.float64)
    vis = np.ones(16) if vis is None else vis
    return Annotation("x.png", center, scale, np.column_stack([joints_xy, vis]), [100, 20, 140, 60])


def test_identity_crop(rng):
    img = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    joints = rng.uniform(0, 255, (16, 2))
    s = crop_and_resize(img, ann_with(joints))
    np.testing.assert_allclose(s.input, np.moveaxis(img, -1, 0) / 255.0, atol=1e-6)
    np.testing.assert_allclose(s.joints, joints, atol=1e-12)
    np.testing.assert_allclose(s.head_box, [100, 20, 140, 60], atol=1e-12)


def test_joint_at_center_maps_to_crop_center():
    img = np.zeros((400, 300, 3), np.uint8)
    joints = np.full((16, 2), 10.0)
    joints[3] = (150, 220)
    s = crop_and_resize(img, ann_with(joints, center=(150, 220), scale=0.7))
    np.testing.assert_allclose(s.joints[3], (128, 128))


@settings(max_examples=30, deadline=None)
@given(cx=st.floats(0, 500), cy=st.floats(0, 500), scale=st.floats(0.05, 5),
       seed=st.integers(0, 2 ** 16), res=st.sampled_from([64, 128, 256]))
def test_meta_inverts_crop(cx, cy, scale, seed, res):
    r = np.random.default_rng(seed)
    joints = r.uniform(0, 500, (16, 2))
    s = crop_and_resize(np.zeros((8, 8, 3), np.uint8), ann_with(joints, (cx, cy), scale), res)
    assert np.abs(s.to_original(s.joints) - joints).max() < 0.5


def test_degenerate_crop():
    with pytest.raises(GeometryError):
        crop_and_resize(np.zeros((8, 8, 3), np.uint8), ann_with(np.zeros((16, 2)), scale=0.005))


def test_crop_zero_pads_outside(rng):
    img = np.full((50, 50, 3), 255, np.uint8)
    s = crop_and_resize(img, ann_with(np.full((16, 2), 25.0), center=(25, 25), scale=1.0), 64)
    assert s.input[:, 0, 0].max() == 0 and s.input[:, 32, 32].min() == 1.0


def _sample(rng, res=256):
    joints = rng.uniform(60, 196, (16, 2))
    img = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    return crop_and_resize(img, ann_with(joints), res)


def test_identity_augmentation(rng):
    s = _sample(rng)
    a = augment(s, rng, rotation=0.0, scale=1.0, flip=False)
    np.testing.assert_array_equal(a.input, s.input)
    np.testing.assert_array_equal(a.joints, s.joints)
    np.testing.assert_array_equal(a.meta, s.meta)


def test_flip_swaps_sides_and_mirrors(rng):
    s = _sample(rng)
    a = augment(s, rng, rotation=0.0, scale=1.0, flip=True)
    assert a.joints[0, 0] == pytest.approx(255 - s.joints[5, 0])
    assert a.joints[5, 0] == pytest.approx(255 - s.joints[0, 0])
    assert a.joints[6, 0] == pytest.approx(255 - s.joints[6, 0])
    np.testing.assert_allclose(a.input[:, :, ::-1], s.input, atol=1e-6)
    # the joint still maps to the same original location once its label is swapped back
    np.testing.assert_allclose(a.to_original(a.joints[[5]]), s.to_original(s.joints[[0]]), atol=1e-9)


def test_rotation_90_about_center(rng):
    s = _sample(rng)
    s.joints[0] = (192, 128)
    a = augment(s, rng, rotation=90.0, scale=1.0, flip=False)
    np.testing.assert_allclose(a.joints[0], (128, 192), atol=1e-9)


def test_random_ranges_and_meta_consistency(rng):
    s = _sample(rng)
    for _ in range(10):
        a = augment(s, rng)
        np.testing.assert_allclose(a.to_original(a.joints[a.visible & s.visible]),
                                   s.to_original(_unswap(a, s)[a.visible & s.visible]), atol=1e-6)


def _unswap(a, s):
    # a flip relabels joints; recover the source joint for each augmented slot
    flipped = np.linalg.det(a.meta[:, :2]) * np.linalg.det(s.meta[:, :2]) < 0
    out = s.joints.copy()
    if flipped:
        for i, j in FLIP_PAIRS:
            out[[i, j]] = out[[j, i]]
    return out


def test_joints_leaving_crop_become_invisible(rng):
    s = _sample(rng)
    s.joints[2] = (250, 128)
    a = augment(s, rng, rotation=0.0, scale=1.25, flip=False)
    assert not a.visible[2]


def test_augment_refuses_samples_with_targets(rng):
    with pytest.raises(ValueError):
        augment(with_targets(_sample(rng)), rng)


def test_augmented_image_follows_joints():
    image, ann = make_synthetic_dataset(1, 3)[0]
    s = crop_and_resize(image, ann, 256)
    a = augment(s, np.random.default_rng(0), rotation=25.0, scale=1.1, flip=True)
    swap = {p: q for p, q in FLIP_PAIRS} | {q: p for p, q in FLIP_PAIRS}
    for j in np.flatnonzero(a.visible):
        x, y = np.rint(a.joints[j]).astype(int)
        src = swap.get(j, j)
        np.testing.assert_allclose(a.input[:, y, x] * 255, JOINT_COLORS[src], atol=40)


def test_gaussian_values():
    joints = np.zeros((16, 2))
    joints[0] = (20, 10)
    vis = np.zeros(16, bool)
    vis[0] = True
    t, w = make_targets(joints, vis, sigma=1.0, size=64)
    assert t[0, 10, 20] == 1.0
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        assert t[0, 10 + dy, 20 + dx] == pytest.approx(np.exp(-0.5))
    assert t[0, 10, 24] == 0.0 and t[0, 10, 23] > 0
    assert not t[1].any() and w[1] == 0 and w[0] == 1


def test_same_location_identical_channels():
    joints = np.full((16, 2), 31.3)
    t, _ = make_targets(joints, np.ones(16, bool), sigma=2.0)
    assert all(np.array_equal(t[0], t[j]) for j in range(16))


def test_off_grid_joint_gets_zero_weight():
    joints = np.full((16, 2), 10.0)
    joints[4] = (70, 10)
    t, w = make_targets(joints, np.ones(16, bool))
    assert w[4] == 0 and not t[4].any()


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        make_targets(np.zeros((16, 2)), np.ones(16, bool), sigma=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 16), sigma=st.sampled_from([0.5, 1.0, 2.0]))
def test_argmax_recovers_grid_cell(seed, sigma):
    r = np.random.default_rng(seed)
    joints = r.uniform(0, 63.49, (16, 2))
    vis = r.random(16) < 0.8
    t, w = make_targets(joints, vis, sigma=sigma)
    cells = np.floor(joints + 0.5).astype(int)
    for j in range(16):
        if vis[j]:
            y, x = np.unravel_index(t[j].argmax(), t[j].shape)
            assert (x, y) == tuple(cells[j]) and t[j, y, x] == 1.0
        else:
            assert not t[j].any()


def test_targets_generated_after_augmentation():
    image, ann = make_synthetic_dataset(1, 5)[0]
    s = prepare_sample(image, ann, res=128, rng=np.random.default_rng(2))
    cells = np.floor(s.joints / 4 + 0.5).astype(int)
    for j in np.flatnonzero(s.joint_weights):
        y, x = np.unravel_index(s.targets[j].argmax(), s.targets[j].shape)
        assert (x, y) == tuple(cells[j])
    assert s.targets.shape == (16, 32, 32) and s.input.shape == (3, 128, 128)
