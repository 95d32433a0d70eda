"""Person-centred cropping, augmentation and Gaussian heatmap targets.

Coordinates are pixel indices (x right, y down). ``Sample.meta`` is the 2x3
affine map from crop coordinates back to original-image pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import GeometryError
from .annotations import FLIP_PAIRS, Annotation, load_image

HEATMAP_STRIDE = 4


@dataclass
class Sample:
    input: np.ndarray            # (3, R, R) float32 in [0, 1]
    joints: np.ndarray           # (16, 2) crop coordinates
    visible: np.ndarray          # (16,) bool
    head_box: np.ndarray         # (4,) crop coordinates
    meta: np.ndarray             # (2, 3) crop -> original
    targets: Optional[np.ndarray] = None
    joint_weights: Optional[np.ndarray] = None

    @property
    def res(self) -> int:
        return self.input.shape[-1]

    def to_original(self, points: np.ndarray) -> np.ndarray:
        return apply_affine(self.meta, points)


def _h(m: np.ndarray) -> np.ndarray:
    return np.vstack([m, [0.0, 0.0, 1.0]])


def apply_affine(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m[:, :2].T + m[:, 2]


def _warp(image: np.ndarray, inverse: np.ndarray, res: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) float image; ``inverse`` maps output -> input pixels."""
    v, u = np.mgrid[0:res, 0:res].astype(np.float64)
    src_x = inverse[0, 0] * u + inverse[0, 1] * v + inverse[0, 2]
    src_y = inverse[1, 0] * u + inverse[1, 1] * v + inverse[1, 2]
    coords = np.stack([src_y, src_x])
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0)
                     for ch in image]).astype(np.float32)


def _inside(points: np.ndarray, res: int) -> np.ndarray:
    return (points[:, 0] >= 0) & (points[:, 0] <= res - 1) & (points[:, 1] >= 0) & (points[:, 1] <= res - 1)


def _box_through(m: np.ndarray, box: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = box
    corners = apply_affine(m, np.array([[x1, y1], [x2, y1], [x1, y2], [x2, y2]]))
    return np.concatenate([corners.min(axis=0), corners.max(axis=0)])


def crop_and_resize(image, ann: Annotation, res: int = 256) -> Sample:
    """Square crop of side ``200 * scale`` around the annotated centre, resized to res x res."""
    side = 200.0 * ann.scale
    if side < 2:
        raise GeometryError(f"crop side {side:.3f}px is degenerate")
    k = res / side
    cx, cy = ann.center
    forward = np.array([[k, 0.0, res / 2 - k * cx], [0.0, k, res / 2 - k * cy]])
    meta = np.linalg.inv(_h(forward))[:2]
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    planes = np.moveaxis(img, -1, 0)
    joints = apply_affine(forward, ann.joints[:, :2])
    visible = ann.visible & _inside(joints, res)
    return Sample(_warp(planes, meta, res), joints, visible, _box_through(forward, ann.head_box), meta)


def augmentation_matrix(res: int, rotation_deg: float, scale: float, flip: bool) -> np.ndarray:
    """3x3 map from crop coordinates to augmented crop coordinates."""
    c = res / 2
    t = np.deg2rad(rotation_deg)
    rot = scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    m = np.eye(3)
    m[:2, :2] = rot
    m[:2, 2] = c - rot @ np.array([c, c])
    if flip:
        m = np.array([[-1.0, 0.0, res - 1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    return m


def augment(sample: Sample, rng: np.random.Generator, rotation: Optional[float] = None,
            scale: Optional[float] = None, flip: Optional[bool] = None) -> Sample:
    """Random rotation in [-30, 30] deg, scale in [0.75, 1.25] and a p=0.5 horizontal flip.

    Explicit ``rotation``/``scale``/``flip`` override the random draws (the
    draws still happen, so the stream position does not depend on overrides).
    """
    if sample.targets is not None:
        raise ValueError("augment() must run before targets are generated")
    draw = (rng.uniform(-30.0, 30.0), rng.uniform(0.75, 1.25), bool(rng.random() < 0.5))
    rotation = draw[0] if rotation is None else rotation
    scale = draw[1] if scale is None else scale
    flip = draw[2] if flip is None else flip
    res = sample.res
    m = augmentation_matrix(res, rotation, scale, flip)
    if np.array_equal(m, np.eye(3)):
        return replace(sample, input=sample.input.copy(), joints=sample.joints.copy(),
                       visible=sample.visible.copy())
    inv = np.linalg.inv(m)
    joints = apply_affine(m[:2], sample.joints)
    visible = sample.visible.copy()
    if flip:
        for a, b in FLIP_PAIRS:
            joints[[a, b]] = joints[[b, a]]
            visible[[a, b]] = visible[[b, a]]
    visible &= _inside(joints, res)
    return Sample(
        input=_warp(sample.input, inv[:2], res),
        joints=joints,
        visible=visible,
        head_box=_box_through(m[:2], sample.head_box),
        meta=(_h(sample.meta) @ inv)[:2],
    )


def make_targets(joints_grid: np.ndarray, visible: np.ndarray, sigma: float = 1.0, size: int = 64):
    """Unnormalized Gaussians (peak 1.0 at the joint's nearest cell).

    Each visible joint gets ``exp(-d^2 / (2 sigma^2))`` within a window of
    radius ``floor(3 sigma)``. Joints off the grid or invisible get an
    all-zero channel and weight 0.

    Returns ``(targets (J, size, size), weights (J,))``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    joints_grid = np.asarray(joints_grid, dtype=np.float64)
    nj = len(joints_grid)
    targets = np.zeros((nj, size, size), dtype=np.float32)
    weights = np.zeros(nj, dtype=np.float32)
    r = int(np.floor(3 * sigma))
    for j in range(nj):
        if not visible[j]:
            continue
        cx, cy = (int(np.floor(v + 0.5)) for v in joints_grid[j])
        if not (0 <= cx < size and 0 <= cy < size):
            continue
        x0, x1 = max(cx - r, 0), min(cx + r, size - 1)
        y0, y1 = max(cy - r, 0), min(cy + r, size - 1)
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        targets[j, y0:y1 + 1, x0:x1 + 1] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
        weights[j] = 1.0
    return targets, weights


def with_targets(sample: Sample, sigma: float = 1.0) -> Sample:
    size = sample.res // HEATMAP_STRIDE
    targets, weights = make_targets(sample.joints / HEATMAP_STRIDE, sample.visible, sigma, size)
    return replace(sample, targets=targets, joint_weights=weights)


def prepare_sample(image, ann: Annotation, res: int = 256, sigma: float = 1.0,
                   rng: Optional[np.random.Generator] = None, base_dir=None) -> Sample:
    """crop -> (augment when ``rng`` is given) -> targets."""
    if image is None:
        image = load_image(ann.image_ref, base_dir)
    sample = crop_and_resize(image, ann, res)
    if rng is not None:
        sample = augment(sample, rng)
    return with_targets(sample, sigma)
