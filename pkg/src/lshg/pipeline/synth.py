"""Procedural stick figures with exactly known joints, for desk-scale runs."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .annotations import NUM_JOINTS, Annotation

# one distinct colour per joint so every joint is locally identifiable
JOINT_COLORS = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
], dtype=np.float64)

LIMBS = ((0, 1), (1, 2), (2, 6), (6, 3), (3, 4), (4, 5), (6, 7), (7, 8), (8, 9),
         (7, 12), (12, 11), (11, 10), (7, 13), (13, 14), (14, 15))


def _polar(length, angle_deg):
    t = np.deg2rad(angle_deg)
    return length * np.array([np.sin(t), np.cos(t)])  # angle 0 points down


def _skeleton(rng: np.random.Generator, height: float) -> np.ndarray:
    """Joint positions relative to the pelvis, MPII order, image axes."""
    h = height
    j = np.zeros((NUM_JOINTS, 2))
    lean = rng.uniform(-12, 12)
    j[6] = 0.0
    j[7] = _polar(0.30 * h, 180 + lean)
    j[8] = j[7] + _polar(0.07 * h, 180 + lean + rng.uniform(-10, 10))
    j[9] = j[8] + _polar(0.14 * h, 180 + lean + rng.uniform(-15, 15))
    j[2] = (-0.08 * h, 0.0)
    j[3] = (0.08 * h, 0.0)
    for hip, knee, ankle, sign in ((2, 1, 0, -1), (3, 4, 5, 1)):
        a = sign * rng.uniform(0, 30)
        j[knee] = j[hip] + _polar(0.23 * h, a)
        j[ankle] = j[knee] + _polar(0.23 * h, a + rng.uniform(-30, 30))
    torso_dir = (j[7] - j[6]) / np.linalg.norm(j[7] - j[6])
    across = np.array([-torso_dir[1], torso_dir[0]])
    for sho, elb, wri, sign in ((12, 11, 10, -1), (13, 14, 15, 1)):
        j[sho] = j[7] - 0.02 * h * torso_dir + sign * 0.11 * h * across
        a = sign * rng.uniform(10, 150)
        j[elb] = j[sho] + _polar(0.16 * h, a)
        j[wri] = j[elb] + _polar(0.15 * h, a + sign * rng.uniform(-20, 120))
    return j


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(50, 130, size=(size // 16 + 1, size // 16 + 1, 3))
    tex = np.kron(coarse, np.ones((16, 16, 1)))[:size, :size]
    return tex + rng.normal(0, 6, size=(size, size, 3))


def _draw_segment(img, yy, xx, a, b, radius, color):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0, 1)
    d2 = (xx - a[0] - t * ab[0]) ** 2 + (yy - a[1] - t * ab[1]) ** 2
    img[d2 <= radius * radius] = color


def render_figure(rng: np.random.Generator, size: int = 256) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (image HxWx3 uint8, joints (16, 2), head_box)."""
    height = rng.uniform(0.5, 0.7) * size
    rel = _skeleton(rng, height)
    t = np.deg2rad(rng.uniform(-15, 15))
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    rel = rel @ rot.T
    margin = 0.06 * size
    lo, hi = rel.min(axis=0), rel.max(axis=0)
    origin = np.array([rng.uniform(margin - lo[k], size - 1 - margin - hi[k]) for k in range(2)])
    joints = rel + origin

    img = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    limb_r = max(1.5, 0.012 * size)
    for a, b in LIMBS:
        shade = 0.5 * (JOINT_COLORS[a] + JOINT_COLORS[b]) * 0.6
        _draw_segment(img, yy, xx, joints[a], joints[b], limb_r, shade)
    for k in range(NUM_JOINTS):
        _draw_segment(img, yy, xx, joints[k], joints[k], 2.2 * limb_r, JOINT_COLORS[k])

    head_len = np.linalg.norm(joints[9] - joints[8])
    mid = 0.5 * (joints[8] + joints[9])
    head_box = np.array([mid[0] - 0.4 * head_len, mid[1] - 0.5 * head_len,
                         mid[0] + 0.4 * head_len, mid[1] + 0.5 * head_len])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), joints, head_box


def make_synthetic_dataset(n: int, seed: int, image_size: int = 256) -> List[Tuple[np.ndarray, Annotation]]:
    """``n`` rendered figures; figure ``i`` depends only on ``(seed, i)``.

    The annotation scale is chosen so the ``200 * scale`` crop holds the
    whole figure with a margin. ``image_ref`` is the file name ``synth``
    writes the image under.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([int(seed), i])
        image, joints, head_box = render_figure(rng, image_size)
        lo, hi = joints.min(axis=0), joints.max(axis=0)
        center = 0.5 * (lo + hi)
        scale = 1.25 * float(np.max(hi - lo)) / 200.0
        full = np.concatenate([joints, np.ones((NUM_JOINTS, 1))], axis=1)
        out.append((image, Annotation(f"synth_{i:05d}.png", center, scale, full, head_box)))
    return out
