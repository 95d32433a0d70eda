"""Line-delimited JSON person annotations and image loading."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from ..errors import ParseError, ValidationError

log = logging.getLogger(__name__)

NUM_JOINTS = 16
# MPII joint order
JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
    "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)
FLIP_PAIRS = ((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13))
REQUIRED = ("image", "center", "scale", "joints", "head_box")


@dataclass
class Annotation:
    """One person. ``joints`` is (16, 3): x, y, visible flag in image pixels."""

    image_ref: Union[str, np.ndarray]
    center: np.ndarray
    scale: float
    joints: np.ndarray
    head_box: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(NUM_JOINTS, 3)
        self.head_box = np.asarray(self.head_box, dtype=np.float64).reshape(4)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        x1, y1, x2, y2 = self.head_box
        if not (x2 > x1 and y2 > y1):
            raise ValidationError(f"head_box must have positive width and height, got {self.head_box.tolist()}")

    @property
    def visible(self) -> np.ndarray:
        return self.joints[:, 2] > 0

    def to_record(self) -> dict:
        if not isinstance(self.image_ref, str):
            raise ValidationError("only annotations with a path image_ref can be serialized")
        return {
            "image": self.image_ref,
            "center": [float(v) for v in self.center],
            "scale": self.scale,
            "joints": [[float(x), float(y), int(v > 0)] for x, y, v in self.joints],
            "head_box": [float(v) for v in self.head_box],
        }


def _from_record(rec, lineno: int) -> Annotation:
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    for key in REQUIRED:
        if key not in rec:
            raise ParseError(f"missing required field {key!r}", lineno, key)
    joints = rec["joints"]
    if len(joints) != NUM_JOINTS or any(len(j) != 3 for j in joints):
        raise ParseError(f"'joints' must be {NUM_JOINTS} x [x, y, v]", lineno, "joints")
    if any(j[2] not in (0, 1) for j in joints):
        raise ParseError("joint visibility must be 0 or 1", lineno, "joints")
    if len(rec["center"]) != 2:
        raise ParseError("'center' must be [x, y]", lineno, "center")
    if len(rec["head_box"]) != 4:
        raise ParseError("'head_box' must be [x1, y1, x2, y2]", lineno, "head_box")
    try:
        return Annotation(rec["image"], rec["center"], rec["scale"], joints, rec["head_box"])
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def parse_annotations(path, lenient: bool = False, errors: Optional[list] = None) -> List[Annotation]:
    """Reads one JSON record per line.

    Strict mode raises on the first bad line. In lenient mode bad lines are
    logged, appended to ``errors`` when given, and skipped.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
                out.append(_from_record(rec, lineno))
            except (ParseError, ValidationError) as exc:
                if not lenient:
                    raise
                log.warning("skipping annotation: %s", exc)
                if errors is not None:
                    errors.append(exc)
    return out


def write_annotations(path, annotations) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_record()) + "\n")
    return path


def load_image(ref, base_dir=None) -> np.ndarray:
    """HxWx3 uint8 array for an embedded raster or a PNG path."""
    if isinstance(ref, np.ndarray):
        return ref
    from PIL import Image

    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, image: np.ndarray):
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")
