"""Heatmap decoding, PCKh scoring and forward-pass benchmarking."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, ValidationError
from .hourglass import count_macs, count_parameters

log = logging.getLogger(__name__)

# MPII indices pooled per reported column; pelvis (6) and thorax (7) are not scored
GROUPS = {
    "Head": (8, 9),
    "Shoulder": (12, 13),
    "Elbow": (11, 14),
    "Wrist": (10, 15),
    "Hip": (2, 3),
    "Knee": (1, 4),
    "Ankle": (0, 5),
}
COLUMNS = tuple(GROUPS) + ("Mean",)
HEAD_SIZE_FACTOR = 0.6


def decode_heatmaps(heatmaps: np.ndarray, meta: np.ndarray, quarter_offset: bool = False, stride: int = 4):
    """Per-joint argmax (first maximum in row-major order) mapped to original pixels.

    ``meta`` is the 2x3 crop-to-original affine; heatmap cell (x, y) sits at
    crop pixel ``stride * (x, y)``. With ``quarter_offset`` the cell is moved
    0.25 towards the larger neighbour along each axis.

    Returns ``(coords (J, 2), confidence (J,))``.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    nj, h, w = hm.shape
    flat = hm.reshape(nj, -1)
    idx = flat.argmax(axis=1)
    conf = flat[np.arange(nj), idx]
    ys, xs = np.divmod(idx, w)
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    if quarter_offset:
        for j in range(nj):
            x, y = xs[j], ys[j]
            if 0 < x < w - 1:
                coords[j, 0] += 0.25 * np.sign(hm[j, y, x + 1] - hm[j, y, x - 1])
            if 0 < y < h - 1:
                coords[j, 1] += 0.25 * np.sign(hm[j, y + 1, x] - hm[j, y - 1, x])
    crop = coords * stride
    return crop @ meta[:, :2].T + meta[:, 2], conf


def head_size(head_box) -> float:
    x1, y1, x2, y2 = np.asarray(head_box, dtype=np.float64)
    return HEAD_SIZE_FACTOR * float(np.hypot(x2 - x1, y2 - y1))


@dataclass
class PckhReport:
    scores: Dict[str, float]
    counts: Dict[str, int]
    mean: float
    joint_weighted_mean: float
    skipped: int = 0
    skipped_reasons: List[str] = field(default_factory=list)

    def row(self) -> Dict[str, float]:
        out = {k: self.scores[k] for k in GROUPS}
        out["Mean"] = self.mean
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            w.writerow([f"{v:.2f}" for v in self.row().values()])
        return path

    def format(self) -> str:
        head = " ".join(f"{c:>8}" for c in COLUMNS)
        vals = " ".join(f"{v:8.2f}" for v in self.row().values())
        return (f"{head}\n{vals}\njoint-weighted mean {self.joint_weighted_mean:.2f}, "
                f"joints per group {self.counts}, skipped images {self.skipped}")


def pckh(predictions, annotations, threshold: float = 0.5) -> PckhReport:
    """PCKh@threshold over images; ``predictions`` is (N, 16, 2) in original pixels.

    A visible joint counts as correct iff its error is at most
    ``threshold * 0.6 * head_box diagonal``. Images with a zero or
    non-finite head size are skipped and counted. Groups with no visible
    joints score NaN and are left out of the mean.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if len(preds) != len(annotations):
        raise ValidationError(f"{len(preds)} predictions for {len(annotations)} annotations")
    hits = np.zeros(16, dtype=np.int64)
    seen = np.zeros(16, dtype=np.int64)
    skipped, reasons = 0, []
    for k, (pred, ann) in enumerate(zip(preds, annotations)):
        size = head_size(ann.head_box)
        if not (np.isfinite(size) and size > 0):
            skipped += 1
            reasons.append(f"image {k}: head size {size} is not positive")
            log.warning("pckh: skipping image %d (head size %s)", k, size)
            continue
        vis = ann.joints[:, 2] > 0
        err = np.linalg.norm(pred - ann.joints[:, :2], axis=1)
        hits += (vis & (err <= threshold * size)).astype(np.int64)
        seen += vis.astype(np.int64)
    scores, counts = {}, {}
    for name, idx in GROUPS.items():
        n = int(seen[list(idx)].sum())
        counts[name] = n
        scores[name] = 100.0 * hits[list(idx)].sum() / n if n else float("nan")
    valid = [v for v in scores.values() if not np.isnan(v)]
    mean = float(np.mean(valid)) if valid else float("nan")
    scored = [j for idx in GROUPS.values() for j in idx]
    total = seen[scored].sum()
    jw = 100.0 * hits[scored].sum() / total if total else float("nan")
    return PckhReport(scores, counts, mean, float(jw), skipped, reasons)


def predict(net, samples, batch_size: int = 6, quarter_offset: bool = False) -> np.ndarray:
    """Decoded final-stack joints for prepared samples, in original pixels."""
    net.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        heat = net.forward(np.stack([s.input for s in chunk]).astype(net.dtype), keep=False)[-1]
        stride = chunk[0].res // heat.shape[-1]
        for hm, s in zip(heat, chunk):
            out.append(decode_heatmaps(hm, s.meta, quarter_offset, stride)[0])
    return np.array(out)


def bench(net, input_res: Optional[int] = None, iterations: int = 10, warmup: int = 2, seed: int = 0) -> dict:
    """Batch-1 forward wall times on a fixed random input (eval mode)."""
    if iterations < 3:
        raise ValueError("iterations must be >= 3")
    res = input_res or net.config.input_res
    if res != net.config.input_res:
        raise ConfigError(f"network was built for {net.config.input_res}px input, not {res}px")
    x = np.random.default_rng(seed).random((1, 3, res, res)).astype(net.dtype)
    net.eval()
    for _ in range(warmup):
        net.forward(x, keep=False)
    times = []
    for _ in range(iterations):
        t = time.perf_counter()
        net.forward(x, keep=False)
        times.append(time.perf_counter() - t)
    arr = np.array(times)
    return {
        "median": float(np.median(arr)),
        "p10": float(np.percentile(arr, 10)),
        "p90": float(np.percentile(arr, 90)),
        "times": times,
        "macs": count_macs(net, res),
        "params": count_parameters(net),
    }
