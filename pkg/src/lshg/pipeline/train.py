"""Heatmap loss, RMSProp and the training loop."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..checkpoint import save_checkpoint
from ..errors import ConfigError, NumericError, ShapeError
from .transforms import Sample, prepare_sample

log = logging.getLogger(__name__)


def heatmap_loss(predictions: Sequence[np.ndarray], targets: np.ndarray, joint_weights: np.ndarray):
    """Masked MSE per stack, summed over stacks.

    Per stack: ``sum(w * (p - t)^2) / (sum(w) * H * W)`` with ``w`` the
    per-(sample, joint) visibility weight. Returns ``(loss, grads)`` where
    ``grads[i]`` has the shape and dtype of ``predictions[i]``.
    """
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(joint_weights, dtype=np.float64)
    if w.shape != t.shape[:2]:
        raise ShapeError(f"joint_weights shape {w.shape} does not match targets {t.shape}")
    denom = w.sum() * t.shape[2] * t.shape[3]
    wb = w[:, :, None, None]
    total, grads = 0.0, []
    for i, p in enumerate(predictions):
        if p.shape != t.shape:
            raise ShapeError(f"stack {i} prediction shape {p.shape} != target shape {t.shape}")
        if denom == 0:
            grads.append(np.zeros_like(p))
            continue
        r = p.astype(np.float64) - t
        total += float((wb * r * r).sum() / denom)
        grads.append((2.0 * wb * r / denom).astype(p.dtype))
    return total, grads


@dataclass
class OptimizerState:
    lr: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-8
    step: int = 0
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState):
    """In-place RMSProp update; refuses the whole step if any gradient is non-finite."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"gradient {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}; step refused")
    for name, g in grads.items():
        p = params[name]
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        v *= state.alpha
        v += (1 - state.alpha) * g * g
        p -= (state.lr * g / (np.sqrt(v) + state.eps)).astype(p.dtype)
    state.step += 1
    return params, state


def _net_step(net, state: OptimizerState, inputs, targets, weights) -> float:
    net.train()
    net.zero_grad()
    outs = net.forward(inputs)
    loss, grads = heatmap_loss(outs, targets, weights)
    net.backward(grads)
    params, gr = {}, {}
    for name, p, g in net.named_grads():
        params[name], gr[name] = p, g
    rmsprop_step(params, gr, state)
    return loss


@dataclass
class TrainConfig:
    epochs: int = 220
    batch_size: int = 6
    lr: float = 5e-4
    seed: int = 0
    sigma: float = 1.0
    augment: bool = True
    pad_last_batch: bool = False
    out_dir: Optional[str] = None
    threads: Optional[int] = None


@dataclass
class TrainResult:
    history: List[float]
    step_losses: List[float]
    best_checkpoint: Optional[Path]
    final_checkpoint: Optional[Path]
    optimizer: OptimizerState


def worker_count(requested: Optional[int] = None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("LSHG_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1, epoch, index])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 0, epoch]).permutation(n)


def batches(order: np.ndarray, batch_size: int, pad_last_batch: bool) -> List[np.ndarray]:
    n = len(order)
    if n < batch_size and not pad_last_batch:
        raise ConfigError(f"dataset has {n} samples, fewer than one batch of {batch_size}; "
                          "set pad_last_batch to repeat samples")
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if pad_last_batch and len(out[-1]) < batch_size:
        short = batch_size - len(out[-1])
        out[-1] = np.concatenate([out[-1], np.resize(order, short)])
    return out


def collate(samples: Iterable[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    samples = list(samples)
    return (np.stack([s.input for s in samples]),
            np.stack([s.targets for s in samples]),
            np.stack([s.joint_weights for s in samples]))


def write_loss_csv(path, rows: Sequence[Tuple[int, float, float]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wall_seconds"])
        for epoch, loss, secs in rows:
            w.writerow([epoch, repr(float(loss)), f"{secs:.3f}"])
    return path


def train(net, dataset: Sequence, config: TrainConfig = TrainConfig(), base_dir=None) -> TrainResult:
    """Trains ``net`` in place on ``dataset``, a sequence of ``(image, Annotation)``.

    Every random choice derives from ``config.seed``: the per-epoch shuffle
    and one stream per (epoch, sample index) for augmentation, so results do
    not depend on the worker count. Without augmentation samples are
    prepared once and reused.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if config.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    res = net.config.input_res
    n = len(dataset)
    batches(np.arange(n), config.batch_size, config.pad_last_batch)  # validate early
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = OptimizerState(lr=config.lr)

    def prep(epoch: int, idx: int) -> Sample:
        image, ann = dataset[idx]
        rng = sample_rng(config.seed, epoch, idx) if config.augment else None
        return prepare_sample(image, ann, res=res, sigma=config.sigma, rng=rng, base_dir=base_dir)

    history, step_losses, rows = [], [], []
    best, best_path = np.inf, None
    cache: Dict[int, Sample] = {}
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=worker_count(config.threads)) as pool:
        for epoch in range(config.epochs):
            order = epoch_order(config.seed, epoch, n)
            losses = []
            for batch in batches(order, config.batch_size, config.pad_last_batch):
                if config.augment:
                    samples = list(pool.map(lambda i: prep(epoch, int(i)), batch))
                else:
                    missing = sorted({int(i) for i in batch} - set(cache))
                    cache.update(zip(missing, pool.map(lambda i: prep(0, i), missing)))
                    samples = [cache[int(i)] for i in batch]
                loss = _net_step(net, state, *collate(samples))
                losses.append(loss)
                step_losses.append(loss)
            mean = float(np.mean(losses))
            history.append(mean)
            rows.append((epoch, mean, time.perf_counter() - t0))
            log.info("epoch %d loss %.6g", epoch, mean)
            if out_dir and mean < best:
                best = mean
                best_path = save_checkpoint(net, out_dir / "best.lshg")
    final_path = None
    if out_dir:
        write_loss_csv(out_dir / "loss.csv", rows)
        final_path = save_checkpoint(net, out_dir / "final.lshg")
    return TrainResult(history, step_losses, best_path, final_path, state)
