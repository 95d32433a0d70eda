"""Central-difference gradient checks for layers, blocks and a tiny network.

Everything runs in float64. Each check projects the layer output onto a
fixed random tensor ``R`` (loss = sum(out * R)), compares the analytic
gradient against ``(f(x + h) - f(x - h)) / 2h`` at sampled entries of the
input and of every parameter, and reports the worst relative error
``|a - n| / max(|a|, |n|, 1e-6)``.

A probe whose +h and -h evaluations cross a ReLU kink or flip a max-pool
winner measures a non-smooth point; it is discarded and another entry is
drawn in its place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import graph as g
from . import tensor_core as tc
from .blocks import VARIANTS, BlockSpec, build_block
from .errors import ConfigError
from .hourglass import NetworkConfig, build_network
from .pipeline.train import heatmap_loss

H = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


@dataclass
class CheckResult:
    component: str
    worst: float
    where: str
    checked: int

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def _pattern(layer: g.Layer) -> bytes:
    """ReLU sign masks and max-pool argmax indices from the last forward pass."""
    parts = []
    for _, node in layer.named_layers():
        if isinstance(node, g.ReLU):
            parts.append(np.packbits(node._x > 0).tobytes())
        elif isinstance(node, g.MaxPool2x2):
            parts.append(node._cache[0].tobytes())
    return b"".join(parts)


def check_layer(name: str, layer: g.Layer, input_shape, rng: np.random.Generator, samples: int = 6,
                loss: Optional[Callable] = None, max_rejects: int = 200) -> CheckResult:
    """Gradient check of ``layer`` (already initialized) on a random input of ``input_shape``."""
    layer.astype(np.float64).train()
    x = rng.normal(size=input_shape)
    out = layer.forward(x)

    if loss is None:
        outs = out if isinstance(out, list) else [out]
        proj = [rng.normal(size=o.shape) for o in outs]

        def value(o):
            o = o if isinstance(o, list) else [o]
            return sum(float((a * p).sum()) for a, p in zip(o, proj))

        def grad_of(o):
            return proj if isinstance(o, list) else proj[0]
    else:
        value, grad_of = loss(out, rng)

    def f() -> Tuple[float, bytes]:
        v = value(layer.forward(x))
        return v, _pattern(layer)

    layer.zero_grad()
    out = layer.forward(x)
    gx = layer.backward(grad_of(out))
    analytic = {n: gr.copy() for n, _, gr in layer.named_grads()}

    worst, where, checked, rejected = 0.0, "", 0, 0

    def probe(arr, idx, a, label) -> bool:
        nonlocal worst, where, checked
        old = arr[idx]
        arr[idx] = old + H
        fp, pp = f()
        arr[idx] = old - H
        fm, pm = f()
        arr[idx] = old
        if pp != pm:
            return False
        e = rel_error(float(a), (fp - fm) / (2 * H))
        checked += 1
        if e > worst:
            worst, where = e, label
        return True

    def probe_tensor(arr, grad, label):
        nonlocal rejected
        wanted = min(samples, arr.size)
        order = rng.permutation(arr.size)
        done = 0
        for flat in order:
            if done == wanted or rejected > max_rejects:
                break
            idx = np.unravel_index(int(flat), arr.shape)
            if probe(arr, idx, grad[idx], label):
                done += 1
            else:
                rejected += 1

    probe_tensor(x, gx, "input")
    for pname, p, _ in layer.named_grads():
        probe_tensor(p, analytic[pname], pname)
    if rejected > max_rejects:
        raise RuntimeError(f"{name}: too many probes straddled non-smooth points")
    return CheckResult(name, worst, where, checked)


def _init(layer: g.Layer, rng) -> g.Layer:
    g.init_parameters(layer, int(rng.integers(2 ** 31)), np.float64)
    # non-trivial affine so gamma/beta gradients are exercised
    for _, node in layer.named_layers():
        if isinstance(node, g.BatchNorm2d):
            node.params["gamma"] = rng.uniform(0.5, 1.5, node.channels)
            node.params["beta"] = rng.uniform(-0.2, 0.2, node.channels)
    layer.zero_grad()
    return layer


def primitive_cases() -> List[Tuple[str, Callable[[], g.Layer], Tuple[int, ...]]]:
    conv = lambda **kw: (lambda: g.Conv2d(tc.ConvSpec(**kw)))
    return [
        ("conv3x3", conv(in_channels=3, out_channels=4, kernel=3, padding=1), (2, 3, 6, 6)),
        ("conv1x1", conv(in_channels=4, out_channels=5, kernel=1), (2, 4, 5, 5)),
        ("conv7x7_stride2", conv(in_channels=3, out_channels=4, kernel=7, stride=2, padding=3, has_bias=False),
         (2, 3, 8, 8)),
        ("conv_dilated", conv(in_channels=3, out_channels=3, kernel=3, padding=2, dilation=2), (2, 3, 7, 7)),
        ("conv_grouped", conv(in_channels=4, out_channels=6, kernel=3, padding=1, groups=2), (2, 4, 5, 5)),
        ("conv_depthwise", conv(in_channels=4, out_channels=4, kernel=3, padding=3, dilation=3, groups=4,
                                has_bias=False), (2, 4, 6, 6)),
        ("conv_depthwise_multiplier", conv(in_channels=3, out_channels=6, kernel=3, padding=1, groups=3),
         (2, 3, 5, 5)),
        ("batchnorm", lambda: g.BatchNorm2d(4), (3, 4, 3, 3)),
        ("relu", lambda: g.ReLU(), (2, 3, 4, 4)),
        ("maxpool2x2", lambda: g.MaxPool2x2(), (2, 3, 6, 6)),
        ("upsample2x", lambda: g.UpsampleNearest2x(), (2, 3, 3, 3)),
        ("concat", lambda: g.Parallel([("a", g.Conv2d(tc.ConvSpec(3, 2, kernel=1))),
                                       ("b", g.Conv2d(tc.ConvSpec(3, 4, kernel=3, padding=1)))]), (2, 3, 4, 4)),
        ("residual_add", lambda: g.Residual(g.Conv2d(tc.ConvSpec(3, 3, kernel=3, padding=1))), (2, 3, 4, 4)),
    ]


def tiny_network_config(num_stacks: int = 1, variant: str = "original") -> NetworkConfig:
    return NetworkConfig(num_stacks=num_stacks, variant=variant, hg_depth=1, stem_channels=(8, 16),
                         hg_channels=16, num_joints=16, input_res=32, heatmap_res=8)


def _heatmap_objective(outs, rng):
    targets = rng.uniform(0, 1, size=outs[0].shape)
    weights = (rng.random(outs[0].shape[:2]) < 0.8).astype(np.float64)

    def value(o):
        return heatmap_loss(o, targets, weights)[0]

    def grad_of(o):
        return heatmap_loss(o, targets, weights)[1]

    return value, grad_of


def run_suite(variant: str = "dw1", seed: int = 0, samples: int = 6,
              networks: Tuple[int, ...] = (1,)) -> List[CheckResult]:
    """Primitives, block ``variant`` (projection and identity skips) and tiny networks."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}")
    rng = np.random.default_rng(seed)
    results = []
    for name, make, shape in primitive_cases():
        results.append(check_layer(f"primitive:{name}", _init(make(), rng), shape, rng, samples))
    mid = 4 if variant == "ghost" else None
    for label, spec in ((f"block:{variant}:projection", BlockSpec(variant, 4, 8, mid_channels=mid)),
                        (f"block:{variant}:identity", BlockSpec(variant, 8, 8, mid_channels=mid))):
        results.append(check_layer(label, _init(build_block(spec), rng), (2, spec.in_channels, 6, 6), rng, samples))
    for stacks in networks:
        net = build_network(tiny_network_config(stacks, variant), seed=None)
        results.append(check_layer(f"network:{stacks}stack:{variant}", _init(net, rng), (2, 3, 32, 32), rng,
                                   samples, loss=_heatmap_objective))
    return results


def format_results(results: List[CheckResult]) -> str:
    lines = [f"{'component':<40} {'worst_rel_err':>14}  {'where':<40} status"]
    for r in results:
        lines.append(f"{r.component:<40} {r.worst:14.3e}  {r.where:<40} {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
