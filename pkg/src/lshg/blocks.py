"""Residual bottleneck variants and the Ghost module.

Five main-path layouts share one residual wrapper (identity skip, or a 1x1
projection when the channel count changes). All are stride 1:

    original      1x1 -> 3x3 -> 1x1
    dw1           1x1 -> 3x3 depthwise-separable -> 1x1
    dw3           three 3x3 depthwise-separable convs
    ghost         ghost module -> ghost module
    multidilated  parallel (1x1 -> dilated 3x3 depthwise-separable) branches,
                  merged, then 1x1

Every conv except inside ghost modules is preceded by batchnorm + relu
(pre-activation). Parameter and MAC totals are available both from the
built graph and from closed-form formulas; ``block_param_count`` and
``block_mac_count`` insist the two agree.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

from . import graph as g
from .errors import ConfigError, ConsistencyError
from .tensor_core import ConvSpec, concat_channels, concat_channels_backward

VARIANTS = ("original", "dw1", "dw3", "ghost", "multidilated")


@dataclass(frozen=True)
class BlockSpec:
    variant: str
    in_channels: int
    out_channels: int
    mid_channels: Optional[int] = None
    dilations: Tuple[int, ...] = (1, 2, 3)
    ghost_ratio: int = 2
    merge: str = "concat"
    shared_reduce: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        if self.mid_channels is None:
            object.__setattr__(self, "mid_channels", max(self.out_channels // 2, 1))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        for name in ("in_channels", "out_channels", "mid_channels", "ghost_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BlockSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.variant == "ghost":
            for name in ("mid_channels", "out_channels"):
                if getattr(self, name) % self.ghost_ratio:
                    raise ConfigError(f"ghost block: {name}={getattr(self, name)} "
                                      f"not divisible by ratio {self.ghost_ratio}")
        if self.variant == "multidilated":
            if not self.dilations or min(self.dilations) < 1:
                raise ConfigError(f"multidilated needs positive dilations, got {self.dilations}")
            if self.merge not in ("concat", "sum"):
                raise ConfigError(f"merge must be 'concat' or 'sum', got {self.merge!r}")

    @property
    def has_projection(self) -> bool:
        return self.in_channels != self.out_channels


@dataclass(frozen=True)
class GhostModuleSpec:
    in_channels: int
    out_channels: int
    ratio: int = 2
    cheap_kernel: int = 3
    relu: bool = True

    def __post_init__(self):
        if self.ratio < 1 or self.out_channels % self.ratio:
            raise ConfigError(f"ghost module: out_channels={self.out_channels} "
                              f"not divisible by ratio {self.ratio}")
        if self.cheap_kernel < 1 or self.cheap_kernel % 2 == 0:
            raise ConfigError(f"cheap_kernel must be odd and positive, got {self.cheap_kernel}")

    @property
    def intrinsic_channels(self) -> int:
        return self.out_channels // self.ratio

    @property
    def ghost_channels(self) -> int:
        return self.out_channels - self.intrinsic_channels


# ---------------------------------------------------------------------------
# builders


def conv1x1(cin, cout, bias):
    return g.Conv2d(ConvSpec(cin, cout, kernel=1, has_bias=bias))


def bn_relu_conv(cin, cout, kernel=1, bias=False):
    return g.Sequential([
        ("bn", g.BatchNorm2d(cin)),
        ("relu", g.ReLU()),
        ("conv", g.Conv2d(ConvSpec(cin, cout, kernel=kernel, padding=kernel // 2, has_bias=bias))),
    ])


def bn_relu_dwsep(cin, cout, dilation=1, bias=False):
    """Pre-activated depthwise 3x3 (no bias) followed by a pointwise 1x1."""
    return g.Sequential([
        ("bn", g.BatchNorm2d(cin)),
        ("relu", g.ReLU()),
        ("depthwise", g.Conv2d(ConvSpec(cin, cin, kernel=3, padding=dilation, dilation=dilation,
                                        groups=cin, has_bias=False))),
        ("pointwise", conv1x1(cin, cout, bias)),
    ])


class GhostModule(g.Layer):
    """Intrinsic maps from a 1x1 conv, ghost maps from a cheap depthwise conv
    on them; output is ``concat(intrinsic, ghost)``."""

    kind = "ghost_module"

    def __init__(self, spec: GhostModuleSpec):
        super().__init__()
        self.spec = spec
        primary = [("conv", conv1x1(spec.in_channels, spec.intrinsic_channels, False)),
                   ("bn", g.BatchNorm2d(spec.intrinsic_channels))]
        if spec.relu:
            primary.append(("relu", g.ReLU()))
        self.add("primary", g.Sequential(primary))
        if spec.ghost_channels:
            k = spec.cheap_kernel
            cheap = [("conv", g.Conv2d(ConvSpec(spec.intrinsic_channels, spec.ghost_channels, kernel=k,
                                                padding=k // 2, groups=spec.intrinsic_channels,
                                                has_bias=False))),
                     ("bn", g.BatchNorm2d(spec.ghost_channels))]
            if spec.relu:
                cheap.append(("relu", g.ReLU()))
            self.add("cheap", g.Sequential(cheap))

    def forward(self, x, keep=True):
        a = self.children["primary"].forward(x, keep=keep)
        if "cheap" not in self.children:
            return a
        b = self.children["cheap"].forward(a, keep=keep)
        return concat_channels([a, b])

    def backward(self, grad):
        if "cheap" not in self.children:
            return self.children["primary"].backward(grad)
        ga, gb = concat_channels_backward(grad, [self.spec.intrinsic_channels, self.spec.ghost_channels])
        ga = ga + self.children["cheap"].backward(gb)
        return self.children["primary"].backward(ga)

    def trace(self, shape):
        a, macs = self.children["primary"].trace(shape)
        if "cheap" not in self.children:
            return a, macs
        b, m = self.children["cheap"].trace(a)
        return (a[0], a[1] + b[1], a[2], a[3]), macs + m


def build_ghost_module(spec: GhostModuleSpec) -> GhostModule:
    return GhostModule(spec)


def _main_path(spec: BlockSpec) -> g.Layer:
    cin, cout, mid = spec.in_channels, spec.out_channels, spec.mid_channels
    v = spec.variant
    if v == "original":
        return g.Sequential([("conv1", bn_relu_conv(cin, mid, 1)),
                             ("conv2", bn_relu_conv(mid, mid, 3)),
                             ("conv3", bn_relu_conv(mid, cout, 1, bias=True))])
    if v == "dw1":
        return g.Sequential([("conv1", bn_relu_conv(cin, mid, 1)),
                             ("conv2", bn_relu_dwsep(mid, mid)),
                             ("conv3", bn_relu_conv(mid, cout, 1, bias=True))])
    if v == "dw3":
        return g.Sequential([("conv1", bn_relu_dwsep(cin, mid)),
                             ("conv2", bn_relu_dwsep(mid, mid)),
                             ("conv3", bn_relu_dwsep(mid, cout, bias=True))])
    if v == "ghost":
        r = spec.ghost_ratio
        return g.Sequential([("ghost1", GhostModule(GhostModuleSpec(cin, mid, r, relu=True))),
                             ("ghost2", GhostModule(GhostModuleSpec(mid, cout, r, relu=False)))])
    # multidilated
    merged = mid * len(spec.dilations) if spec.merge == "concat" else mid
    if spec.shared_reduce:
        branches = [(f"d{d}", bn_relu_dwsep(mid, mid, d)) for d in spec.dilations]
        return g.Sequential([("conv1", bn_relu_conv(cin, mid, 1)),
                             ("branches", g.Parallel(branches, spec.merge)),
                             ("conv3", bn_relu_conv(merged, cout, 1, bias=True))])
    branches = [(f"d{d}", g.Sequential([("reduce", bn_relu_conv(cin, mid, 1)),
                                        ("dwsep", bn_relu_dwsep(mid, mid, d))]))
                for d in spec.dilations]
    return g.Sequential([("branches", g.Parallel(branches, spec.merge)),
                         ("conv3", bn_relu_conv(merged, cout, 1, bias=True))])


def build_block(spec: BlockSpec) -> g.Residual:
    skip = conv1x1(spec.in_channels, spec.out_channels, True) if spec.has_projection else None
    block = g.Residual(_main_path(spec), skip)
    block.spec = spec
    return block


# ---------------------------------------------------------------------------
# closed-form accounting


def _bn(c):
    return 2 * c


def _dwsep_params(cin, cout, bias):
    return 9 * cin + cin * cout + (cout if bias else 0)


def ghost_module_param_closed_form(spec: GhostModuleSpec) -> int:
    i, gh = spec.intrinsic_channels, spec.ghost_channels
    total = spec.in_channels * i + _bn(i)
    if gh:
        total += gh * spec.cheap_kernel ** 2 + _bn(gh)
    return total


def ghost_module_mac_closed_form(spec: GhostModuleSpec, h: int, w: int) -> int:
    return h * w * (spec.in_channels * spec.intrinsic_channels + spec.ghost_channels * spec.cheap_kernel ** 2)


def block_param_closed_form(spec: BlockSpec) -> int:
    """Learnable parameters (conv weights, biases, batchnorm gamma/beta)."""
    cin, cout, mid = spec.in_channels, spec.out_channels, spec.mid_channels
    v = spec.variant
    if v == "original":
        main = _bn(cin) + cin * mid + _bn(mid) + 9 * mid * mid + _bn(mid) + mid * cout + cout
    elif v == "dw1":
        main = _bn(cin) + cin * mid + _bn(mid) + _dwsep_params(mid, mid, False) + _bn(mid) + mid * cout + cout
    elif v == "dw3":
        main = (_bn(cin) + _dwsep_params(cin, mid, False) + _bn(mid) + _dwsep_params(mid, mid, False)
                + _bn(mid) + _dwsep_params(mid, cout, True))
    elif v == "ghost":
        r = spec.ghost_ratio
        main = (ghost_module_param_closed_form(GhostModuleSpec(cin, mid, r))
                + ghost_module_param_closed_form(GhostModuleSpec(mid, cout, r)))
    else:
        nb = len(spec.dilations)
        merged = mid * nb if spec.merge == "concat" else mid
        branch = _bn(mid) + _dwsep_params(mid, mid, False)
        reduce = _bn(cin) + cin * mid
        main = (reduce + nb * branch) if spec.shared_reduce else nb * (reduce + branch)
        main += _bn(merged) + merged * cout + cout
    skip = cin * cout + cout if spec.has_projection else 0
    return main + skip


def block_mac_closed_form(spec: BlockSpec, h: int, w: int) -> int:
    """Conv multiply-accumulates for one h x w image (bias/norm/activation excluded)."""
    cin, cout, mid = spec.in_channels, spec.out_channels, spec.mid_channels
    v = spec.variant
    if v == "original":
        per_px = cin * mid + 9 * mid * mid + mid * cout
    elif v == "dw1":
        per_px = cin * mid + 9 * mid + mid * mid + mid * cout
    elif v == "dw3":
        per_px = 9 * cin + cin * mid + 9 * mid + mid * mid + 9 * mid + mid * cout
    elif v == "ghost":
        r = spec.ghost_ratio
        return (ghost_module_mac_closed_form(GhostModuleSpec(cin, mid, r), h, w)
                + ghost_module_mac_closed_form(GhostModuleSpec(mid, cout, r), h, w)
                + (h * w * cin * cout if spec.has_projection else 0))
    else:
        nb = len(spec.dilations)
        merged = mid * nb if spec.merge == "concat" else mid
        reduce = cin * mid * (1 if spec.shared_reduce else nb)
        per_px = reduce + nb * (9 * mid + mid * mid) + merged * cout
    if spec.has_projection:
        per_px += cin * cout
    return h * w * per_px


def block_param_count(spec: BlockSpec) -> int:
    """Enumerated parameter total of the built block, audited against the closed form."""
    enumerated = build_block(spec).num_parameters()
    closed = block_param_closed_form(spec)
    if enumerated != closed:
        raise ConsistencyError(f"{spec}: enumerated params {enumerated} != closed form {closed}")
    return enumerated


def block_mac_count(spec: BlockSpec, h: int, w: int) -> int:
    if h < 1 or w < 1:
        raise ConfigError(f"spatial size must be positive, got {h}x{w}")
    _, enumerated = build_block(spec).trace((1, spec.in_channels, h, w))
    closed = block_mac_closed_form(spec, h, w)
    if enumerated != closed:
        raise ConsistencyError(f"{spec}: enumerated MACs {enumerated} != closed form {closed}")
    return enumerated
