"""Recursive hourglass, stem, and stacked network with per-stack heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import graph as g
from .blocks import VARIANTS, BlockSpec, build_block, conv1x1
from .errors import ConfigError, GeometryError, ShapeError
from .tensor_core import ConvSpec


@dataclass(frozen=True)
class NetworkConfig:
    num_stacks: int = 1
    variant: str = "original"
    hg_depth: int = 4
    stem_channels: Tuple[int, int] = (64, 128)
    hg_channels: int = 128
    num_joints: int = 16
    input_res: int = 256
    heatmap_res: int = 64
    reduced_stem: bool = False
    blocks_per_scale: int = 1
    merge: str = "concat"
    shared_reduce: bool = False
    ghost_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        for name in ("num_stacks", "hg_depth", "hg_channels", "num_joints", "input_res",
                     "heatmap_res", "blocks_per_scale", "ghost_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 1:
            raise ConfigError(f"stem_channels must be two positive integers, got {self.stem_channels}")
        if self.input_res != 4 * self.heatmap_res:
            raise ConfigError(f"input_res/heatmap_res must be 4, got {self.input_res}/{self.heatmap_res}")
        bottom = self.heatmap_res / 2 ** self.hg_depth
        if bottom < 4 or bottom != int(bottom):
            raise ConfigError(f"heatmap_res {self.heatmap_res} with hg_depth {self.hg_depth} "
                              f"bottoms out at {bottom}, need an integer >= 4")
        if self.merge not in ("concat", "sum"):
            raise ConfigError(f"merge must be 'concat' or 'sum', got {self.merge!r}")

    @property
    def stem_width(self) -> int:
        """Width of the stem conv and of the first two bottlenecks' inner maps."""
        return 32 if self.reduced_stem else self.stem_channels[0]

    def block(self, cin, cout, mid=None) -> BlockSpec:
        return BlockSpec(self.variant, cin, cout, mid, ghost_ratio=self.ghost_ratio,
                         merge=self.merge, shared_reduce=self.shared_reduce)

    def stem_blocks(self) -> List[Tuple[str, BlockSpec]]:
        s0, s1 = self.stem_width, self.stem_channels[1]
        return [("res1", self.block(s0, s1, s0)),
                ("res2", self.block(s1, s1, s0)),
                ("res3", self.block(s1, self.hg_channels))]

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(valid)}")
        return cls(**d)


# name, num_stacks, variant, reduced_stem, reference parameter count (M)
REFERENCE_TABLE = (
    ("baseline8", 8, "original", False, 97.7),
    ("hg1", 1, "original", False, 12.6),
    ("hg2", 2, "original", False, 24.8),
    ("dw1_1", 1, "dw1", False, 5.0),
    ("dw3_1", 1, "dw3", False, 5.4),
    ("ghost_1", 1, "ghost", False, 2.2),
    ("ghost_reduced_1", 1, "ghost", True, 2.1),
    ("multidilated_1", 1, "multidilated", False, 13.7),
    ("dw1_2", 2, "dw1", False, 9.9),
    ("multidilated_2", 2, "multidilated", False, 26.9),
)

PRESETS: Dict[str, NetworkConfig] = {
    name: NetworkConfig(num_stacks=stacks, variant=variant, reduced_stem=reduced)
    for name, stacks, variant, reduced, _ in REFERENCE_TABLE
}
REFERENCE_PARAMS_M: Dict[str, float] = {name: value for name, *_, value in REFERENCE_TABLE}


class Hourglass(g.Layer):
    """One level: ``up1(x) + up(low3(low2(low1(pool(x)))))``; low2 recurses."""

    kind = "hourglass"

    def __init__(self, depth: int, channels: int, block_spec: BlockSpec, blocks_per_scale: int = 1):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"hourglass depth must be >= 1, got {depth}")
        self.depth = depth
        self.bottom_shape = None

        def blocks():
            if blocks_per_scale == 1:
                return build_block(block_spec)
            return g.Sequential([(str(i), build_block(block_spec)) for i in range(blocks_per_scale)])

        self.add("up1", blocks())
        self.add("pool", g.MaxPool2x2())
        self.add("low1", blocks())
        if depth > 1:
            self.add("low2", Hourglass(depth - 1, channels, block_spec, blocks_per_scale))
        else:
            self.add("low2", blocks())
        self.add("low3", blocks())
        self.add("up", g.UpsampleNearest2x())

    def _check(self, h, w):
        f = 2 ** self.depth
        if h % f or w % f:
            raise GeometryError(f"hourglass of depth {self.depth} needs spatial dims divisible by {f}, got {h}x{w}")

    def forward(self, x, keep=True):
        self._check(*x.shape[2:])
        c = self.children
        up1 = c["up1"].forward(x, keep)
        low = c["low1"].forward(c["pool"].forward(x, keep), keep)
        if self.depth == 1:
            self.bottom_shape = low.shape
        low = c["up"].forward(c["low3"].forward(c["low2"].forward(low, keep), keep), keep)
        return up1 + low

    def backward(self, grad):
        c = self.children
        gl = c["low3"].backward(c["up"].backward(grad))
        gl = c["pool"].backward(c["low1"].backward(c["low2"].backward(gl)))
        return c["up1"].backward(grad) + gl

    def trace(self, shape):
        self._check(*shape[2:])
        c = self.children
        out, macs = c["up1"].trace(shape)
        s = shape
        for name in ("pool", "low1", "low2", "low3", "up"):
            s, m = c[name].trace(s)
            macs += m
        if s != out:
            raise ShapeError(f"hourglass branches disagree: {out} vs {s}")
        return out, macs

    def innermost(self) -> "Hourglass":
        node = self
        while node.depth > 1:
            node = node.children["low2"]
        return node


def build_hourglass(depth: int, channels: int, variant: str = "original", blocks_per_scale: int = 1,
                    **block_kwargs) -> Hourglass:
    return Hourglass(depth, channels, BlockSpec(variant, channels, channels, **block_kwargs), blocks_per_scale)


class Namespace(g.Layer):
    kind = "namespace"


class StackedHourglass(g.Layer):
    """Stem followed by ``num_stacks`` hourglass stages, each with a heatmap head.

    Non-final stages feed ``x + fc_(features) + score_(heatmaps)`` to the
    next stage.
    """

    kind = "network"

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        cfg = config
        c, j = cfg.hg_channels, cfg.num_joints
        stem = [("conv", g.Conv2d(ConvSpec(3, cfg.stem_width, kernel=7, stride=2, padding=3, has_bias=False))),
                ("bn", g.BatchNorm2d(cfg.stem_width)),
                ("relu", g.ReLU())]
        (first, first_spec), *rest = cfg.stem_blocks()
        stem.append((first, build_block(first_spec)))
        stem.append(("pool", g.MaxPool2x2()))
        stem.extend((name, build_block(spec)) for name, spec in rest)
        self.add("stem", g.Sequential(stem))
        stacks = self.add("stacks", Namespace())
        for i in range(cfg.num_stacks):
            st = stacks.add(str(i), Namespace())
            st.add("hg", Hourglass(cfg.hg_depth, c, cfg.block(c, c), cfg.blocks_per_scale))
            st.add("res", build_block(cfg.block(c, c)))
            st.add("fc", g.Sequential([("conv", conv1x1(c, c, False)),
                                       ("bn", g.BatchNorm2d(c)),
                                       ("relu", g.ReLU())]))
            st.add("score", conv1x1(c, j, True))
            if i < cfg.num_stacks - 1:
                st.add("fc_", conv1x1(c, c, True))
                st.add("score_", conv1x1(j, c, True))

    def stack(self, i: int) -> g.Layer:
        return self.children["stacks"].children[str(i)]

    def forward(self, x, keep=True) -> List[np.ndarray]:
        n, ch, h, w = x.shape
        res = self.config.input_res
        if ch != 3 or (h, w) != (res, res):
            raise ShapeError(f"network expects (N, 3, {res}, {res}) input, got {x.shape}")
        x = self.children["stem"].forward(x, keep)
        outs = []
        for i in range(self.config.num_stacks):
            st = self.stack(i).children
            y = st["fc"].forward(st["res"].forward(st["hg"].forward(x, keep), keep), keep)
            score = st["score"].forward(y, keep)
            outs.append(score)
            if "fc_" in st:
                x = x + st["fc_"].forward(y, keep) + st["score_"].forward(score, keep)
        return outs

    def backward(self, grads: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        if len(grads) != self.config.num_stacks:
            raise ShapeError(f"expected {self.config.num_stacks} heatmap gradients, got {len(grads)}")
        gx = None
        for i in reversed(range(self.config.num_stacks)):
            st = self.stack(i).children
            gs = grads[i]
            gy = None
            if gx is not None:
                gy = st["fc_"].backward(gx)
                extra = st["score_"].backward(gx)
                gs = extra if gs is None else gs + extra
            if gs is not None:
                g_score = st["score"].backward(gs)
                gy = g_score if gy is None else gy + g_score
            if gy is None:
                continue
            g_in = st["hg"].backward(st["res"].backward(st["fc"].backward(gy)))
            gx = g_in if gx is None else gx + g_in
        if gx is None:
            raise ValueError("all heatmap gradients were None")
        return self.children["stem"].backward(gx)

    def trace(self, shape):
        s, macs = self.children["stem"].trace(shape)
        outs = []
        for i in range(self.config.num_stacks):
            st = self.stack(i).children
            y = s
            for name in ("hg", "res", "fc"):
                y, m = st[name].trace(y)
                macs += m
            score, m = st["score"].trace(y)
            macs += m
            outs.append(score)
            if "fc_" in st:
                for name, src in (("fc_", y), ("score_", score)):
                    _, m = st[name].trace(src)
                    macs += m
        return outs, macs

    def innermost_resolution(self, stack: int = 0):
        bottom = self.stack(stack).children["hg"].innermost().bottom_shape
        return None if bottom is None else tuple(bottom[2:])


def build_network(config: NetworkConfig, seed: Optional[int] = 0, dtype=np.float32) -> StackedHourglass:
    """Builds and (unless ``seed`` is None) initializes a network."""
    net = StackedHourglass(config)
    if seed is not None:
        g.init_parameters(net, seed, dtype)
    return net


def count_parameters(net: g.Layer) -> int:
    return net.num_parameters()


def count_macs(net: StackedHourglass, input_res: Optional[int] = None) -> int:
    res = input_res or net.config.input_res
    _, macs = net.trace((1, 3, res, res))
    return macs


def with_width(config: NetworkConfig, width: int) -> NetworkConfig:
    return replace(config, hg_channels=width)
