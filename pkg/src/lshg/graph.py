"""Layer graph: named, nested layer nodes over the tensor_core primitives.

A node owns its parameter arrays (``params``), their gradients (``grads``)
and non-learnable state (``buffers``). Containers give children dotted
names, so every array in a built graph has a unique path such as
``stacks.0.hg.low1.main.conv2.conv.weight``.

Gradients accumulate into ``grads`` on ``backward``; call ``zero_grad``
between steps. A node keeps the activations of its most recent
``forward(..., keep=True)`` for the following ``backward``.
"""
from __future__ import annotations

import zlib
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ShapeError

Shape = Tuple[int, int, int, int]


class Layer:
    """Base node. Leaf layers override forward/backward/trace."""

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.children: Dict[str, "Layer"] = {}
        self.training = True

    # -- structure -----------------------------------------------------
    def add(self, name: str, layer: "Layer") -> "Layer":
        if "." in name or name in self.children:
            raise ValueError(f"bad or duplicate child name {name!r}")
        self.children[name] = layer
        return layer

    def __getitem__(self, name):
        node = self
        for part in str(name).split("."):
            node = node.children[part]
        return node

    def named_layers(self, prefix: str = "") -> Iterator[Tuple[str, "Layer"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_layers(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, layer in self.named_layers(prefix):
            for key, value in layer.params.items():
                yield (f"{path}.{key}" if path else key), value

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, layer in self.named_layers(prefix):
            for key, value in layer.buffers.items():
                yield (f"{path}.{key}" if path else key), value

    def named_grads(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for path, layer in self.named_layers():
            for key, value in layer.params.items():
                yield (f"{path}.{key}" if path else key), value, layer.grads[key]

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer by dotted name."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state(self, state: Dict[str, np.ndarray]):
        for path, layer in self.named_layers():
            for store in (layer.params, layer.buffers):
                for key in store:
                    name = f"{path}.{key}" if path else key
                    value = state[name]
                    if value.shape != store[key].shape:
                        raise ShapeError(f"{name}: shape {value.shape} != {store[key].shape}")
                    store[key] = np.array(value, dtype=store[key].dtype)
        self.zero_grad()

    def num_parameters(self) -> int:
        return sum(int(v.size) for _, v in self.named_parameters())

    def train(self, mode: bool = True) -> "Layer":
        for _, layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}

    def astype(self, dtype) -> "Layer":
        for _, layer in self.named_layers():
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer.buffers = {k: v.astype(dtype) for k, v in layer.buffers.items()}
        self.zero_grad()
        return self

    @property
    def dtype(self):
        for _, value in self.named_parameters():
            return value.dtype
        return np.dtype(np.float32)

    # -- computation ---------------------------------------------------
    def __call__(self, x, keep: bool = True):
        return self.forward(x, keep=keep)

    def forward(self, x, keep: bool = True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def trace(self, shape: Shape) -> Tuple[Shape, int]:
        """Output shape and MAC count for an input of ``shape`` (no data touched)."""
        raise NotImplementedError


def _stable_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def init_parameters(graph: Layer, seed: int, dtype=np.float32) -> Layer:
    """Seeded init, drawn per parameter from (seed, name).

    Each tensor's values depend only on the seed and its own dotted name, so
    two graphs that share a name share its initial value.
    """
    for path, layer in graph.named_layers():
        for key in layer.params:
            name = f"{path}.{key}" if path else key
            rng = np.random.default_rng([int(seed), _stable_key(name)])
            layer.params[key] = layer.init_value(key, rng).astype(dtype)
        for key in layer.buffers:
            layer.buffers[key] = layer.buffers[key].astype(dtype)
    graph.zero_grad()
    return graph


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, spec: tc.ConvSpec):
        super().__init__()
        self.spec = spec
        self.params["weight"] = np.zeros(spec.weight_shape, dtype=np.float32)
        if spec.has_bias:
            self.params["bias"] = np.zeros(spec.out_channels, dtype=np.float32)
        self.zero_grad()
        self._x = None

    def init_value(self, key, rng):
        bound = np.sqrt(1.0 / self.spec.fan_in)
        return rng.uniform(-bound, bound, size=self.params[key].shape)

    def forward(self, x, keep=True):
        self._x = x if keep else None
        return tc.conv2d_forward(x, self.spec, self.params["weight"], self.params.get("bias"))

    def backward(self, grad):
        gx, gw, gb = tc.conv2d_backward(self._x, self.spec, self.params["weight"], grad)
        self.grads["weight"] += gw
        if gb is not None:
            self.grads["bias"] += gb
        return gx

    def trace(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise ShapeError(f"conv expects {self.spec.in_channels} channels, got {c}")
        oh, ow = self.spec.output_hw(h, w)
        return (n, self.spec.out_channels, oh, ow), n * self.spec.macs(h, w)

    def __repr__(self):
        s = self.spec
        return f"Conv2d({s.in_channels}->{s.out_channels}, k={s.kernel}, d={s.dilation}, g={s.groups})"


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)
        self.zero_grad()
        self._cache = None

    def init_value(self, key, rng):
        return np.ones(self.channels) if key == "gamma" else np.zeros(self.channels)

    def forward(self, x, keep=True):
        res = tc.batchnorm_forward(x, self.params["gamma"], self.params["beta"],
                                   self.buffers["running_mean"], self.buffers["running_var"],
                                   self.training, self.momentum, self.eps)
        self.buffers["running_mean"], self.buffers["running_var"] = res.running_mean, res.running_var
        self._cache = res.cache if keep else None
        return res.out

    def backward(self, grad):
        gx, gg, gb = tc.batchnorm_backward(grad, self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx

    def trace(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {shape[1]}")
        return shape, 0


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, keep=True):
        self._x = x if keep else None
        return tc.relu(x)

    def backward(self, grad):
        return tc.relu_backward(grad, self._x)

    def trace(self, shape):
        return shape, 0


class MaxPool2x2(Layer):
    kind = "pool"

    def forward(self, x, keep=True):
        out, idx = tc.maxpool2x2_forward(x)
        self._cache = (idx, x.shape) if keep else None
        return out

    def backward(self, grad):
        idx, shape = self._cache
        return tc.maxpool2x2_backward(grad, idx, shape)

    def trace(self, shape):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise tc.GeometryError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        return (n, c, h // 2, w // 2), 0


class UpsampleNearest2x(Layer):
    kind = "upsample"

    def forward(self, x, keep=True):
        return tc.upsample_nearest2x(x)

    def backward(self, grad):
        return tc.upsample_nearest2x_backward(grad)

    def trace(self, shape):
        n, c, h, w = shape
        return (n, c, 2 * h, 2 * w), 0


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: Sequence[Tuple[str, Layer]] = ()):
        super().__init__()
        for name, layer in layers:
            self.add(name, layer)

    def forward(self, x, keep=True):
        for layer in self.children.values():
            x = layer.forward(x, keep=keep)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad

    def trace(self, shape):
        macs = 0
        for layer in self.children.values():
            shape, m = layer.trace(shape)
            macs += m
        return shape, macs


class Residual(Layer):
    """``skip(x) + main(x)``; a missing skip is the identity."""

    kind = "residual"

    def __init__(self, main: Layer, skip: Optional[Layer] = None):
        super().__init__()
        self.add("main", main)
        if skip is not None:
            self.add("skip", skip)

    def forward(self, x, keep=True):
        main = self.children["main"].forward(x, keep=keep)
        skip = self.children["skip"].forward(x, keep=keep) if "skip" in self.children else x
        return tc.add(skip, main)

    def backward(self, grad):
        gx = self.children["main"].backward(grad)
        if "skip" in self.children:
            return gx + self.children["skip"].backward(grad)
        return gx + grad

    def trace(self, shape):
        out, macs = self.children["main"].trace(shape)
        if "skip" in self.children:
            skip_out, skip_macs = self.children["skip"].trace(shape)
            macs += skip_macs
        else:
            skip_out = shape
        if skip_out != out:
            raise ShapeError(f"residual branches disagree: skip {skip_out} vs main {out}")
        return out, macs


class Parallel(Layer):
    """Runs every branch on the same input and merges by channel concat or sum."""

    kind = "parallel"

    def __init__(self, branches: Sequence[Tuple[str, Layer]], merge: str = "concat"):
        super().__init__()
        if merge not in ("concat", "sum"):
            raise ValueError(f"merge must be 'concat' or 'sum', got {merge!r}")
        self.merge = merge
        for name, layer in branches:
            self.add(name, layer)
        self._sizes: List[int] = []

    def forward(self, x, keep=True):
        outs = [b.forward(x, keep=keep) for b in self.children.values()]
        if self.merge == "sum":
            total = outs[0]
            for o in outs[1:]:
                total = tc.add(total, o)
            return total
        self._sizes = [o.shape[1] for o in outs]
        return tc.concat_channels(outs)

    def backward(self, grad):
        branches = list(self.children.values())
        if self.merge == "sum":
            parts = [grad] * len(branches)
        else:
            parts = tc.concat_channels_backward(grad, self._sizes)
        gx = None
        for branch, g in zip(branches, parts):
            gb = branch.backward(np.ascontiguousarray(g))
            gx = gb if gx is None else gx + gb
        return gx

    def trace(self, shape):
        outs, macs = [], 0
        for b in self.children.values():
            o, m = b.trace(shape)
            outs.append(o)
            macs += m
        if self.merge == "sum":
            if any(o != outs[0] for o in outs):
                raise ShapeError(f"sum-merged branches disagree: {outs}")
            return outs[0], macs
        n, _, h, w = outs[0]
        if any((o[0], o[2], o[3]) != (n, h, w) for o in outs):
            raise ShapeError(f"concat branches disagree spatially: {outs}")
        return (n, sum(o[1] for o in outs), h, w), macs


def count_by_kind(graph: Layer) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for _, layer in graph.named_layers():
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
    return counts
