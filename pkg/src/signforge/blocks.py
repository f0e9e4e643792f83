"""Architecture building blocks: composable layers with paired backward passes.

Each block kind is declared by a frozen spec that can compute its output
shape and learnable-parameter count statically, before any tensor is
allocated; `build_block` turns a spec into a live `Layer` tree. Convolutions
feeding a batchnorm carry no bias; standalone convolutions do.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, ShapeError

Shape = tuple[int, int, int]  # (C, H, W), batch axis implied


def _pool_out(h: int, w: int, k: int, stride: int) -> tuple[int, int]:
    return (h - k) // stride + 1, (w - k) // stride + 1


def _same_out(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


# ---------------------------------------------------------------------------
# Layer tree

class Layer:
    """A node in the computation tree. Parameters are local arrays exposed
    under dotted full names; forward returns a cache consumed by backward."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Tensor] = {}

    def _p(self, key: str) -> str:
        return f"{self.name}.{key}" if self.name else key

    def children(self) -> list["Layer"]:
        return []

    def iter_layers(self) -> Iterator["Layer"]:
        yield self
        for c in self.children():
            yield from c.iter_layers()

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.iter_layers():
            for key, value in layer._params.items():
                yield layer._p(key), value

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def to_dtype(self, dtype) -> None:
        """Cast parameters (and BN running stats) in place; used by the
        float64 gradient-checking mode."""
        for layer in self.iter_layers():
            for key in layer._params:
                layer._params[key] = layer._params[key].astype(dtype)
            if isinstance(layer, BatchNorm):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)

    def forward(self, x: Tensor, mode: str) -> tuple[Tensor, object]:
        raise NotImplementedError

    def backward(self, dy: Tensor, cache: object) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int,
                 padding: str, bias: bool, rng: np.random.Generator):
        super().__init__(name)
        std = np.sqrt(2.0 / (cin * k * k))
        self._params["w"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        if bias:
            self._params["b"] = np.zeros(cout, dtype=np.float32)
        self.stride, self.padding = stride, padding

    def _conv_params(self) -> ConvParams:
        return ConvParams(self._params["w"], self._params.get("b"), self.stride, self.padding)

    def forward(self, x, mode):
        return ops.conv2d(x, self._conv_params()), x

    def backward(self, dy, cache):
        dx, dw, db = ops.conv2d_grad(cache, self._conv_params(), dy)
        grads = {self._p("w"): dw}
        if db is not None:
            grads[self._p("b")] = db
        return dx, grads


class DepthwiseConv(Layer):
    def __init__(self, name: str, c: int, k: int, stride: int, padding: str,
                 bias: bool, rng: np.random.Generator):
        super().__init__(name)
        std = np.sqrt(2.0 / (k * k))
        self._params["w"] = (rng.standard_normal((c, 1, k, k)) * std).astype(np.float32)
        if bias:
            self._params["b"] = np.zeros(c, dtype=np.float32)
        self.stride, self.padding = stride, padding

    def _conv_params(self) -> ConvParams:
        return ConvParams(self._params["w"], self._params.get("b"), self.stride, self.padding)

    def forward(self, x, mode):
        return ops.depthwise_conv2d(x, self._conv_params()), x

    def backward(self, dy, cache):
        dx, dw, db = ops.depthwise_conv2d_grad(cache, self._conv_params(), dy)
        grads = {self._p("w"): dw}
        if db is not None:
            grads[self._p("b")] = db
        return dx, grads


class BatchNorm(Layer):
    def __init__(self, name: str, c: int):
        super().__init__(name)
        self._params["gamma"] = np.ones(c, dtype=np.float32)
        self._params["beta"] = np.zeros(c, dtype=np.float32)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.epsilon = 1e-5
        self.momentum = 0.1

    def state(self) -> BatchNormState:
        return BatchNormState(self._params["gamma"], self._params["beta"],
                              self.running_mean, self.running_var,
                              self.epsilon, self.momentum)

    def forward(self, x, mode):
        y, new_state, cache = ops.batchnorm2d(x, self.state(), mode)
        if mode == "train":
            self.running_mean = new_state.running_mean
            self.running_var = new_state.running_var
        return y, cache

    def backward(self, dy, cache):
        dx, dgamma, dbeta = ops.batchnorm2d_grad(cache, dy)
        return dx, {self._p("gamma"): dgamma, self._p("beta"): dbeta}


class ReLU(Layer):
    def forward(self, x, mode):
        return ops.relu(x), x

    def backward(self, dy, cache):
        return ops.relu_grad(cache, dy), {}


class MaxPool(Layer):
    def __init__(self, name: str, k: int, stride: int, padding: int = 0):
        super().__init__(name)
        self.k, self.stride, self.pad = k, stride, padding

    def forward(self, x, mode):
        y, arg = ops.maxpool2d(x, self.k, self.stride, self.pad)
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        x_shape, arg = cache
        return ops.maxpool2d_grad(x_shape, arg, dy, self.k, self.stride, self.pad), {}


class AvgPool(Layer):
    def __init__(self, name: str, k: int, stride: int):
        super().__init__(name)
        self.k, self.stride = k, stride

    def forward(self, x, mode):
        return ops.avgpool2d(x, self.k, self.stride), x.shape

    def backward(self, dy, cache):
        return ops.avgpool2d_grad(cache, dy, self.k, self.stride), {}


class GlobalAvgPool(Layer):
    def forward(self, x, mode):
        return ops.global_avg_pool(x), x.shape

    def backward(self, dy, cache):
        return ops.global_avg_pool_grad(cache, dy), {}


class Flatten(Layer):
    def forward(self, x, mode):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Linear(Layer):
    def __init__(self, name: str, d: int, k: int, rng: np.random.Generator,
                 init: str = "he"):
        super().__init__(name)
        if init == "he":
            std = np.sqrt(2.0 / d)
            w = (rng.standard_normal((d, k)) * std).astype(np.float32)
        elif init == "zero":
            w = np.zeros((d, k), dtype=np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._params["w"] = w
        self._params["b"] = np.zeros(k, dtype=np.float32)

    def forward(self, x, mode):
        return ops.linear(x, self._params["w"], self._params["b"]), x

    def backward(self, dy, cache):
        dx, dw, db = ops.linear_grad(cache, self._params["w"], dy)
        return dx, {self._p("w"): dw, self._p("b"): db}


class Sequential(Layer):
    def __init__(self, name: str, layers: list[Layer]):
        super().__init__(name)
        self.layers = layers

    def children(self):
        return self.layers

    def forward(self, x, mode):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, mode)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        grads: dict[str, Tensor] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, cache)
            grads.update(g)
        return dy, grads


# ---------------------------------------------------------------------------
# Composite blocks

class VggBlock(Sequential):
    """n x (conv3x3-same -> relu) at a fixed width, then 2x2/2 max-pool."""

    def forward(self, x, mode):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"vgg block needs spatial dims >= 2, got {x.shape[2]}x{x.shape[3]}")
        return super().forward(x, mode)


class InceptionModule(Layer):
    """Parallel 1x1 / reduced 3x3 / reduced 5x5 / pooled 1x1 branches,
    concatenated on the channel axis."""

    def __init__(self, name: str, branches: list[Sequential], widths: list[int]):
        super().__init__(name)
        self.branches = branches
        self.widths = widths  # output channels per branch

    def children(self):
        return self.branches

    def forward(self, x, mode):
        outs, caches = [], []
        for br in self.branches:
            y, c = br.forward(x, mode)
            outs.append(y)
            caches.append(c)
        return np.concatenate(outs, axis=1), caches

    def backward(self, dy, caches):
        grads: dict[str, Tensor] = {}
        dx = None
        offset = 0
        for br, cache, w in zip(self.branches, caches, self.widths):
            dxb, g = br.backward(dy[:, offset:offset + w], cache)
            grads.update(g)
            dx = dxb if dx is None else dx + dxb
            offset += w
        return dx, grads


class ResidualAdd(Layer):
    """y = post(F(x) + shortcut(x)); shortcut None means identity.
    `relu_after` distinguishes the classic residual sum (ReLU applied) from
    the linear bottleneck (sum left untouched)."""

    def __init__(self, name: str, branch: Sequential,
                 shortcut: Optional[Sequential], relu_after: bool):
        super().__init__(name)
        self.branch = branch
        self.shortcut = shortcut
        self.relu_after = relu_after

    def children(self):
        return [self.branch] + ([self.shortcut] if self.shortcut is not None else [])

    def forward(self, x, mode):
        f, cf = self.branch.forward(x, mode)
        if self.shortcut is not None:
            s, cs = self.shortcut.forward(x, mode)
        else:
            s, cs = x, None
        pre = f + s
        y = ops.relu(pre) if self.relu_after else pre
        return y, (cf, cs, pre if self.relu_after else None)

    def backward(self, dy, cache):
        cf, cs, pre = cache
        dpre = ops.relu_grad(pre, dy) if self.relu_after else dy
        dx, grads = self.branch.backward(dpre, cf)
        if self.shortcut is not None:
            dxs, gs = self.shortcut.backward(dpre, cs)
            grads.update(gs)
            dx = dx + dxs
        else:
            dx = dx + dpre
        return dx, grads


class BranchOnly(Layer):
    """Inverted residual without a skip (stride > 1 or channel change)."""

    def __init__(self, name: str, branch: Sequential):
        super().__init__(name)
        self.branch = branch

    def children(self):
        return [self.branch]

    def forward(self, x, mode):
        return self.branch.forward(x, mode)

    def backward(self, dy, cache):
        return self.branch.backward(dy, cache)


class DenseBlock(Layer):
    """Each inner layer consumes the concatenation of the block input and all
    previous layer outputs and contributes `growth` new channels; the block
    output is the concatenation of everything."""

    def __init__(self, name: str, layers: list[Sequential], in_channels: int, growth: int):
        super().__init__(name)
        self.layers = layers
        self.in_channels = in_channels
        self.growth = growth

    def children(self):
        return self.layers

    def forward(self, x, mode):
        feats = [x]
        caches = []
        for layer in self.layers:
            inp = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
            y, c = layer.forward(inp, mode)
            feats.append(y)
            caches.append(c)
        return np.concatenate(feats, axis=1), caches

    def backward(self, dy, caches):
        widths = [self.in_channels] + [self.growth] * len(self.layers)
        bounds = np.cumsum([0] + widths)
        dfeats = [np.ascontiguousarray(dy[:, bounds[i]:bounds[i + 1]])
                  for i in range(len(widths))]
        grads: dict[str, Tensor] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dinp, g = self.layers[i].backward(dfeats[i + 1], caches[i])
            grads.update(g)
            for j in range(i + 1):
                dfeats[j] += dinp[:, bounds[j]:bounds[j + 1]]
        return dfeats[0], grads


# ---------------------------------------------------------------------------
# Block specs: static shape/parameter arithmetic + builders

@dataclass(frozen=True)
class VggSpec:
    convs: int = 2
    channels: int = 16
    kind: str = "vgg"

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        if h < 2 or w < 2:
            raise ShapeError(f"vgg block needs spatial dims >= 2, got {h}x{w}")
        ph, pw = _pool_out(h, w, 2, 2)
        return (self.channels, ph, pw)

    def param_count(self, cin: int) -> int:
        total, prev = 0, cin
        for _ in range(self.convs):
            total += 9 * prev * self.channels + self.channels
            prev = self.channels
        return total


@dataclass(frozen=True)
class InceptionSpec:
    b1: int
    b3: int
    b5: int
    bpool: int
    reduce3: int
    reduce5: int
    kind: str = "inception"

    def __post_init__(self):
        if min(self.b1, self.b3, self.b5, self.bpool, self.reduce3, self.reduce5) < 1:
            raise ValueError("all inception branch channel counts must be >= 1")

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        return (self.b1 + self.b3 + self.b5 + self.bpool, h, w)

    def param_count(self, cin: int) -> int:
        p1 = cin * self.b1 + self.b1
        p3 = (cin * self.reduce3 + self.reduce3) + (9 * self.reduce3 * self.b3 + self.b3)
        p5 = (cin * self.reduce5 + self.reduce5) + (25 * self.reduce5 * self.b5 + self.b5)
        pp = cin * self.bpool + self.bpool
        return p1 + p3 + p5 + pp


@dataclass(frozen=True)
class ResidualSpec:
    channels: int
    stride: int = 1
    variant: str = "basic"  # basic | bottleneck
    kind: str = "residual"

    def _projects(self, cin: int) -> bool:
        return self.stride != 1 or cin != self.channels

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        oh, ow = _same_out(h, w, self.stride)
        return (self.channels, oh, ow)

    def param_count(self, cin: int) -> int:
        o = self.channels
        if self.variant == "basic":
            total = 9 * cin * o + 2 * o + 9 * o * o + 2 * o
        elif self.variant == "bottleneck":
            mid = max(o // 4, 1)
            total = (cin * mid + 2 * mid) + (9 * mid * mid + 2 * mid) + (mid * o + 2 * o)
        else:
            raise ValueError(f"unknown residual variant {self.variant!r}")
        if self._projects(cin):
            total += cin * o + 2 * o
        return total


@dataclass(frozen=True)
class SeparableSpec:
    channels: int
    stride: int = 1
    kind: str = "separable"

    def _projects(self, cin: int) -> bool:
        return self.stride != 1 or cin != self.channels

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        oh, ow = _same_out(h, w, self.stride)
        return (self.channels, oh, ow)

    def param_count(self, cin: int) -> int:
        total = 9 * cin + cin * self.channels + 2 * self.channels
        if self._projects(cin):
            total += cin * self.channels + 2 * self.channels
        return total


@dataclass(frozen=True)
class DenseSpec:
    layers: int
    growth: int
    kind: str = "dense"

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        return (c + self.layers * self.growth, h, w)

    def param_count(self, cin: int) -> int:
        g = self.growth
        total = 0
        for i in range(self.layers):
            ci = cin + i * g
            total += 2 * ci + ci * 4 * g + 2 * 4 * g + 9 * 4 * g * g
        return total


@dataclass(frozen=True)
class TransitionSpec:
    compression: float = 0.5
    kind: str = "transition"

    def __post_init__(self):
        if not (0.0 < self.compression <= 1.0):
            raise ValueError(f"compression must be in (0, 1], got {self.compression}")

    def out_channels(self, cin: int) -> int:
        cout = int(self.compression * cin)
        if cout < 1:
            raise ValueError(f"compression {self.compression} collapses {cin} channels to zero")
        return cout

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        ph, pw = _pool_out(h, w, 2, 2)
        return (self.out_channels(c), ph, pw)

    def param_count(self, cin: int) -> int:
        return 2 * cin + cin * self.out_channels(cin)


@dataclass(frozen=True)
class InvertedResidualSpec:
    channels: int
    stride: int = 1
    expansion: int = 6
    kind: str = "inverted_residual"

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")

    def skips(self, cin: int) -> bool:
        return self.stride == 1 and cin == self.channels

    def out_shape(self, s: Shape) -> Shape:
        c, h, w = s
        oh, ow = _same_out(h, w, self.stride)
        return (self.channels, oh, ow)

    def param_count(self, cin: int) -> int:
        e = self.expansion * cin
        return (cin * e + 2 * e) + (9 * e + 2 * e) + (e * self.channels + 2 * self.channels)


BlockSpec = (VggSpec | InceptionSpec | ResidualSpec | SeparableSpec
             | DenseSpec | TransitionSpec | InvertedResidualSpec)

_SPEC_KINDS = {
    "vgg": VggSpec,
    "inception": InceptionSpec,
    "residual": ResidualSpec,
    "separable": SeparableSpec,
    "dense": DenseSpec,
    "transition": TransitionSpec,
    "inverted_residual": InvertedResidualSpec,
}


def spec_to_dict(spec: BlockSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> BlockSpec:
    kind = d.get("kind")
    if kind not in _SPEC_KINDS:
        raise ValueError(f"unknown block kind {kind!r}")
    fields = {k: v for k, v in d.items() if k != "kind"}
    return _SPEC_KINDS[kind](**fields)


# ---------------------------------------------------------------------------
# Builders

def _conv_bn_relu(name: str, cin: int, cout: int, k: int, stride: int,
                  rng: np.random.Generator) -> list[Layer]:
    return [Conv(f"{name}.conv", cin, cout, k, stride, "same", False, rng),
            BatchNorm(f"{name}.bn", cout),
            ReLU(f"{name}.relu")]


def build_block(spec: BlockSpec, in_channels: int, rng: np.random.Generator,
                name: str) -> Layer:
    """Allocate a live layer tree for `spec`, drawing weights from `rng`."""
    c = in_channels
    if isinstance(spec, VggSpec):
        layers: list[Layer] = []
        prev = c
        for i in range(spec.convs):
            layers.append(Conv(f"{name}.conv{i}", prev, spec.channels, 3, 1, "same", True, rng))
            layers.append(ReLU(f"{name}.relu{i}"))
            prev = spec.channels
        layers.append(MaxPool(f"{name}.pool", 2, 2))
        return VggBlock(name, layers)

    if isinstance(spec, InceptionSpec):
        br1 = Sequential(f"{name}.b1", [
            Conv(f"{name}.b1.conv", c, spec.b1, 1, 1, "valid", True, rng),
            ReLU(f"{name}.b1.relu")])
        br3 = Sequential(f"{name}.b3", [
            Conv(f"{name}.b3.reduce", c, spec.reduce3, 1, 1, "valid", True, rng),
            ReLU(f"{name}.b3.relu0"),
            Conv(f"{name}.b3.conv", spec.reduce3, spec.b3, 3, 1, "same", True, rng),
            ReLU(f"{name}.b3.relu1")])
        br5 = Sequential(f"{name}.b5", [
            Conv(f"{name}.b5.reduce", c, spec.reduce5, 1, 1, "valid", True, rng),
            ReLU(f"{name}.b5.relu0"),
            Conv(f"{name}.b5.conv", spec.reduce5, spec.b5, 5, 1, "same", True, rng),
            ReLU(f"{name}.b5.relu1")])
        brp = Sequential(f"{name}.bpool", [
            MaxPool(f"{name}.bpool.pool", 3, 1, padding=1),
            Conv(f"{name}.bpool.conv", c, spec.bpool, 1, 1, "valid", True, rng),
            ReLU(f"{name}.bpool.relu")])
        return InceptionModule(name, [br1, br3, br5, brp],
                               [spec.b1, spec.b3, spec.b5, spec.bpool])

    if isinstance(spec, ResidualSpec):
        o = spec.channels
        if spec.variant == "basic":
            branch = Sequential(f"{name}.f", [
                Conv(f"{name}.f.conv1", c, o, 3, spec.stride, "same", False, rng),
                BatchNorm(f"{name}.f.bn1", o),
                ReLU(f"{name}.f.relu1"),
                Conv(f"{name}.f.conv2", o, o, 3, 1, "same", False, rng),
                BatchNorm(f"{name}.f.bn2", o)])
        else:
            mid = max(o // 4, 1)
            branch = Sequential(f"{name}.f", [
                Conv(f"{name}.f.conv1", c, mid, 1, 1, "valid", False, rng),
                BatchNorm(f"{name}.f.bn1", mid),
                ReLU(f"{name}.f.relu1"),
                Conv(f"{name}.f.conv2", mid, mid, 3, spec.stride, "same", False, rng),
                BatchNorm(f"{name}.f.bn2", mid),
                ReLU(f"{name}.f.relu2"),
                Conv(f"{name}.f.conv3", mid, o, 1, 1, "valid", False, rng),
                BatchNorm(f"{name}.f.bn3", o)])
        shortcut = None
        if spec._projects(c):
            shortcut = Sequential(f"{name}.sc", [
                Conv(f"{name}.sc.conv", c, o, 1, spec.stride, "same", False, rng),
                BatchNorm(f"{name}.sc.bn", o)])
        return ResidualAdd(name, branch, shortcut, relu_after=True)

    if isinstance(spec, SeparableSpec):
        o = spec.channels
        branch = Sequential(f"{name}.f", [
            DepthwiseConv(f"{name}.f.dw", c, 3, spec.stride, "same", False, rng),
            Conv(f"{name}.f.pw", c, o, 1, 1, "valid", False, rng),
            BatchNorm(f"{name}.f.bn", o)])
        shortcut = None
        if spec._projects(c):
            shortcut = Sequential(f"{name}.sc", [
                Conv(f"{name}.sc.conv", c, o, 1, spec.stride, "same", False, rng),
                BatchNorm(f"{name}.sc.bn", o)])
        return ResidualAdd(name, branch, shortcut, relu_after=True)

    if isinstance(spec, DenseSpec):
        g = spec.growth
        inner = []
        for i in range(spec.layers):
            ci = c + i * g
            inner.append(Sequential(f"{name}.l{i}", [
                BatchNorm(f"{name}.l{i}.bn1", ci),
                ReLU(f"{name}.l{i}.relu1"),
                Conv(f"{name}.l{i}.conv1", ci, 4 * g, 1, 1, "valid", False, rng),
                BatchNorm(f"{name}.l{i}.bn2", 4 * g),
                ReLU(f"{name}.l{i}.relu2"),
                Conv(f"{name}.l{i}.conv2", 4 * g, g, 3, 1, "same", False, rng)]))
        return DenseBlock(name, inner, c, g)

    if isinstance(spec, TransitionSpec):
        cout = spec.out_channels(c)
        return Sequential(name, [
            BatchNorm(f"{name}.bn", c),
            ReLU(f"{name}.relu"),
            Conv(f"{name}.conv", c, cout, 1, 1, "valid", False, rng),
            AvgPool(f"{name}.pool", 2, 2)])

    if isinstance(spec, InvertedResidualSpec):
        e = spec.expansion * c
        branch = Sequential(f"{name}.f", [
            Conv(f"{name}.f.expand", c, e, 1, 1, "valid", False, rng),
            BatchNorm(f"{name}.f.bn1", e),
            ReLU(f"{name}.f.relu1"),
            DepthwiseConv(f"{name}.f.dw", e, 3, spec.stride, "same", False, rng),
            BatchNorm(f"{name}.f.bn2", e),
            ReLU(f"{name}.f.relu2"),
            Conv(f"{name}.f.project", e, spec.channels, 1, 1, "valid", False, rng),
            BatchNorm(f"{name}.f.bn3", spec.channels)])
        if spec.skips(c):
            return ResidualAdd(name, branch, None, relu_after=False)
        return BranchOnly(name, branch)

    raise TypeError(f"unknown block spec {type(spec).__name__}")
