"""Miniature model definitions, one per architecture family, plus build,
forward/predict, and parameter accounting.

Each registry model is a desk-scale variant that exercises its family's
block type: a few stages, widths capped at 64, well under 500K parameters at
32x32x3 input. The classifier head is zero-initialized so a fresh model
predicts the uniform distribution exactly; everything else is He-normal.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .blocks import (BatchNorm, BlockSpec, Conv, Flatten, GlobalAvgPool, Layer,
                     Linear, ReLU, Sequential, build_block, spec_from_dict,
                     spec_to_dict)
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class StemSpec:
    """Initial convolution: conv(k, stride, same) [+ BN] + ReLU."""
    channels: int
    kernel: int = 3
    stride: int = 1
    batchnorm: bool = True

    def out_shape(self, s):
        c, h, w = s
        return (self.channels, -(-h // self.stride), -(-w // self.stride))

    def param_count(self, cin: int) -> int:
        n = self.kernel * self.kernel * cin * self.channels
        return n + 2 * self.channels if self.batchnorm else n + self.channels


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stages: tuple[BlockSpec, ...]
    stem: Optional[StemSpec] = None
    input: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 24
    head: str = "gap"  # gap | flatten
    classes: Optional[tuple[str, ...]] = None  # class index -> label

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head not in ("gap", "flatten"):
            raise ValueError(f"head must be 'gap' or 'flatten', got {self.head!r}")
        if self.classes is not None and len(self.classes) != self.num_classes:
            raise ValueError(f"{len(self.classes)} class labels for {self.num_classes} classes")

    def class_labels(self) -> list[str]:
        from . import CLASSES
        return list(self.classes) if self.classes is not None else CLASSES[:self.num_classes]

    def with_classes(self, classes) -> "ModelSpec":
        import dataclasses
        return dataclasses.replace(self, classes=tuple(classes), num_classes=len(classes))

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """Shapes after the stem and after each stage; raises naming the
        stage index on a chain violation."""
        shapes = []
        s = self.input
        if self.stem is not None:
            s = self.stem.out_shape(s)
        shapes.append(s)
        for i, block in enumerate(self.stages):
            try:
                s = block.out_shape(s)
            except (ShapeError, ValueError) as e:
                raise ShapeError(f"stage {i} ({block.kind}): {e}") from e
            shapes.append(s)
        return shapes

    def feature_dim(self) -> int:
        c, h, w = self.shape_chain()[-1]
        return c if self.head == "gap" else c * h * w

    def param_count(self) -> int:
        total = 0
        cin = self.input[0]
        if self.stem is not None:
            total += self.stem.param_count(cin)
            cin = self.stem.channels
        for block, shape in zip(self.stages, self.shape_chain()[:-1]):
            total += block.param_count(shape[0])
        total += self.feature_dim() * self.num_classes + self.num_classes
        return total

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": list(self.input),
            "num_classes": self.num_classes,
            "stem": None if self.stem is None else {
                "channels": self.stem.channels, "kernel": self.stem.kernel,
                "stride": self.stem.stride, "batchnorm": self.stem.batchnorm},
            "stages": [spec_to_dict(s) for s in self.stages],
            "head": self.head,
            "classes": None if self.classes is None else list(self.classes),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        stem = None if d.get("stem") is None else StemSpec(**d["stem"])
        classes = d.get("classes")
        return ModelSpec(
            name=d["name"],
            stages=tuple(spec_from_dict(s) for s in d["stages"]),
            stem=stem,
            input=tuple(d["input"]),
            num_classes=d["num_classes"],
            head=d["head"],
            classes=None if classes is None else tuple(classes),
        )


class Model:
    """A built network: spec plus named parameter tensors and BN states."""

    def __init__(self, spec: ModelSpec, net: Sequential):
        self.spec = spec
        self.net = net

    def named_parameters(self):
        return self.net.named_parameters()

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_bn_stats(self):
        """Running statistics, named alongside the parameters."""
        for layer in self.net.iter_layers():
            if isinstance(layer, BatchNorm):
                yield layer._p("running_mean"), layer.running_mean
                yield layer._p("running_var"), layer.running_var

    def set_tensor(self, name: str, value: Tensor) -> None:
        for layer in self.net.iter_layers():
            for key in layer._params:
                if layer._p(key) == name:
                    layer._params[key] = value
                    return
            if isinstance(layer, BatchNorm):
                if layer._p("running_mean") == name:
                    layer.running_mean = value
                    return
                if layer._p("running_var") == name:
                    layer.running_var = value
                    return
        raise KeyError(f"no tensor named {name!r}")

    def state_snapshot(self) -> dict[str, Tensor]:
        """Deep copy of all parameters and BN stats (for best-weight restore)."""
        snap = {n: v.copy() for n, v in self.named_parameters()}
        snap.update({n: v.copy() for n, v in self.named_bn_stats()})
        return snap

    def restore_snapshot(self, snap: dict[str, Tensor]) -> None:
        for name, value in snap.items():
            self.set_tensor(name, value.copy())

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input:
            raise ShapeError(f"model {self.spec.name} expects input N x "
                             f"{'x'.join(map(str, self.spec.input))}, got {x.shape}")
        y, _ = self.net.forward(x, mode)
        return y

    def forward_train(self, x: Tensor) -> tuple[Tensor, object]:
        y, cache = self.net.forward(x, "train")
        return y, cache

    def backward(self, dlogits: Tensor, cache: object) -> dict[str, Tensor]:
        _, grads = self.net.backward(dlogits, cache)
        return grads

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Deterministically initialize a model: same seed, bitwise-same weights."""
    shapes = spec.shape_chain()  # validates the chain up front
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    cin = spec.input[0]
    if spec.stem is not None:
        st = spec.stem
        stem_layers: list[Layer] = [
            Conv("stem.conv", cin, st.channels, st.kernel, st.stride, "same",
                 not st.batchnorm, rng)]
        if st.batchnorm:
            stem_layers.append(BatchNorm("stem.bn", st.channels))
        stem_layers.append(ReLU("stem.relu"))
        layers.append(Sequential("stem", stem_layers))
        cin = st.channels
    for i, block in enumerate(spec.stages):
        layers.append(build_block(block, shapes[i][0], rng, f"stages.{i}"))
    if spec.head == "gap":
        layers.append(GlobalAvgPool("head.pool"))
    else:
        layers.append(Flatten("head.flatten"))
    layers.append(Linear("head.fc", spec.feature_dim(), spec.num_classes, rng, init="zero"))
    return Model(spec, Sequential("", layers))


def forward(model: Model, batch: Tensor, mode: str = "infer") -> Tensor:
    return model.forward(batch, mode)


def predict(model: Model, image: Tensor) -> tuple[int, np.ndarray]:
    """Classify one image (C,H,W or 1,C,H,W): (argmax class, probability vector)."""
    if image.ndim == 3:
        image = image[None]
    logits = model.forward(image, "infer")
    probs = ops.softmax(logits)[0]
    return int(np.argmax(probs)), probs


def param_count(model: Model) -> int:
    """Learnable scalars: conv/linear weights and biases, BN gamma/beta.
    Running stats are not learnable and are excluded."""
    return model.net.param_count()


# ---------------------------------------------------------------------------
# Registry

from .blocks import (DenseSpec, InceptionSpec, InvertedResidualSpec,
                     ResidualSpec, SeparableSpec, TransitionSpec, VggSpec)


def registry(input_size: int = 32, num_classes: int = 24) -> list[ModelSpec]:
    """The six miniature family variants, ready to build and train.

    Stems downsample early so the desk-scale compute stays small; VGG and
    Inception (the two families without batchnorm in their blocks) use the
    flatten head, the rest pool globally.
    """
    inp = (3, input_size, input_size)
    return [
        ModelSpec(
            name="mini-vgg", input=inp, num_classes=num_classes, head="flatten",
            stages=(VggSpec(convs=1, channels=16), VggSpec(convs=1, channels=32),
                    VggSpec(convs=1, channels=64))),
        ModelSpec(
            name="mini-inception", input=inp, num_classes=num_classes, head="flatten",
            stem=StemSpec(channels=16, stride=2, batchnorm=False),
            stages=(InceptionSpec(b1=8, b3=12, b5=4, bpool=4, reduce3=6, reduce5=2),
                    InceptionSpec(b1=12, b3=16, b5=6, bpool=6, reduce3=8, reduce5=3),
                    InceptionSpec(b1=16, b3=24, b5=8, bpool=8, reduce3=12, reduce5=4))),
        ModelSpec(
            name="mini-resnet", input=inp, num_classes=num_classes, head="gap",
            stem=StemSpec(channels=32, stride=2),
            stages=(ResidualSpec(channels=32, stride=1, variant="basic"),
                    ResidualSpec(channels=64, stride=2, variant="basic"),
                    ResidualSpec(channels=64, stride=2, variant="bottleneck"))),
        ModelSpec(
            name="mini-xception", input=inp, num_classes=num_classes, head="gap",
            stem=StemSpec(channels=32, stride=2),
            stages=(SeparableSpec(channels=32, stride=1),
                    SeparableSpec(channels=64, stride=2),
                    SeparableSpec(channels=64, stride=1),
                    SeparableSpec(channels=64, stride=2))),
        ModelSpec(
            name="mini-densenet", input=inp, num_classes=num_classes, head="gap",
            stem=StemSpec(channels=16, stride=2, batchnorm=False),
            stages=(DenseSpec(layers=3, growth=8), TransitionSpec(0.5),
                    DenseSpec(layers=3, growth=8), TransitionSpec(0.5),
                    DenseSpec(layers=3, growth=8), TransitionSpec(1.0))),
        ModelSpec(
            name="mini-mobilenetv2", input=inp, num_classes=num_classes, head="gap",
            stem=StemSpec(channels=16, stride=2),
            stages=(InvertedResidualSpec(channels=16, stride=1, expansion=2),
                    InvertedResidualSpec(channels=32, stride=2, expansion=4),
                    InvertedResidualSpec(channels=64, stride=2, expansion=4))),
    ]


def get_spec(name: str, input_size: int = 32, num_classes: int = 24) -> ModelSpec:
    for spec in registry(input_size, num_classes):
        if spec.name == name:
            return spec
    known = ", ".join(s.name for s in registry())
    raise KeyError(f"unknown model {name!r}; registry has: {known}")
