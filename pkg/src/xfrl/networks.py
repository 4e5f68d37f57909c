"""The three convolutional stacks, their task heads, and transfer surgery.

Layer indices are 1-based: block ``l`` is conv ``l`` followed by ReLU and,
when the conv output has even height and width, a 2x2 max pool.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor_nn import (
    Conv2D,
    Dense,
    GlobalAvgPool,
    Layer,
    MaxPool2,
    Parameter,
    ReLU,
    Sequential,
    ShapeError,
    Upsample2,
    ZeroPad,
    conv_output_size,
    mse,
    softmax_xent,
)

# (channels, kernel) per conv layer
ARCHITECTURES: dict[str, tuple[tuple[int, int], ...]] = {
    "A_ConvNet": ((16, 5), (32, 5), (64, 5), (128, 6)),
    "H_Net": ((48, 5), (96, 5), (128, 3), (128, 3), (256, 3)),
    "AlexNet_Conv": ((96, 11), (256, 5), (384, 3), (384, 3), (256, 3)),
}

HEAD_SEED_SLOT = 1000
DECODER_SEED_SLOT = 2000


@dataclass(frozen=True)
class HeadSpec:
    task: Literal["classification", "reconstruction"] = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if self.task not in ("classification", "reconstruction"):
            raise ValueError(f"unknown head task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError("classification head needs at least 2 classes")


@dataclass(frozen=True)
class LayerSpec:
    kind: Literal["conv", "pool", "relu", "dense", "upsample"]
    channels: int
    kernel: int = 0


def scaled_channels(architecture: str, width: float = 1.0) -> list[tuple[int, int]]:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {sorted(ARCHITECTURES)}")
    if width <= 0:
        raise ValueError("width must be positive")
    return [(max(1, int(round(c * width))), k) for c, k in ARCHITECTURES[architecture]]


class ConvBlock(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, pool: bool, rng: np.random.Generator):
        self.conv = Conv2D(in_channels, out_channels, kernel, rng)
        self.pool = pool
        self.seq = Sequential([self.conv, ReLU()] + ([MaxPool2()] if pool else []))

    def params(self):
        return self.conv.params()

    @property
    def trainable(self) -> bool:
        return any(p.trainable for p in self.params())

    def specs(self) -> list[LayerSpec]:
        out = [LayerSpec("conv", self.conv.out_channels, self.conv.kernel), LayerSpec("relu", self.conv.out_channels)]
        if self.pool:
            out.append(LayerSpec("pool", self.conv.out_channels))
        return out

    def forward(self, x):
        return self.seq.forward(x)

    def backward(self, grad, need_input_grad=True):
        return self.seq.backward(grad, need_input_grad)


class ClassificationHead(Layer):
    """Global average pool followed by one dense layer."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator):
        self.dense = Dense(in_channels, num_classes, rng)
        self.seq = Sequential([GlobalAvgPool(), self.dense])

    def params(self):
        return self.dense.params()

    def forward(self, x):
        return self.seq.forward(x)

    def backward(self, grad, need_input_grad=True):
        return self.seq.backward(grad, need_input_grad)


class ReconstructionHead(Layer):
    """Mirror of the encoder: per block (reversed), optional 2x nearest
    upsample, then zero-pad by ``k-1`` and a valid ``k x k`` conv, which
    undoes the spatial shrink of the encoder conv."""

    def __init__(self, blocks: list[ConvBlock], input_channels: int, rng: np.random.Generator):
        layers: list[Layer] = []
        self.convs: list[Conv2D] = []
        for i in range(len(blocks) - 1, -1, -1):
            blk = blocks[i]
            out_ch = blocks[i - 1].conv.out_channels if i > 0 else input_channels
            if blk.pool:
                layers.append(Upsample2())
            k = blk.conv.kernel
            conv = Conv2D(blk.conv.out_channels, out_ch, k, rng)
            self.convs.append(conv)
            layers += [ZeroPad(k - 1), conv]
            if i > 0:
                layers.append(ReLU())
        self.seq = Sequential(layers)

    def params(self):
        return [p for c in self.convs for p in c.params()]

    def forward(self, x):
        return self.seq.forward(x)

    def backward(self, grad, need_input_grad=True):
        return self.seq.backward(grad, need_input_grad)


@dataclass
class NetworkModel:
    architecture: str
    input_shape: tuple[int, int, int]
    blocks: list[ConvBlock]
    head_spec: HeadSpec
    head: Layer
    width: float = 1.0
    seed: int = 0
    frozen_upto: int = 0
    _feature_shapes: list[tuple[int, int, int]] = field(default_factory=list, repr=False)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def conv_config(self) -> list[tuple[int, int]]:
        return [(b.conv.out_channels, b.conv.kernel) for b in self.blocks]

    def layer_specs(self) -> list[LayerSpec]:
        return [s for b in self.blocks for s in b.specs()]

    def block_params(self, l: int) -> list[Parameter]:
        return self.blocks[l - 1].params()

    def params(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.params()] + self.head.params()

    def named_params(self) -> list[tuple[int, str, Parameter]]:
        """``(layer index, role, parameter)``; the head is layer ``L+1``."""
        out = []
        for l, b in enumerate(self.blocks, start=1):
            out += [(l, "conv.w", b.conv.w), (l, "conv.b", b.conv.b)]
        head_index = self.depth + 1
        if isinstance(self.head, ClassificationHead):
            out += [(head_index, "dense.w", self.head.dense.w), (head_index, "dense.b", self.head.dense.b)]
        else:
            for j, c in enumerate(self.head.convs):
                out += [(head_index, f"dec{j}.w", c.w), (head_index, f"dec{j}.b", c.b)]
        return out

    def feature_shape(self, l: int) -> tuple[int, int, int]:
        return self._feature_shapes[l - 1]

    def feature_dim(self, l: int) -> int:
        return int(np.prod(self.feature_shape(l)))

    # -- trainability ------------------------------------------------------

    def freeze_upto(self, k: int) -> None:
        self._check_layer(k, allow_zero=True)
        for l, b in enumerate(self.blocks, start=1):
            for p in b.params():
                p.trainable = l > k
        self.frozen_upto = k

    def set_lr_multipliers(self, multipliers) -> None:
        """One multiplier per block plus a final one for the head."""
        multipliers = list(multipliers)
        if len(multipliers) != self.depth + 1:
            raise ValueError(f"expected {self.depth + 1} lr multipliers (blocks + head), got {len(multipliers)}")
        for b, m in zip(self.blocks, multipliers):
            for p in b.params():
                p.lr_multiplier = float(m)
        for p in self.head.params():
            p.lr_multiplier = float(multipliers[-1])

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def _check_layer(self, l: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= l <= self.depth:
            raise ValueError(f"layer index {l} out of range [{lo}, {self.depth}]")

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray, taps=(), upto: int | None = None):
        """Run the blocks (and the head unless ``upto`` is given).

        Returns ``(output, features)`` where ``features[l]`` is the block-l
        activation for every ``l`` in ``taps``.
        """
        last = self.depth if upto is None else upto
        self._check_layer(last)
        self._last_run = (last, upto is None)
        feats = {}
        h = x
        for l in range(1, last + 1):
            h = self.blocks[l - 1].forward(h)
            if l in taps:
                feats[l] = h
        out = self.head.forward(h) if upto is None else h
        return out, feats

    def backward(self, grad_out: np.ndarray | None, feature_grads: dict | None = None) -> None:
        """Accumulate parameter gradients for the most recent forward call.

        Backprop stops below the lowest trainable block.
        """
        feature_grads = feature_grads or {}
        last, with_head = self._last_run
        lowest = next((l for l in range(1, last + 1) if self.blocks[l - 1].trainable), None)
        g = None
        if with_head and grad_out is not None:
            g = self.head.backward(grad_out, need_input_grad=lowest is not None or bool(feature_grads))
        elif not with_head:
            g = grad_out
        if lowest is None:
            return
        for l in range(last, lowest - 1, -1):
            if l in feature_grads:
                fg = feature_grads[l]
                fg = fg.reshape((fg.shape[0],) + self.feature_shape(l))
                g = fg if g is None else g + fg
            if g is None:
                continue
            g = self.blocks[l - 1].backward(g, need_input_grad=l > lowest)

    def predict_logits(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        outs = [self.forward(images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)]
        return np.concatenate(outs)

    def loss(self, output: np.ndarray, images: np.ndarray, labels) -> tuple[float, np.ndarray]:
        if self.head_spec.task == "classification":
            return softmax_xent(output, labels)
        return mse(output, images)


def _block_rng(seed: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, slot])


def _make_head(head: HeadSpec, blocks: list[ConvBlock], input_channels: int, seed: int) -> Layer:
    if head.task == "classification":
        return ClassificationHead(blocks[-1].conv.out_channels, head.num_classes, _block_rng(seed, HEAD_SEED_SLOT))
    return ReconstructionHead(blocks, input_channels, _block_rng(seed, DECODER_SEED_SLOT))


def plan_shapes(architecture: str, input_shape, width: float = 1.0):
    """Per-block ``(channels, kernel, pool, output shape)``; raises on infeasible stacks."""
    c, h, w = input_shape
    plan = []
    for l, (ch, k) in enumerate(scaled_channels(architecture, width), start=1):
        if h < k or w < k:
            raise ShapeError(f"{architecture}: input too small at layer {l} ({h}x{w} < kernel {k})")
        h, w = conv_output_size(h, k), conv_output_size(w, k)
        pool = h % 2 == 0 and w % 2 == 0
        if pool:
            h, w = h // 2, w // 2
        plan.append((ch, k, pool, (ch, h, w)))
    return plan


def build(architecture: str, head: HeadSpec, input_shape=(1, 64, 64), seed: int = 0, width: float = 1.0) -> NetworkModel:
    """Fresh model; each block draws its weights from its own ``(seed, l)`` stream."""
    input_shape = tuple(int(v) for v in input_shape)
    plan = plan_shapes(architecture, input_shape, width)
    blocks = []
    in_ch = input_shape[0]
    for l, (ch, k, pool, _) in enumerate(plan, start=1):
        blocks.append(ConvBlock(in_ch, ch, k, pool, _block_rng(seed, l)))
        in_ch = ch
    model = NetworkModel(
        architecture=architecture,
        input_shape=input_shape,
        blocks=blocks,
        head_spec=head,
        head=_make_head(head, blocks, input_shape[0], seed),
        width=width,
        seed=seed,
        _feature_shapes=[p[3] for p in plan],
    )
    return model


def forward_features(model: NetworkModel, images: np.ndarray, upto: int) -> np.ndarray:
    """Flattened block-``upto`` activations, ``(N, feature_dim)``."""
    model._check_layer(upto)
    out, _ = model.forward(images, upto=upto)
    return out.reshape(len(images), -1)


def surgery_transfer(source: NetworkModel, k: int, freeze: bool, new_head: HeadSpec, seed: int) -> NetworkModel:
    """Copy blocks ``1..k`` from ``source`` into a model freshly built from
    ``seed``; optionally freeze the copied blocks. ``source`` is untouched."""
    source._check_layer(k, allow_zero=True)
    model = build(source.architecture, new_head, source.input_shape, seed, source.width)
    for l in range(1, k + 1):
        for dst, src in zip(model.block_params(l), source.block_params(l)):
            dst.value = src.value.copy()
    if freeze:
        model.freeze_upto(k)
    return model


def param_count(model_or_params) -> int:
    params = model_or_params.params() if hasattr(model_or_params, "params") else model_or_params
    return int(sum(p.size for p in params))


def conv_param_count(model: NetworkModel) -> int:
    return param_count([p for b in model.blocks for p in b.params()])
