"""Block-structured CNN graphs and the three desk-scale presets.

A model is an ordered list of :class:`LayerSpec` entries. Each layer carries a
``block`` id; ids never decrease along the list and the classifier head holds
the largest id. "Freeze up to the last convolutional block" then means: mark
every layer whose block id is below the id of the last block containing a
convolution as non-trainable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .ops import ShapeError
from .tensor import Tensor

CONV = "conv3x3"
MAXPOOL = "maxpool"
RELU = "relu"
GAP = "global-avg-pool"
FLATTEN = "flatten"
DENSE = "dense"
RESIDUAL_ADD = "residual-add"
KINDS = (CONV, MAXPOOL, RELU, GAP, FLATTEN, DENSE, RESIDUAL_ADD)

PRESETS = ("mini-alex", "mini-vgg", "mini-res")
DEFAULT_WIDTHS = {
    "mini-alex": (8, 16, 32, 32, 32),
    "mini-vgg": (8, 16, 32, 64),
    "mini-res": (16,),
}
DEFAULT_UNITS = {"mini-alex": (64, 64), "mini-vgg": (64,), "mini-res": ()}


class ModelError(ValueError):
    """Invalid preset, architecture or block selection."""


@dataclass
class LayerSpec:
    kind: str
    block: int
    trainable: bool = True
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    stride: int = 1
    padding: int = 1
    # residual-add only: index of the layer whose output is the shortcut (-1 = model input)
    source: Optional[int] = None

    def has_params(self) -> bool:
        return self.kind in (CONV, DENSE)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == CONV:
            return {"weight": (self.out_channels, self.in_channels, 3, 3), "bias": (self.out_channels,)}
        if self.kind == DENSE:
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        return {}

    def fans(self) -> tuple[int, int]:
        if self.kind == CONV:
            return self.in_channels * 9, self.out_channels * 9
        return self.in_features, self.out_features


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def he_uniform(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(layer: LayerSpec, rng: np.random.Generator, head: bool = True) -> dict[str, Tensor]:
    """Glorot-uniform for the classifier head, He-uniform for hidden layers feeding a ReLU."""
    shapes = layer.param_shapes()
    if not shapes:
        return {}
    fan_in, fan_out = layer.fans()
    weight = glorot_uniform(shapes["weight"], fan_in, fan_out, rng) if head else he_uniform(shapes["weight"], fan_in, rng)
    return {
        "weight": Tensor(weight, requires_grad=layer.trainable),
        "bias": Tensor(np.zeros(shapes["bias"], dtype=np.float32), requires_grad=layer.trainable),
    }


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    params: dict[int, dict[str, Tensor]]
    input_shape: tuple[int, int, int]
    num_classes: int
    preset: str = "custom"
    class_names: Optional[tuple[str, ...]] = None
    widths: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    # -- structure -------------------------------------------------------
    def validate(self) -> None:
        if not self.layers:
            raise ModelError("model has no layers")
        blocks = [layer.block for layer in self.layers]
        if any(b < 0 for b in blocks) or any(b2 < b1 for b1, b2 in zip(blocks, blocks[1:])):
            raise ModelError(f"block ids must be non-negative and non-decreasing, got {blocks}")
        last = self.layers[-1]
        if last.kind != DENSE or last.out_features != self.num_classes:
            raise ModelError("the final layer must be a dense layer producing num_classes outputs")
        if last.block != max(blocks):
            raise ModelError("the head must carry the maximal block id")
        self.output_shapes()
        for i, layer in enumerate(self.layers):
            expected = layer.param_shapes()
            got = {k: t.shape for k, t in self.params.get(i, {}).items()}
            if got != expected:
                raise ShapeError(f"layer {i} ({layer.kind}) parameters {got} do not match expected {expected}")

    def output_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        cur: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == CONV:
                if len(cur) != 3 or cur[0] != layer.in_channels:
                    raise ShapeError(f"layer {i}: conv expects {layer.in_channels} channels, got shape {cur}")
                h = ops.conv_output_extent(cur[1], layer.stride, layer.padding)
                w = ops.conv_output_extent(cur[2], layer.stride, layer.padding)
                cur = (layer.out_channels, h, w)
            elif layer.kind == MAXPOOL:
                if len(cur) != 3 or cur[1] % 2 or cur[2] % 2:
                    raise ShapeError(f"layer {i}: maxpool needs an even 3-D map, got {cur}")
                cur = (cur[0], cur[1] // 2, cur[2] // 2)
            elif layer.kind == GAP:
                if len(cur) != 3:
                    raise ShapeError(f"layer {i}: global-avg-pool needs a 3-D map, got {cur}")
                cur = (cur[0],)
            elif layer.kind == FLATTEN:
                cur = (int(np.prod(cur)),)
            elif layer.kind == DENSE:
                if cur != (layer.in_features,):
                    raise ShapeError(f"layer {i}: dense expects ({layer.in_features},), got {cur}")
                cur = (layer.out_features,)
            elif layer.kind == RESIDUAL_ADD:
                src = layer.source
                if src is None or not -1 <= src < i:
                    raise ShapeError(f"layer {i}: residual-add needs an earlier source layer")
                src_shape = self.input_shape if src == -1 else shapes[src]
                if src_shape != cur:
                    raise ShapeError(f"layer {i}: shortcut shape {src_shape} differs from {cur}")
            elif layer.kind != RELU:
                raise ModelError(f"unknown layer kind {layer.kind!r}")
            shapes.append(cur)
        return shapes

    def block_ids(self) -> list[int]:
        return sorted({layer.block for layer in self.layers})

    def last_conv_block(self) -> int:
        convs = [layer.block for layer in self.layers if layer.kind == CONV]
        if not convs:
            raise ModelError("model has no convolution layer")
        return max(convs)

    def last_conv_index(self) -> int:
        idx = [i for i, layer in enumerate(self.layers) if layer.kind == CONV]
        if not idx:
            raise ModelError("model has no convolution layer")
        return idx[-1]

    def cam_layer_index(self) -> int:
        """Index whose output holds the final convolutional feature maps (after activation)."""
        j = self.last_conv_index()
        while j + 1 < len(self.layers) and self.layers[j + 1].kind in (RELU, RESIDUAL_ADD):
            j += 1
        return j

    def frozen_prefix_end(self) -> int:
        """Number of leading layers that are all frozen."""
        for i, layer in enumerate(self.layers):
            if layer.trainable:
                return i
        return len(self.layers)

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias"):
                if name in self.params.get(i, {}):
                    out.append((f"layer{i}.{name}", self.params[i][name], layer.trainable))
        return out

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(t.size for _, t, tr in self.named_parameters() if tr or not trainable_only)

    def zero_grad(self) -> None:
        for _, t, _ in self.named_parameters():
            t.grad = None

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            layers=[replace(layer) for layer in self.layers],
            params={i: {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in p.items()}
                    for i, p in self.params.items()},
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            preset=self.preset,
            class_names=self.class_names,
            widths=self.widths,
        )

    # -- evaluation ------------------------------------------------------
    def forward(self, x, start: int = 0, stop: Optional[int] = None,
                acts: Optional[dict[int, Tensor]] = None) -> Tensor:
        """Run layers ``start .. stop-1``; ``x`` is the output of layer ``start-1``.

        When ``acts`` is given it receives every intermediate output keyed by
        layer index (``start-1`` holds ``x``); residual shortcuts that point
        before ``start`` must already be present in it.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        stop = len(self.layers) if stop is None else stop
        if start == 0 and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        acts = {} if acts is None else acts
        acts[start - 1] = x
        h = x
        for i in range(start, stop):
            layer = self.layers[i]
            p = self.params.get(i)
            if layer.kind == CONV:
                h = ops.conv2d(h, p["weight"], p["bias"], layer.stride, layer.padding)
            elif layer.kind == DENSE:
                h = ops.dense(h, p["weight"], p["bias"])
            elif layer.kind == RELU:
                h = ops.relu(h)
            elif layer.kind == MAXPOOL:
                h = ops.maxpool2d(h)
            elif layer.kind == GAP:
                h = ops.global_avg_pool(h)
            elif layer.kind == FLATTEN:
                h = ops.flatten(h)
            elif layer.kind == RESIDUAL_ADD:
                if layer.source not in acts:
                    raise ShapeError(f"layer {i}: shortcut source {layer.source} not available")
                h = ops.add(h, acts[layer.source])
            acts[i] = h
        return h

    def parameter_digests(self) -> dict[str, str]:
        return {name: hashlib.sha256(t.data.tobytes()).hexdigest() for name, t, _ in self.named_parameters()}


def forward(model: ModelGraph, batch) -> Tensor:
    return model.forward(batch)


def _check_input(input_shape) -> tuple[int, int, int]:
    if len(input_shape) == 2:
        input_shape = (1, *input_shape)
    c, h, w = (int(v) for v in input_shape)
    for extent in (h, w):
        if extent < 32 or extent & (extent - 1):
            raise ModelError(f"input spatial extent must be a power of two >= 32, got {h}x{w}")
    return c, h, w


def _conv_stage(layers, block, cin, cout):
    layers.append(LayerSpec(CONV, block, in_channels=cin, out_channels=cout))
    layers.append(LayerSpec(RELU, block))


def _head(layers, block, n_in, units, num_classes):
    for u in units:
        layers.append(LayerSpec(DENSE, block, in_features=n_in, out_features=u))
        layers.append(LayerSpec(RELU, block))
        n_in = u
    layers.append(LayerSpec(DENSE, block, in_features=n_in, out_features=num_classes))


def build_preset(name: str, input_shape=(1, 64, 64), num_classes: int = 2, widths: Optional[Sequence[int]] = None,
                 units: Optional[Sequence[int]] = None, seed: int = 0) -> ModelGraph:
    """Construct ``mini-alex``, ``mini-vgg`` or ``mini-res`` with He-uniform hidden weights and a Glorot-uniform head."""
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    c, h, w = _check_input(input_shape)
    widths = tuple(widths) if widths else DEFAULT_WIDTHS[name]
    units = tuple(DEFAULT_UNITS[name] if units is None else units)
    layers: list[LayerSpec] = []

    if name == "mini-alex":
        if len(widths) != 5:
            raise ModelError("mini-alex takes 5 conv widths")
        _conv_stage(layers, 0, c, widths[0])
        layers.append(LayerSpec(MAXPOOL, 0))
        _conv_stage(layers, 1, widths[0], widths[1])
        layers.append(LayerSpec(MAXPOOL, 1))
        for cin, cout in zip(widths[1:4], widths[2:5]):
            _conv_stage(layers, 2, cin, cout)
        layers.append(LayerSpec(MAXPOOL, 2))
        layers.append(LayerSpec(FLATTEN, 3))
        _head(layers, 3, widths[4] * (h // 8) * (w // 8), units, num_classes)
    elif name == "mini-vgg":
        if len(widths) != 4:
            raise ModelError("mini-vgg takes 4 block widths")
        cin = c
        for b, width in enumerate(widths):
            _conv_stage(layers, b, cin, width)
            _conv_stage(layers, b, width, width)
            layers.append(LayerSpec(MAXPOOL, b))
            cin = width
        layers.append(LayerSpec(FLATTEN, 4))
        _head(layers, 4, widths[-1] * (h // 16) * (w // 16), units, num_classes)
    else:
        if len(widths) != 1:
            raise ModelError("mini-res takes a single width (identity shortcuts keep channels fixed)")
        width = widths[0]
        _conv_stage(layers, 0, c, width)
        layers.append(LayerSpec(MAXPOOL, 0))
        for b in range(1, 5):
            shortcut = len(layers) - 1
            _conv_stage(layers, b, width, width)
            layers.append(LayerSpec(CONV, b, in_channels=width, out_channels=width))
            layers.append(LayerSpec(RESIDUAL_ADD, b, source=shortcut))
            layers.append(LayerSpec(RELU, b))
            if b < 4:
                layers.append(LayerSpec(MAXPOOL, b))
        layers.append(LayerSpec(GAP, 5))
        _head(layers, 5, width, units, num_classes)

    rng = np.random.default_rng(seed)
    last = len(layers) - 1
    params = {i: init_params(layer, rng, head=i == last) for i, layer in enumerate(layers) if layer.has_params()}
    return ModelGraph(layers, params, (c, h, w), num_classes, preset=name, widths=widths)


def replace_head(model: ModelGraph, num_classes: int, seed: int = 0,
                 class_names: Optional[Sequence[str]] = None) -> ModelGraph:
    """Swap the final dense layer for a freshly initialised one with ``num_classes`` outputs."""
    if model.layers[-1].kind != DENSE:
        raise ModelError("model has no dense head to replace")
    new = model.copy()
    idx = len(new.layers) - 1
    head = replace(new.layers[idx], out_features=int(num_classes))
    new.layers[idx] = head
    new.params[idx] = init_params(head, np.random.default_rng(seed))
    new.num_classes = int(num_classes)
    new.class_names = tuple(class_names) if class_names is not None else None
    new.validate()
    return new


def set_trainable_from_block(model: ModelGraph, first_trainable_block: int) -> ModelGraph:
    """Freeze every layer with block id below the threshold; the rest train."""
    ids = model.block_ids()
    if first_trainable_block not in ids and first_trainable_block != ids[-1] + 1:
        raise ModelError(f"unknown block id {first_trainable_block}; model has {ids}")
    new = model.copy()
    for i, layer in enumerate(new.layers):
        layer.trainable = layer.block >= first_trainable_block
        for t in new.params.get(i, {}).values():
            t.requires_grad = layer.trainable
    return new

