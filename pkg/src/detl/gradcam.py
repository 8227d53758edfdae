"""Gradient-weighted class activation maps over the last convolutional feature maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelGraph, set_trainable_from_block
from .ops import ShapeError
from .pnm import write_ppm
from .tensor import Tensor, no_grad


@dataclass
class Heatmap:
    raw: np.ndarray        # [H, W] feature-map resolution, non-negative
    upsampled: np.ndarray  # [Himg, Wimg] in [0, 1]
    class_index: int
    score: float           # pre-softmax logit of class_index
    weights: np.ndarray    # one importance weight per feature map


def _frozen(model: ModelGraph) -> ModelGraph:
    # a fully frozen copy keeps backward from touching the caller's parameter gradients
    return set_trainable_from_block(model, model.block_ids()[-1] + 1)


def _as_batch(model: ModelGraph, image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"image shape {x.shape} does not match model input {model.input_shape}")
    return x


def feature_maps(model: ModelGraph, image) -> tuple[np.ndarray, dict]:
    """Activations of the last conv layer (after its activation) for one image, ``[K, H, W]``."""
    idx = model.cam_layer_index()
    acts: dict = {}
    with no_grad():
        feats = model.forward(_as_batch(model, image), stop=idx + 1, acts=acts)
    return feats.data[0], acts


def head_logits(model: ModelGraph, maps, acts: dict | None = None) -> Tensor:
    """Run the layers after the feature maps on ``maps`` (``[K,H,W]`` array or batched tensor)."""
    if not isinstance(maps, Tensor):
        maps = Tensor(np.asarray(maps)[None])
    return model.forward(maps, start=model.cam_layer_index() + 1, acts=dict(acts or {}))


def combine_feature_maps(maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum over the feature-map axis, before rectification."""
    return np.tensordot(np.asarray(weights, dtype=np.float64), np.asarray(maps, dtype=np.float64), axes=1)


def bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping."""
    def axis_weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        w = np.zeros((n_out, n_in))
        w[np.arange(n_out), lo] += 1 - frac
        w[np.arange(n_out), hi] += frac
        return w

    return axis_weights(m.shape[0], out_h) @ np.asarray(m, dtype=np.float64) @ axis_weights(m.shape[1], out_w).T


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        return (m - lo) / (hi - lo)
    return np.ones_like(m) if hi > 0 else np.zeros_like(m)


def gradcam(model: ModelGraph, image, class_index: int) -> Heatmap:
    """Weights are the spatial mean of d(logit_c)/d(feature map); the map is ReLU of their weighted sum."""
    if not 0 <= class_index < model.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {model.num_classes})")
    model = _frozen(model)
    maps, acts = feature_maps(model, image)
    leaf = Tensor(maps[None].copy(), requires_grad=True)
    logits = head_logits(model, leaf, acts)
    seed = np.zeros(logits.shape, dtype=logits.dtype)
    seed[0, class_index] = 1.0
    logits.backward(seed)
    grads = leaf.grad[0].astype(np.float64)
    weights = grads.mean(axis=(1, 2))
    raw = np.maximum(combine_feature_maps(maps, weights), 0.0)
    _, h, w = model.input_shape
    up = normalize_map(np.maximum(bilinear_resize(raw, h, w), 0.0))
    return Heatmap(raw, up, class_index, float(logits.data[0, class_index]), weights)


def predicted_class(model: ModelGraph, image) -> int:
    with no_grad():
        return int(np.argmax(model.forward(_as_batch(model, image)).data[0]))


def blue_red(v: np.ndarray) -> np.ndarray:
    """Map [0, 1] to RGB in [0, 1]: 0 is pure blue, 1 pure red, green peaks midway."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.stack([v, 1.0 - np.abs(2.0 * v - 1.0), 1.0 - v], axis=-1)


def overlay(heatmap: Heatmap, base_image, alpha: float = 0.5) -> np.ndarray:
    base = np.asarray(base_image, dtype=np.float64)
    base = base.reshape(base.shape[-2:]) if base.ndim > 2 else base
    if base.shape != heatmap.upsampled.shape:
        raise ShapeError(f"base image {base.shape} does not match heatmap {heatmap.upsampled.shape}")
    rgb = alpha * blue_red(heatmap.upsampled) + (1.0 - alpha) * np.clip(base, 0.0, 1.0)[..., None]
    return np.round(rgb * 255.0).astype(np.uint8)


def render_heatmap(heatmap: Heatmap, base_image, path, alpha: float = 0.5) -> Path:
    """Blend the colour-mapped heatmap onto the grayscale image and write a binary PPM."""
    path = Path(path)
    pixels = overlay(heatmap, base_image, alpha)
    if not path.parent.is_dir():
        raise OSError(f"cannot write heatmap: directory {path.parent} does not exist")
    write_ppm(path, pixels)
    return path


def heatmap_filename(sample_id: str, class_index: int) -> str:
    return f"{sample_id}_class{class_index}.ppm"

