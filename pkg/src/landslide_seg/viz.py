"""Grad-CAM heatmaps and overlay rendering."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

DEFAULT_LAYER = "encoder.mafe.aspp"


class LayerNotFoundError(KeyError):
    def __init__(self, name: str, valid: Sequence[str]):
        super().__init__(name)
        self.name = name
        self.valid = list(valid)

    def __str__(self) -> str:
        return f"layer {self.name!r} not found; valid layers: {', '.join(self.valid)}"


def list_layers(model: nn.Module) -> List[str]:
    return [name for name, _ in model.named_modules() if name]


@dataclass
class GradCAMResult:
    heatmap: np.ndarray  # (B, H, W) in [0, 1]
    degenerate: np.ndarray  # (B,) True where the weighted map had no positive spread
    layer: str


def grad_cam(model: nn.Module, inputs: Sequence[torch.Tensor], target_class: int = 1,
             layer: str = DEFAULT_LAYER) -> GradCAMResult:
    """Class activation map for ``layer`` with respect to the summed class score.

    Channel weights are spatial means of the score gradient; the map is
    ``ReLU(sum_c w_c A_c)``, resized to the input grid and min-max scaled
    per image. A map with no spread is returned as zeros and flagged.
    """
    modules = dict(model.named_modules())
    if layer not in modules or not layer:
        raise LayerNotFoundError(layer, list_layers(model))
    captured = {}

    def hook(_module, _inp, output):
        captured["act"] = output
        return output.clone()

    was_training = model.training
    model.eval()
    handle = modules[layer].register_forward_hook(hook)
    try:
        with torch.enable_grad():
            scores = model(*inputs)
            act = captured["act"]
            target = scores[:, target_class].sum()
            grads, = torch.autograd.grad(target, act)
    finally:
        handle.remove()
        model.train(was_training)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    size = inputs[0].shape[-2:]
    if cam.shape[-2:] != size:
        cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
    cam = cam[:, 0].to(torch.float64).cpu().numpy()
    heat = np.zeros_like(cam)
    degenerate = np.zeros(len(cam), dtype=bool)
    for i, c in enumerate(cam):
        lo, hi = c.min(), c.max()
        if hi - lo <= 0:
            degenerate[i] = True
        else:
            heat[i] = (c - lo) / (hi - lo)
    return GradCAMResult(np.clip(heat, 0.0, 1.0), degenerate, layer)


def label_outline(label: np.ndarray) -> np.ndarray:
    mask = np.asarray(label).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3)), border_value=0)


def render_overlay(hrsi: np.ndarray, path=None, heatmap: Optional[np.ndarray] = None,
                   prediction: Optional[np.ndarray] = None, outline: Optional[np.ndarray] = None,
                   alpha: float = 0.6, cmap: str = "jet") -> np.ndarray:
    """Blend a heatmap (or binary prediction) over the optical image.

    Each pixel is tinted in proportion to its heat, so zero heat leaves the
    optical image untouched and full heat gives the full ``alpha`` tint.
    The label boundary, when given, is drawn in red on top.
    """
    rgb = np.asarray(hrsi, dtype=np.float64) / 255.0
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"hrsi must be H x W x 3, got {rgb.shape}")
    h, w = rgb.shape[:2]
    out = rgb
    for layer_map, colour in ((heatmap, None), (prediction, np.array([1.0, 0.85, 0.0]))):
        if layer_map is None:
            continue
        m = np.asarray(layer_map, dtype=np.float64)
        if m.shape != (h, w):
            raise ValueError(f"overlay size {m.shape} does not match image {(h, w)}")
        m = np.clip(m, 0.0, 1.0)
        tint = colormaps[cmap](m)[..., :3] if colour is None else np.broadcast_to(colour, rgb.shape)
        weight = (alpha * m)[..., None]
        out = out * (1.0 - weight) + tint * weight
    img = np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)
    if outline is not None:
        if np.shape(outline) != (h, w):
            raise ValueError(f"outline size {np.shape(outline)} does not match image {(h, w)}")
        img[label_outline(outline)] = (255, 0, 0)
    if path is not None:
        Image.fromarray(img).save(Path(path), format="PNG")
    return img
