"""Tiled multi-scale inference: plan overlapping tiles, stitch, binarize.

An image is rescaled to each requested scale, padded by reflection to tile
and downsample boundaries, processed tile by tile, and the sigmoid outputs
are averaged in the overlaps. Per-scale maps are resized back to the input
resolution and averaged across scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

from .nets import model_fingerprint


class Binarization(str, Enum):
    FIXED_05 = "FIXED_05"
    OTSU = "OTSU"


@dataclass
class InferenceConfig:
    patch: int = 512
    overlap_fraction: float = 0.5
    scales: list[float] = field(default_factory=lambda: [2.0, 3.0, 4.0])
    binarization: Binarization = Binarization.FIXED_05

    def validate(self) -> None:
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.patch <= 0 or not self.scales or min(self.scales) <= 0:
            raise ValueError("patch and scales must be positive")

    @property
    def stride(self) -> int:
        return max(1, round(self.patch * (1.0 - self.overlap_fraction)))


@dataclass
class TileGrid:
    image_size: tuple[int, int]
    patch: int
    stride: int
    rows: list[int]
    cols: list[int]

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]


@dataclass
class ProbabilityMap:
    values: np.ndarray  # H x W float32 in [0, 1], original resolution
    provenance: dict = field(default_factory=dict)


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    last = dim - patch
    return list(range(0, last, stride)) + [last]


def plan_tiles(height: int, width: int, patch: int, stride: int) -> TileGrid:
    """Place tile origins at stride steps, the final one flush with the border."""
    if patch > height or patch > width:
        raise ValueError(f"patch {patch} exceeds image {height}x{width}; upscale or pad first")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must lie in [1, patch], got {stride}")
    return TileGrid(
        image_size=(height, width), patch=patch, stride=stride,
        rows=_axis_origins(height, patch, stride),
        cols=_axis_origins(width, patch, stride),
    )


def _pad_reflect(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    pad_h, pad_w = target_h - h, target_w - w
    if pad_h == 0 and pad_w == 0:
        return image
    if pad_h >= h or pad_w >= w:
        raise ValueError(
            f"cannot reflection-pad {h}x{w} to {target_h}x{target_w}; "
            "use a larger scale for this image"
        )
    pads = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pads, mode="reflect")


def predict_tiled(model: torch.nn.Module, image: np.ndarray, scale: float,
                  cfg: InferenceConfig, device: str = "cpu") -> ProbabilityMap:
    """Tile one rescaled image through the model and stitch sigmoid outputs."""
    cfg.validate()
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h0, w0 = image.shape[:2]
    if scale != 1.0:
        scaled = cv2.resize(image, (round(w0 * scale), round(h0 * scale)),
                            interpolation=cv2.INTER_LINEAR)
    else:
        scaled = image
    h1, w1 = scaled.shape[:2]

    factor = getattr(model, "downsample_factor", 1)
    target_h = max(cfg.patch, -(-h1 // factor) * factor)
    target_w = max(cfg.patch, -(-w1 // factor) * factor)
    padded = _pad_reflect(scaled, target_h, target_w)

    grid = plan_tiles(target_h, target_w, cfg.patch, cfg.stride)
    prob_sum = np.zeros((target_h, target_w), dtype=np.float32)
    hits = np.zeros((target_h, target_w), dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for row, col in grid.origins:
            tile = padded[row:row + cfg.patch, col:col + cfg.patch]
            x = torch.from_numpy(np.ascontiguousarray(tile)).permute(2, 0, 1)[None].to(device)
            try:
                logits = model(x)
            except Exception as exc:
                raise RuntimeError(f"forward failed on tile at ({row}, {col}), scale {scale}") from exc
            prob = torch.sigmoid(logits)[0, 0].cpu().numpy()
            prob_sum[row:row + cfg.patch, col:col + cfg.patch] += prob
            hits[row:row + cfg.patch, col:col + cfg.patch] += 1.0

    stitched = (prob_sum / hits)[:h1, :w1]
    if (h1, w1) != (h0, w0):
        stitched = cv2.resize(stitched, (w0, h0), interpolation=cv2.INTER_LINEAR)
    values = np.clip(stitched, 0.0, 1.0).astype(np.float32)
    return ProbabilityMap(values=values, provenance={
        "model": model_fingerprint(model),
        "scales": [scale],
        "patch": cfg.patch,
        "stride": cfg.stride,
        "overlap_fraction": cfg.overlap_fraction,
    })


def predict_multiscale(model: torch.nn.Module, image: np.ndarray,
                       cfg: InferenceConfig, device: str = "cpu") -> ProbabilityMap:
    """Uniform mean of tiled predictions over cfg.scales."""
    cfg.validate()
    # Canonical scale order keeps the result independent of list permutation.
    scales = sorted(float(s) for s in cfg.scales)
    acc = np.zeros(image.shape[:2], dtype=np.float64)
    for scale in scales:
        acc += predict_tiled(model, image, scale, cfg, device=device).values
    values = (acc / len(scales)).astype(np.float32)
    return ProbabilityMap(values=values, provenance={
        "model": model_fingerprint(model),
        "scales": scales,
        "patch": cfg.patch,
        "overlap_fraction": cfg.overlap_fraction,
    })


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance, on [0, 1] data."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0 or np.unique(values).size < 2:
        raise ValueError("degenerate histogram: need at least two distinct values")
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0

    weight0 = np.cumsum(hist)
    weight1 = weight0[-1] - weight0
    mass0 = np.cumsum(hist * centers)
    mass1 = mass0[-1] - mass0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean0 = mass0 / weight0
        mean1 = mass1 / weight1
        between = weight0 * weight1 * (mean0 - mean1) ** 2
    between = np.nan_to_num(between[:-1], nan=-1.0)
    best = int(np.argmax(between))
    return float(edges[best + 1])


def binarize(pmap: ProbabilityMap, fov: np.ndarray, method: Binarization) -> np.ndarray:
    """Threshold a probability map; OTSU fits its threshold on FOV pixels only."""
    method = Binarization(method)
    if method is Binarization.FIXED_05:
        threshold = 0.5
    else:
        threshold = otsu_threshold(pmap.values[fov > 0])
    mask = (pmap.values > threshold).astype(np.uint8)
    mask[fov == 0] = 0
    return mask


def save_probability_map(pmap: ProbabilityMap, path: str | Path) -> None:
    """Write a 16-bit grayscale PNG plus a provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(pmap.values * 65535.0).astype(np.uint16)
    Image.fromarray(quantized).save(path)
    sidecar = {"shape": list(pmap.values.shape), **pmap.provenance}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, default=str) + "\n")


def load_probability_map(path: str | Path) -> ProbabilityMap:
    path = Path(path)
    arr = np.asarray(Image.open(path), dtype=np.float32) / 65535.0
    sidecar = path.with_suffix(".json")
    provenance = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return ProbabilityMap(values=arr, provenance=provenance)


def save_binary_mask(mask: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask > 0).astype(np.uint8) * 255).save(path)
