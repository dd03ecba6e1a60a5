"""Training patch stream: random multi-scale crops with augmentation.

One training sample is a random square crop taken from a record that was
first rescaled by a random factor, then rotated/flipped, with photometric
jitter applied to the image only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import cv2
import numpy as np

from .data import FundusRecord


@dataclass
class SamplerConfig:
    patch_size: int = 512
    scale_range: tuple[float, float] = (2.0, 4.0)
    samples_total: int = 100_000
    batch_size: int = 10
    seed: int = 0

    def validate(self, records: Sequence[FundusRecord] | None = None) -> None:
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid scale range {self.scale_range}")
        if self.patch_size <= 0 or self.batch_size <= 0 or self.samples_total <= 0:
            raise ValueError("patch_size, batch_size and samples_total must be positive")
        for rec in records or ():
            h, w = rec.image.shape[:2]
            if self.patch_size > min(round(h * lo), round(w * lo)):
                raise ValueError(
                    f"patch {self.patch_size} exceeds record {rec.id} "
                    f"({h}x{w}) at minimum scale {lo}"
                )


@dataclass
class AugmentConfig:
    rotation_deg: float = 60.0
    hflip: bool = True
    vflip: bool = True
    rgb_shift: float = 20.0          # on a 0-255 intensity scale
    brightness_contrast: float = 0.5  # +-50%
    gamma: float = 0.2                # +-20%

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(rotation_deg=0.0, hflip=False, vflip=False,
                   rgb_shift=0.0, brightness_contrast=0.0, gamma=0.0)


@dataclass
class LabeledPatch:
    image: np.ndarray   # P x P x 3 float32 in [0, 1]
    target: np.ndarray  # P x P float32 in [0, 1], soft after interpolation
    fov: np.ndarray     # P x P uint8 in {0, 1}
    provenance: dict = field(default_factory=dict)


def rescale_record(record: FundusRecord, factor: float) -> FundusRecord:
    """Resize a record by ``factor``: bilinear image/GT, nearest FOV."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    h, w = record.image.shape[:2]
    new_h, new_w = round(h * factor), round(w * factor)
    if min(new_h, new_w) < 8:
        raise ValueError(f"rescale by {factor} yields degenerate size {new_h}x{new_w}")
    if (new_h, new_w) == (h, w):
        return FundusRecord(record.id, record.image.copy(), record.vessel_gt.copy(),
                            record.fov_mask.copy(), record.dataset_kind, record.native_size)
    image = cv2.resize(record.image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    gt = cv2.resize(record.vessel_gt, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    fov = cv2.resize(record.fov_mask, (new_w, new_h), interpolation=cv2.INTER_NEAREST)
    return FundusRecord(record.id, image, gt, fov, record.dataset_kind, record.native_size)


def _crop_reflect(arr: np.ndarray, y0: int, x0: int, size: int) -> np.ndarray:
    """Axis-aligned crop; out-of-bounds reads are reflection-padded."""
    h, w = arr.shape[:2]
    pad_top = max(0, -y0)
    pad_left = max(0, -x0)
    pad_bottom = max(0, y0 + size - h)
    pad_right = max(0, x0 + size - w)
    ys = slice(max(0, y0), min(h, y0 + size))
    xs = slice(max(0, x0), min(w, x0 + size))
    out = arr[ys, xs]
    if pad_top or pad_left or pad_bottom or pad_right:
        pads = [(pad_top, pad_bottom), (pad_left, pad_right)] + [(0, 0)] * (arr.ndim - 2)
        out = np.pad(out, pads, mode="reflect")
    return np.ascontiguousarray(out)


def _rotated_crop(arr: np.ndarray, center: tuple[int, int], size: int,
                  angle_deg: float, interpolation: int) -> np.ndarray:
    """Resample a size x size window rotated by ``angle_deg`` about ``center``."""
    alpha = math.radians(angle_deg)
    cos_a, sin_a = math.cos(alpha), math.sin(alpha)
    cy, cx = center
    cc = (size - 1) / 2.0
    # Inverse map: destination patch coordinates -> source coordinates.
    m = np.array([
        [cos_a, -sin_a, cx - cos_a * cc + sin_a * cc],
        [sin_a, cos_a, cy - sin_a * cc - cos_a * cc],
    ], dtype=np.float64)
    return cv2.warpAffine(
        arr, m, (size, size),
        flags=interpolation | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def draw_training_patch(record: FundusRecord, cfg: SamplerConfig,
                        aug: AugmentConfig, rng: np.random.Generator) -> LabeledPatch:
    """Draw one augmented training patch from a record.

    Pipeline: sample a scale uniformly in ``cfg.scale_range``, rescale the
    record, pick a crop center inside the FOV, rotate/flip, then apply
    photometric jitter to the image only.
    """
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi))
    scaled = rescale_record(record, scale)
    h, w = scaled.image.shape[:2]
    size = cfg.patch_size
    if size > h or size > w:
        raise ValueError(
            f"patch {size} larger than rescaled image {h}x{w} "
            f"(record {record.id}, scale {scale:.3f})"
        )

    for _ in range(10_000):
        cy = int(rng.integers(h))
        cx = int(rng.integers(w))
        if scaled.fov_mask[cy, cx]:
            break
    else:
        raise ValueError(f"record {record.id}: could not find a crop center inside the FOV")

    angle = float(rng.uniform(-aug.rotation_deg, aug.rotation_deg))
    hflip = aug.hflip and rng.random() < 0.5
    vflip = aug.vflip and rng.random() < 0.5

    y0, x0 = cy - size // 2, cx - size // 2
    if angle == 0.0:
        image = _crop_reflect(scaled.image, y0, x0, size)
        target = _crop_reflect(scaled.vessel_gt, y0, x0, size)
        fov = _crop_reflect(scaled.fov_mask, y0, x0, size)
    else:
        image = _rotated_crop(scaled.image, (cy, cx), size, angle, cv2.INTER_LINEAR)
        target = _rotated_crop(scaled.vessel_gt, (cy, cx), size, angle, cv2.INTER_LINEAR)
        fov = _rotated_crop(scaled.fov_mask, (cy, cx), size, angle, cv2.INTER_NEAREST)

    if hflip:
        image, target, fov = image[:, ::-1], target[:, ::-1], fov[:, ::-1]
    if vflip:
        image, target, fov = image[::-1], target[::-1], fov[::-1]
    image = np.ascontiguousarray(image)
    target = np.ascontiguousarray(target)
    fov = np.ascontiguousarray(fov)

    # Photometric jitter, image only; identity draws are skipped so that a
    # disabled augmentation leaves the crop bit-exact.
    shift_range = aug.rgb_shift / 255.0
    deltas = rng.uniform(-shift_range, shift_range, size=3).astype(np.float32)
    contrast = float(rng.uniform(1.0 - aug.brightness_contrast, 1.0 + aug.brightness_contrast))
    brightness = float(rng.uniform(-0.5 * aug.brightness_contrast, 0.5 * aug.brightness_contrast))
    gamma_lo = 1.0 - aug.gamma
    gamma = float(rng.uniform(gamma_lo, 1.0 / gamma_lo if gamma_lo > 0 else 1.0))

    if deltas.any():
        image = image + deltas[None, None, :]
    if contrast != 1.0 or brightness != 0.0:
        image = (image - 0.5) * contrast + 0.5 + brightness
    image = np.clip(image, 0.0, 1.0)
    if gamma != 1.0:
        image = image ** np.float32(gamma)

    return LabeledPatch(
        image=image.astype(np.float32, copy=False),
        target=target,
        fov=fov,
        provenance={
            "record_id": record.id,
            "scale": scale,
            "origin": (y0, x0),
            "center": (cy, cx),
            "angle_deg": angle,
            "hflip": hflip,
            "vflip": vflip,
            "rgb_shift": tuple(float(d) for d in deltas),
            "contrast": contrast,
            "brightness": brightness,
            "gamma": gamma,
        },
    )


class PatchSampler:
    """Deterministic patch stream over a set of records.

    Each sampler owns an independent random stream derived from
    ``(cfg.seed, worker)``; a single instance is not safe for concurrent use.
    """

    def __init__(self, records: Sequence[FundusRecord], cfg: SamplerConfig,
                 aug: AugmentConfig | None = None, worker: int = 0):
        if not records:
            raise ValueError("sampler needs at least one record")
        self.records = list(records)
        self.cfg = cfg
        self.aug = aug if aug is not None else AugmentConfig()
        cfg.validate(self.records)
        self.rng = np.random.default_rng([cfg.seed, worker])

    def draw(self) -> LabeledPatch:
        record = self.records[int(self.rng.integers(len(self.records)))]
        return draw_training_patch(record, self.cfg, self.aug, self.rng)

    def batches(self, samples_total: int | None = None) -> Iterator[list[LabeledPatch]]:
        total = samples_total if samples_total is not None else self.cfg.samples_total
        for _ in range(total // self.cfg.batch_size):
            yield [self.draw() for _ in range(self.cfg.batch_size)]

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state
