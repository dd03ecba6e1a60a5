"""Shared fixtures: synthetic fundus records and on-disk dataset layouts."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import pytest
from PIL import Image

from vlight.data import DatasetKind, FundusRecord


def make_synthetic_record(record_id: str = "syn", height: int = 96, width: int = 96,
                          seed: int = 0, kind: DatasetKind = DatasetKind.DRIVE,
                          vessels: int = 4) -> FundusRecord:
    """Fundus-like test image: orange disc on black with dark vessel curves."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = height / 2.0, width / 2.0
    radius = 0.47 * min(height, width)
    fov = (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2).astype(np.uint8)

    gt = np.zeros((height, width), dtype=np.uint8)
    for _ in range(vessels):
        pts = np.stack([
            rng.uniform(0.15 * width, 0.85 * width, size=4),
            rng.uniform(0.15 * height, 0.85 * height, size=4),
        ], axis=1).astype(np.int32)
        cv2.polylines(gt, [pts], False, 1, thickness=2)
    gt &= fov

    image = np.zeros((height, width, 3), dtype=np.float32)
    image[..., 0] = 0.70
    image[..., 1] = 0.42
    image[..., 2] = 0.22
    shade = rng.normal(0.0, 0.02, size=(height, width, 1)).astype(np.float32)
    image = np.clip(image + shade, 0.0, 1.0)
    image[gt > 0] *= 0.35  # vessels are darker than the surrounding retina
    image *= fov[..., None]
    return FundusRecord(
        id=record_id,
        image=np.clip(image, 0.0, 1.0),
        vessel_gt=gt.astype(np.float32),
        fov_mask=fov,
        dataset_kind=kind,
        native_size=(height, width),
    )


def _save(arr: np.ndarray, path: Path, **kwargs) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, **kwargs)


def _render(record: FundusRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    image = (record.image * 255).astype(np.uint8)
    gt = (record.vessel_gt * 255).astype(np.uint8)
    fov = record.fov_mask * np.uint8(255)
    return image, gt, fov


@pytest.fixture(scope="session")
def toy_records() -> list[FundusRecord]:
    return [make_synthetic_record(f"toy{i}", 160, 176, seed=10 + i) for i in range(3)]


@pytest.fixture(scope="session")
def drive_layout(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("drive")
    for split, ids in (("training", range(21, 41)), ("test", range(1, 21))):
        for i in ids:
            rid = f"{i:02d}"
            rec = make_synthetic_record(rid, 64, 64, seed=i)
            image, gt, fov = _render(rec)
            tag = "training" if split == "training" else "test"
            _save(image, root / split / "images" / f"{rid}_{tag}.tif")
            _save(gt, root / split / "1st_manual" / f"{rid}_manual1.gif")
            _save(fov, root / split / "mask" / f"{rid}_{tag}_mask.gif")
    return root


@pytest.fixture(scope="session")
def chase_layout(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("chase")
    for i in range(1, 15):
        for side in "LR":
            rid = f"{i:02d}{side}"
            rec = make_synthetic_record(rid, 128, 128, seed=100 + i)
            image, gt, _ = _render(rec)
            _save(image, root / f"Image_{rid}.jpg", quality=95)
            _save(gt, root / f"Image_{rid}_1stHO.png")
            _save(gt, root / f"Image_{rid}_2ndHO.png")
    return root


@pytest.fixture(scope="session")
def hrf_layout(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("hrf")
    for category in ("h", "g", "dr"):
        for i in range(1, 16):
            rid = f"{i:02d}_{category}"
            rec = make_synthetic_record(rid, 64, 96, seed=200 + i)
            image, gt, fov = _render(rec)
            _save(image, root / "images" / f"{rid}.jpg", quality=95)
            _save(gt, root / "manual1" / f"{rid}.tif")
            _save(fov, root / "mask" / f"{rid}_mask.tif")
    return root
