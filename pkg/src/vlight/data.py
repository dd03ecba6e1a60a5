"""Loading of the DRIVE, CHASE_DB1 and HRF fundus datasets.

Each dataset is read from its published on-disk layout and exposed through a
common interface: a ``DatasetIndex`` with the official train/test split and
``FundusRecord`` objects holding image, vessel ground truth and field-of-view
mask as float arrays in [0, 1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage


class DatasetKind(str, Enum):
    DRIVE = "DRIVE"
    CHASE_DB1 = "CHASE_DB1"
    HRF = "HRF"


# Official split sizes: (train, test).
SPLIT_SIZES = {
    DatasetKind.DRIVE: (20, 20),
    DatasetKind.CHASE_DB1: (20, 8),
    DatasetKind.HRF: (15, 30),
}

# CHASE_DB1 FOV extraction defaults (at native resolution).
CHASE_FOV_MEDIAN_RADIUS = 12
CHASE_FOV_THRESHOLD = 0.04


@dataclass
class FundusRecord:
    """One fundus image with vessel ground truth and FOV mask.

    ``image`` is H x W x 3 float32 in [0, 1], ``vessel_gt`` H x W float32
    (binary at load time, soft values allowed after rescaling), ``fov_mask``
    H x W uint8 in {0, 1}. ``native_size`` is (height, width) in pixels.
    """

    id: str
    image: np.ndarray
    vessel_gt: np.ndarray
    fov_mask: np.ndarray
    dataset_kind: DatasetKind
    native_size: tuple[int, int]


@dataclass
class RecordFiles:
    image: Path
    vessel_gt: Path
    fov_mask: Path | None  # None when the FOV is derived, not read


@dataclass
class DatasetIndex:
    kind: DatasetKind
    root: Path
    train_ids: list[str]
    test_ids: list[str]
    files: dict[str, RecordFiles] = field(default_factory=dict)

    @property
    def all_ids(self) -> list[str]:
        return self.train_ids + self.test_ids


def validate_record(record: FundusRecord) -> None:
    """Raise ValueError if a record violates the FundusRecord invariants."""
    img, gt, fov = record.image, record.vessel_gt, record.fov_mask
    if img.shape[:2] != gt.shape or img.shape[:2] != fov.shape:
        raise ValueError(
            f"record {record.id}: shape mismatch image {img.shape} "
            f"gt {gt.shape} fov {fov.shape}"
        )
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"record {record.id}: image intensities outside [0, 1]")
    if gt.min() < 0.0 or gt.max() > 1.0:
        raise ValueError(f"record {record.id}: vessel_gt outside [0, 1]")
    fov_frac = float(fov.mean())
    if not 0.30 < fov_frac < 0.95:
        raise ValueError(
            f"record {record.id}: FOV covers {fov_frac:.1%} of pixels, "
            "expected between 30% and 95% for a real fundus image"
        )
    if np.any((gt > 0) & (fov == 0)):
        raise ValueError(f"record {record.id}: vessel_gt nonzero outside FOV")


def _find_file(directory: Path, stem_patterns: list[str], record_id: str, role: str) -> Path:
    """Locate the single file matching any of the glob patterns."""
    for pattern in stem_patterns:
        matches = sorted(directory.glob(pattern))
        if matches:
            return matches[0]
    raise FileNotFoundError(
        f"{role} for id '{record_id}' not found under {directory} "
        f"(tried {', '.join(stem_patterns)})"
    )


def _index_drive(root: Path) -> tuple[list[str], list[str], dict[str, RecordFiles]]:
    files: dict[str, RecordFiles] = {}
    train_ids = [f"{i:02d}" for i in range(21, 41)]
    test_ids = [f"{i:02d}" for i in range(1, 21)]
    for split, ids in (("training", train_ids), ("test", test_ids)):
        base = root / split
        for rid in ids:
            # First human observer annotations are the ground truth.
            files[rid] = RecordFiles(
                image=_find_file(base / "images", [f"{rid}_*.tif", f"{rid}_*.png"], rid, "image"),
                vessel_gt=_find_file(base / "1st_manual", [f"{rid}_manual1.*"], rid, "ground truth"),
                fov_mask=_find_file(base / "mask", [f"{rid}_*_mask.*"], rid, "FOV mask"),
            )
    return train_ids, test_ids, files


def _index_chase(root: Path, train_count: int) -> tuple[list[str], list[str], dict[str, RecordFiles]]:
    images = sorted(
        p for p in root.glob("Image_*.jpg") if "HO" not in p.stem
    )
    if not images:
        raise FileNotFoundError(f"no CHASE_DB1 images (Image_*.jpg) found under {root}")
    files: dict[str, RecordFiles] = {}
    ids = []
    for img_path in images:
        rid = img_path.stem.removeprefix("Image_")
        ids.append(rid)
        files[rid] = RecordFiles(
            image=img_path,
            vessel_gt=_find_file(root, [f"Image_{rid}_1stHO.png"], rid, "ground truth"),
            fov_mask=None,  # derived from the image
        )
    return ids[:train_count], ids[train_count:], files


def _index_hrf(root: Path) -> tuple[list[str], list[str], dict[str, RecordFiles]]:
    files: dict[str, RecordFiles] = {}
    train_ids, test_ids = [], []
    # First five images of each of the healthy / glaucoma / diabetic
    # retinopathy sets are training, the rest test.
    for category in ("h", "g", "dr"):
        for i in range(1, 16):
            rid = f"{i:02d}_{category}"
            files[rid] = RecordFiles(
                image=_find_file(
                    root / "images", [f"{rid}.jpg", f"{rid}.JPG", f"{rid}.png"], rid, "image"
                ),
                vessel_gt=_find_file(root / "manual1", [f"{rid}.tif", f"{rid}.png"], rid, "ground truth"),
                fov_mask=_find_file(root / "mask", [f"{rid}_mask.tif", f"{rid}_mask.png"], rid, "FOV mask"),
            )
            (train_ids if i <= 5 else test_ids).append(rid)
    return train_ids, test_ids, files


def load_dataset(root: str | Path, kind: DatasetKind, chase_train_count: int = 20) -> DatasetIndex:
    """Index a dataset root and return the official train/test split.

    ``chase_train_count`` overrides the CHASE_DB1 split point (the split is
    not standardized in the literature; first-20/last-8 is the default).
    """
    root = Path(root)
    kind = DatasetKind(kind)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if kind is DatasetKind.DRIVE:
        train_ids, test_ids, files = _index_drive(root)
    elif kind is DatasetKind.CHASE_DB1:
        train_ids, test_ids, files = _index_chase(root, chase_train_count)
    else:
        train_ids, test_ids, files = _index_hrf(root)

    expected = SPLIT_SIZES[kind]
    if kind is not DatasetKind.CHASE_DB1 or chase_train_count == 20:
        if (len(train_ids), len(test_ids)) != expected:
            raise ValueError(
                f"{kind.value}: found {len(train_ids)}/{len(test_ids)} "
                f"train/test images, expected {expected[0]}/{expected[1]}"
            )
    return DatasetIndex(kind=kind, root=root, train_ids=train_ids, test_ids=test_ids, files=files)


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "I;16") else im)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    arr = arr.astype(np.float32)
    if arr.max() > 1.0:
        arr /= 255.0 if arr.max() <= 255 else 65535.0
    return arr


def read_record(index: DatasetIndex, record_id: str) -> FundusRecord:
    """Load, normalize and validate one record of an indexed dataset."""
    if record_id not in index.files:
        raise KeyError(f"id '{record_id}' not in {index.kind.value} index")
    paths = index.files[record_id]

    image = read_image(paths.image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    gt = read_image(paths.vessel_gt)
    if gt.ndim == 3:
        gt = gt.mean(axis=2)
    gt = (gt >= 0.5).astype(np.float32)

    if paths.fov_mask is not None:
        fov = read_image(paths.fov_mask)
        if fov.ndim == 3:
            fov = fov.mean(axis=2)
        fov = (fov >= 0.5).astype(np.uint8)
    else:
        fov = compute_fov_mask(image, CHASE_FOV_MEDIAN_RADIUS, CHASE_FOV_THRESHOLD)

    gt = gt * fov  # metrics are FOV-restricted; avoid leaking GT into the border

    record = FundusRecord(
        id=record_id,
        image=image,
        vessel_gt=gt,
        fov_mask=fov,
        dataset_kind=index.kind,
        native_size=(image.shape[0], image.shape[1]),
    )
    validate_record(record)
    return record


def compute_fov_mask(image: np.ndarray, median_radius: int = CHASE_FOV_MEDIAN_RADIUS,
                     threshold: float = CHASE_FOV_THRESHOLD) -> np.ndarray:
    """Derive a FOV mask by thresholding the median-filtered grayscale image.

    Keeps the largest connected component above ``threshold``, fills its
    holes, and dilates by the filter radius. The dilation compensates the
    median's erosion of curved boundaries; without it the mask would keep
    shrinking under re-application to the masked image. Raises ValueError
    when no pixel exceeds the threshold.
    """
    gray = image[:, :, 0] * 0.299 + image[:, :, 1] * 0.587 + image[:, :, 2] * 0.114
    gray_u8 = np.clip(gray * 255.0 + 0.5, 0, 255).astype(np.uint8)
    filtered = cv2.medianBlur(gray_u8, 2 * median_radius + 1)
    above = filtered.astype(np.float32) / 255.0 > threshold
    if not above.any():
        raise ValueError("degenerate FOV: no pixel exceeds the threshold")
    labels, _ = ndimage.label(above)
    largest = np.argmax(np.bincount(labels.ravel())[1:]) + 1
    mask = ndimage.binary_fill_holes(labels == largest).astype(np.uint8)
    span = np.arange(-median_radius, median_radius + 1)
    disc = (span[:, None] ** 2 + span[None, :] ** 2 <= median_radius ** 2).astype(np.uint8)
    return cv2.dilate(mask, disc)


def write_manifest(index: DatasetIndex, path: str | Path) -> None:
    """Write a reproducibility manifest (id, split, paths, image checksum)."""
    lines = ["id\tsplit\timage\tvessel_gt\tfov_mask\tsha256"]
    for split, ids in (("train", index.train_ids), ("test", index.test_ids)):
        for rid in ids:
            f = index.files[rid]
            digest = hashlib.sha256(f.image.read_bytes()).hexdigest()
            fov = str(f.fov_mask) if f.fov_mask is not None else "(derived)"
            lines.append(f"{rid}\t{split}\t{f.image}\t{f.vessel_gt}\t{fov}\t{digest}")
    Path(path).write_text("\n".join(lines) + "\n")
