"""Command-line interface: train, predict, evaluate, crossdb, benchmark."""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_run_config, save_run_config
from .data import (DatasetKind, FundusRecord, compute_fov_mask, load_dataset,
                   read_record, write_manifest)
from .metrics import evaluate, write_report
from .nets import build_model, model_fingerprint, parameter_count
from .tiling import (Binarization, InferenceConfig, ProbabilityMap,
                     predict_multiscale, save_binary_mask, save_probability_map)
from .training import load_checkpoint, restore_model, train

# Native image heights, used to transfer inference scales across datasets so
# that the effective resolution matches what the model saw in training.
NATIVE_HEIGHT = {DatasetKind.DRIVE: 584, DatasetKind.CHASE_DB1: 960, DatasetKind.HRF: 2336}


def crossdb_scales(train_kind: DatasetKind, test_kind: DatasetKind,
                   train_scales: list[float]) -> list[float]:
    ratio = NATIVE_HEIGHT[DatasetKind(train_kind)] / NATIVE_HEIGHT[DatasetKind(test_kind)]
    return sorted(round(s * ratio, 2) for s in train_scales)


class _RunLock:
    """O_EXCL lock file; concurrent runs must use distinct output directories."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory {run_dir} is in use (remove {self.path} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)

    def release(self) -> None:
        self.path.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "dataset_root", None):
        cfg.dataset_root = args.dataset_root
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.sampler.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "scales", None):
        cfg.inference.scales = args.scales
    if getattr(args, "patch", None):
        cfg.inference.patch = args.patch
    if getattr(args, "overlap", None) is not None:
        cfg.inference.overlap_fraction = args.overlap
    if getattr(args, "threshold", None):
        cfg.inference.binarization = (
            Binarization.OTSU if args.threshold == "otsu" else Binarization.FIXED_05
        )
    return cfg


def _device(args: argparse.Namespace) -> str:
    device = getattr(args, "device", "cpu") or "cpu"
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise RuntimeError("CUDA requested but not available")
    return device


def _load_records(cfg: RunConfig, split: str, kind: DatasetKind | None = None,
                  root: str | None = None) -> list[FundusRecord]:
    index = load_dataset(root or cfg.dataset_root, kind or cfg.dataset_kind,
                         chase_train_count=cfg.chase_train_count)
    ids = index.train_ids if split == "train" else index.test_ids
    return [read_record(index, rid) for rid in ids]


def _predict_split(model, records: list[FundusRecord], inference: InferenceConfig,
                   device: str, out_dir: Path | None = None) -> dict[str, ProbabilityMap]:
    maps: dict[str, ProbabilityMap] = {}
    for rec in records:
        pmap = predict_multiscale(model, rec.image, inference, device=device)
        maps[rec.id] = pmap
        if out_dir is not None:
            save_probability_map(pmap, out_dir / f"{rec.id}_prob.png")
            mask = _binarize_safe(pmap, rec.fov_mask, inference.binarization)
            save_binary_mask(mask, out_dir / f"{rec.id}_mask.png")
    return maps


def _binarize_safe(pmap: ProbabilityMap, fov: np.ndarray, method: Binarization) -> np.ndarray:
    from .tiling import binarize
    try:
        return binarize(pmap, fov, method)
    except ValueError:
        warnings.warn("degenerate map for Otsu; falling back to the fixed 0.5 threshold")
        return binarize(pmap, fov, Binarization.FIXED_05)


def _oracle_maps(records: list[FundusRecord]) -> dict[str, ProbabilityMap]:
    # Ground truth passed through as predictions: pipeline sanity check.
    return {
        rec.id: ProbabilityMap(values=rec.vessel_gt.astype(np.float32),
                               provenance={"model": "oracle:gt", "scales": []})
        for rec in records
    }


def _resolve_model(args: argparse.Namespace, device: str):
    if args.checkpoint == "oracle":
        return None, "oracle:gt"
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt, device=device).eval()
    return model, model_fingerprint(model)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args).resolved()
    cfg.train.validate()
    device = _device(args)
    run_dir = Path(cfg.out_dir) / cfg.fingerprint()
    with _RunLock(run_dir):
        save_run_config(cfg, run_dir / "config.yaml")
        index = load_dataset(cfg.dataset_root, cfg.dataset_kind,
                             chase_train_count=cfg.chase_train_count)
        write_manifest(index, run_dir / "manifest.tsv")
        records = [read_record(index, rid) for rid in index.train_ids]
        model = build_model(cfg.model, seed=cfg.seed)
        print(f"training {cfg.model.resolved().family.value} "
              f"({parameter_count(model)/1e6:.2f}M params) on {cfg.dataset_kind.value} "
              f"[{len(records)} images] -> {run_dir}")
        ckpt = train(model, records, cfg.sampler, cfg.augment, cfg.train,
                     out_dir=run_dir, device=device,
                     config_fingerprint=cfg.fingerprint())
        print(f"done: {ckpt.samples_seen} samples, "
              f"checkpoints under {run_dir / 'checkpoints'}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args).resolved()
    device = _device(args)
    out_dir = Path(args.out or cfg.out_dir) / "predictions"
    model, _ = _resolve_model(args, device)

    if args.image:
        from .data import read_image
        image = read_image(Path(args.image))
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        if model is None:
            raise ValueError("--checkpoint oracle needs dataset ground truth; not usable with --image")
        pmap = predict_multiscale(model, image, cfg.inference, device=device)
        stem = Path(args.image).stem
        save_probability_map(pmap, out_dir / f"{stem}_prob.png")
        try:
            fov = compute_fov_mask(image)
        except ValueError:
            fov = np.ones(image.shape[:2], dtype=np.uint8)
        save_binary_mask(_binarize_safe(pmap, fov, cfg.inference.binarization),
                         out_dir / f"{stem}_mask.png")
        print(f"wrote {out_dir / (stem + '_prob.png')}")
        return 0

    records = _load_records(cfg, args.split)
    if model is None:
        maps = _oracle_maps(records)
        for rid, pmap in maps.items():
            save_probability_map(pmap, out_dir / f"{rid}_prob.png")
    else:
        _predict_split(model, records, cfg.inference, device, out_dir)
    print(f"wrote {len(records)} probability maps to {out_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args).resolved()
    device = _device(args)
    out_dir = Path(args.out or cfg.out_dir) / f"eval_{cfg.dataset_kind.value.lower()}"
    records = _load_records(cfg, "test")
    model, fingerprint = _resolve_model(args, device)
    if model is None:
        maps = _oracle_maps(records)
    else:
        maps = _predict_split(model, records, cfg.inference, device, out_dir / "maps")
    report = evaluate(maps, records, cfg.inference.binarization,
                      dataset=cfg.dataset_kind.value, model=fingerprint)
    write_report(report, out_dir)
    p = report.pooled
    print(f"{cfg.dataset_kind.value}: F1={p['f1']:.4f} ACC={p['acc']:.4f} "
          f"SE={p['sensitivity']:.4f} SP={p['specificity']:.4f} "
          f"ROC={p['roc_auc']:.4f} PR={p['pr_auc']:.4f}")
    print(f"report written to {out_dir}")
    return 0


def cmd_crossdb(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args).resolved()
    device = _device(args)
    target_kind = DatasetKind(args.dataset)
    if args.scales:
        scales = args.scales
    else:
        scales = crossdb_scales(cfg.dataset_kind, target_kind, cfg.inference.scales)
    binarization = cfg.inference.binarization
    if not args.threshold:
        binarization = (Binarization.OTSU if target_kind is DatasetKind.HRF
                        else Binarization.FIXED_05)
    inference = InferenceConfig(patch=cfg.inference.patch,
                                overlap_fraction=cfg.inference.overlap_fraction,
                                scales=scales, binarization=binarization)
    out_dir = Path(args.out or cfg.out_dir) / (
        f"crossdb_{cfg.dataset_kind.value.lower()}_to_{target_kind.value.lower()}"
    )
    records = _load_records(cfg, "test", kind=target_kind, root=args.dataset_root)
    model, fingerprint = _resolve_model(args, device)
    if model is None:
        maps = _oracle_maps(records)
    else:
        maps = _predict_split(model, records, inference, device, out_dir / "maps")
    report = evaluate(maps, records, inference.binarization,
                      dataset=f"{cfg.dataset_kind.value}->{target_kind.value}",
                      model=fingerprint)
    write_report(report, out_dir)
    p = report.pooled
    print(f"{report.dataset} (scales {scales}): F1={p['f1']:.4f} ROC={p['roc_auc']:.4f} "
          f"PR={p['pr_auc']:.4f}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args).resolved()
    device = _device(args)
    records = _load_records(cfg, "test")
    model, _ = _resolve_model(args, device)
    if model is None:
        raise ValueError("benchmark needs a real checkpoint, not the oracle")
    out_dir = Path(args.out or cfg.out_dir) / f"benchmark_{cfg.dataset_kind.value.lower()}"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["id\tseconds"]
    timings = []
    for rec in records:
        start = time.perf_counter()
        predict_multiscale(model, rec.image, cfg.inference, device=device)
        elapsed = time.perf_counter() - start
        timings.append(elapsed)
        rows.append(f"{rec.id}\t{elapsed:.4f}")
        print(f"{rec.id}: {elapsed:.3f}s")
    (out_dir / "timings.tsv").write_text("\n".join(rows) + "\n")
    print(f"mean {np.mean(timings):.3f}s over {len(timings)} images "
          f"(informational; timings are hardware-specific)")
    return 0


def _add_common(parser: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    parser.add_argument("--config", required=True, help="run config YAML")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True,
                            help="checkpoint file, or 'oracle' to score ground truth "
                                 "against itself (pipeline sanity check)")
    parser.add_argument("--dataset-root", help="override the config dataset root")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--scales", type=float, nargs="+", help="override inference scales")
    parser.add_argument("--patch", type=int, help="override the inference tile size")
    parser.add_argument("--overlap", type=float, help="override tile overlap fraction")
    parser.add_argument("--threshold", choices=["fixed", "otsu"], help="binarization method")
    parser.add_argument("--device", default="cpu", help="cpu or cuda")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlight",
                                     description="Retinal vessel segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset's training split")
    _add_common(p, checkpoint=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write probability maps and masks")
    _add_common(p)
    p.add_argument("--image", help="predict a single image file instead of the split")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossdb", help="evaluate a trained model on another dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True, choices=[k.value for k in DatasetKind],
                   help="target dataset kind")
    p.set_defaults(func=cmd_crossdb)

    p = sub.add_parser("benchmark", help="report per-image inference wall time")
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
