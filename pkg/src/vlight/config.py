"""Run configuration: one YAML file describes a full train/eval target."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import DatasetKind
from .nets import ConvKind, ModelFamily, ModelSpec, Upsampling
from .sampling import AugmentConfig, SamplerConfig
from .tiling import Binarization, InferenceConfig
from .training import TrainConfig, config_fingerprint


@dataclass
class RunConfig:
    dataset_kind: DatasetKind = DatasetKind.DRIVE
    dataset_root: str = ""
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    out_dir: str = "runs"
    seed: int = 0
    chase_train_count: int = 20

    def resolved(self) -> "RunConfig":
        cfg = from_dict(to_dict(self))
        cfg.model = cfg.model.resolved()
        cfg.sampler.validate()
        cfg.inference.validate()
        return cfg

    def fingerprint(self) -> str:
        return config_fingerprint(to_dict(self.resolved()))


def to_dict(cfg: RunConfig) -> dict:
    """Plain-scalar dictionary form (enums to strings, tuples to lists)."""

    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return getattr(obj, "value", obj)

    return plain(asdict(cfg))


def _build(cls, payload: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    return cls(**payload)


def from_dict(payload: dict) -> RunConfig:
    payload = dict(payload)
    try:
        sampler = _build(SamplerConfig, payload.pop("sampler", {}))
        if isinstance(sampler.scale_range, list):
            sampler.scale_range = tuple(sampler.scale_range)
        augment = _build(AugmentConfig, payload.pop("augment", {}))
        model_payload = dict(payload.pop("model", {}))
        if "family" in model_payload:
            model_payload["family"] = ModelFamily(model_payload["family"])
        if model_payload.get("upsampling"):
            model_payload["upsampling"] = Upsampling(model_payload["upsampling"])
        if model_payload.get("conv_kind"):
            model_payload["conv_kind"] = ConvKind(model_payload["conv_kind"])
        model = _build(ModelSpec, model_payload)
        train = _build(TrainConfig, payload.pop("train", {}))
        inference_payload = dict(payload.pop("inference", {}))
        if "binarization" in inference_payload:
            inference_payload["binarization"] = Binarization(inference_payload["binarization"])
        inference = _build(InferenceConfig, inference_payload)
        if "dataset_kind" in payload:
            payload["dataset_kind"] = DatasetKind(payload["dataset_kind"])
        return _build(RunConfig, {
            **payload,
            "sampler": sampler,
            "augment": augment,
            "model": model,
            "train": train,
            "inference": inference,
        })
    except (TypeError, ValueError, KeyError) as exc:
        raise ValueError(f"invalid run config: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return from_dict(payload)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
