"""Training loop: BCE on sampled patches, Adam, step-down LR, checkpoints.

Checkpoints use a portable container format: an 8-byte magic, a little-endian
uint64 header length, a JSON header describing every array (name, shape,
element type, byte offset) plus run metadata, followed by the raw
little-endian array payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import FundusRecord
from .nets import ModelSpec, build_model
from .sampling import AugmentConfig, LabeledPatch, PatchSampler, SamplerConfig

CHECKPOINT_MAGIC = b"VCKPT001"


@dataclass
class TrainConfig:
    samples_total: int = 100_000
    batch_size: int = 10
    lr_initial: float = 1e-3
    lr_after: float = 2e-4
    lr_switch_samples: int = 80_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10_000

    def validate(self) -> None:
        if self.lr_switch_samples >= self.samples_total:
            raise ValueError("lr_switch_samples must be below samples_total")
        if self.batch_size <= 0 or self.samples_total <= 0:
            raise ValueError("batch_size and samples_total must be positive")
        if self.checkpoint_every % self.batch_size != 0:
            raise ValueError("batch_size must divide checkpoint_every")


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy in the numerically stable logit form."""
    if logits.ndim == 4 and logits.shape[1] == 1:
        logits = logits[:, 0]
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if targets.min() < 0 or targets.max() > 1:
        raise ValueError("targets must lie in [0, 1]")
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, targets)


def learning_rate(samples_seen: int, cfg: TrainConfig) -> float:
    """Step schedule: initial rate until the switch point, reduced rate after."""
    return cfg.lr_initial if samples_seen < cfg.lr_switch_samples else cfg.lr_after


@dataclass
class Checkpoint:
    model_spec: ModelSpec
    model_state: dict[str, np.ndarray]
    adam_state: dict[str, dict[str, np.ndarray]]
    adam_step: int
    samples_seen: int
    rng_state: dict | None = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(tensor.detach().cpu().numpy())


def snapshot(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None,
             sampler: PatchSampler | None = None, samples_seen: int = 0,
             config_fingerprint: str = "") -> Checkpoint:
    """Capture model parameters, optimizer moments and sampler RNG state."""
    model_state = {k: _to_numpy(v) for k, v in model.state_dict().items()}
    adam_state: dict[str, dict[str, np.ndarray]] = {}
    adam_step = 0
    if optimizer is not None:
        for name, param in model.named_parameters():
            state = optimizer.state.get(param)
            if state:
                adam_state[name] = {
                    "exp_avg": _to_numpy(state["exp_avg"]),
                    "exp_avg_sq": _to_numpy(state["exp_avg_sq"]),
                }
                adam_step = int(state["step"])
    return Checkpoint(
        model_spec=model.spec,
        model_state=model_state,
        adam_state=adam_state,
        adam_step=adam_step,
        samples_seen=samples_seen,
        rng_state=sampler.get_state() if sampler is not None else None,
        config_fingerprint=config_fingerprint,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.model_state.items():
        arrays.append((f"model/{name}", arr))
    for name, moments in ckpt.adam_state.items():
        arrays.append((f"adam/{name}/exp_avg", moments["exp_avg"]))
        arrays.append((f"adam/{name}/exp_avg_sq", moments["exp_avg_sq"]))

    entries = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": len(payload),
        })
        payload.extend(le.tobytes())

    spec = ckpt.model_spec.resolved()
    header = {
        "version": 1,
        "meta": {
            "samples_seen": ckpt.samples_seen,
            "adam_step": ckpt.adam_step,
            "config_fingerprint": ckpt.config_fingerprint,
            "model_spec": {k: getattr(v, "value", v) for k, v in asdict(spec).items()},
            "rng_state": _encode_rng(ckpt.rng_state),
            "extra": ckpt.extra,
        },
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[16:16 + header_len])
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[16 + header_len:]

    values: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise ValueError(f"{path}: truncated checkpoint payload at array {entry['name']}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        values[entry["name"]] = arr.reshape(entry["shape"]).copy()

    meta = header["meta"]
    model_state = {k.removeprefix("model/"): v for k, v in values.items() if k.startswith("model/")}
    adam_state: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in values.items():
        if key.startswith("adam/"):
            name, kind = key.removeprefix("adam/").rsplit("/", 1)
            adam_state.setdefault(name, {})[kind] = arr
    return Checkpoint(
        model_spec=ModelSpec(**meta["model_spec"]).resolved(),
        model_state=model_state,
        adam_state=adam_state,
        adam_step=meta["adam_step"],
        samples_seen=meta["samples_seen"],
        rng_state=_decode_rng(meta["rng_state"]),
        config_fingerprint=meta["config_fingerprint"],
        extra=meta.get("extra", {}),
    )


def _encode_rng(state: dict | None) -> dict | None:
    if state is None:
        return None
    return json.loads(json.dumps(state, default=str))


def _decode_rng(state: dict | None) -> dict | None:
    if state is None:
        return None

    def fix(obj):
        if isinstance(obj, dict):
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, str) and obj.isdigit():
            return int(obj)
        return obj

    return fix(state)


def restore_model(ckpt: Checkpoint, device: str = "cpu") -> torch.nn.Module:
    """Rebuild the network described by a checkpoint and load its weights."""
    model = build_model(ckpt.model_spec)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.model_state.items()}
    model.load_state_dict(state)
    return model.to(device)


def _restore_optimizer(ckpt: Checkpoint, model: torch.nn.Module,
                       optimizer: torch.optim.Optimizer) -> None:
    for name, param in model.named_parameters():
        if name in ckpt.adam_state:
            moments = ckpt.adam_state[name]
            optimizer.state[param] = {
                "step": torch.tensor(float(ckpt.adam_step)),
                "exp_avg": torch.from_numpy(moments["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(moments["exp_avg_sq"].copy()),
            }


def batch_to_tensors(patches: Sequence[LabeledPatch], device: str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([p.image for p in patches])
    targets = np.stack([p.target for p in patches])
    x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous().to(device)
    t = torch.from_numpy(targets).to(device)
    return x, t


def train(model: torch.nn.Module, records: Sequence[FundusRecord],
          sampler_cfg: SamplerConfig, aug_cfg: AugmentConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          device: str = "cpu", config_fingerprint: str = "") -> Checkpoint:
    """Optimize ``model`` on sampled patches; returns the final checkpoint.

    With ``out_dir`` set, periodic checkpoints and an append-only loss log
    (samples_seen, lr, loss) are written there. Serial execution with a fixed
    seed is bit-reproducible, including across an interrupt/resume.
    """
    cfg.validate()
    if not records:
        raise ValueError("training split is empty")
    model = model.to(device).train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr_initial,
        betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon,
    )
    sampler = PatchSampler(records, sampler_cfg, aug_cfg)

    samples_seen = 0
    if resume is not None:
        state = {k: torch.from_numpy(v.copy()) for k, v in resume.model_state.items()}
        model.load_state_dict(state)
        _restore_optimizer(resume, model, optimizer)
        if resume.rng_state is not None:
            sampler.set_state(resume.rng_state)
        samples_seen = resume.samples_seen

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "loss_log.tsv" if out_dir else None
    if log_path and not log_path.exists():
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path.write_text("samples_seen\tlr\tloss\n")

    def emit_checkpoint() -> Checkpoint:
        ckpt = snapshot(model, optimizer, sampler, samples_seen, config_fingerprint)
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoints" / f"ckpt_{samples_seen:08d}.vckpt")
        return ckpt

    last_saved = samples_seen if resume is not None else -1
    ckpt = None
    while samples_seen < cfg.samples_total:
        lr = learning_rate(samples_seen, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = [sampler.draw() for _ in range(cfg.batch_size)]
        x, targets = batch_to_tensors(batch, device)
        logits = model(x)
        loss = bce_loss(logits, targets)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            ids = sorted({p.provenance["record_id"] for p in batch})
            raise RuntimeError(
                f"non-finite loss after {samples_seen} samples (batch records: {', '.join(ids)})"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        samples_seen += cfg.batch_size

        if log_path:
            with open(log_path, "a") as fh:
                fh.write(f"{samples_seen}\t{lr:.6g}\t{loss_value:.8f}\n")
        if samples_seen // cfg.checkpoint_every > max(last_saved, 0) // cfg.checkpoint_every:
            ckpt = emit_checkpoint()
            last_saved = samples_seen

    if last_saved != samples_seen or ckpt is None:
        ckpt = emit_checkpoint()
    return ckpt


def config_fingerprint(payload: dict) -> str:
    """Short stable hash of a resolved configuration dictionary."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
