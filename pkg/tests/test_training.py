"""Loss, schedule, optimizer behavior, checkpoint format, train loop."""

from __future__ import annotations

import math
import os

import numpy as np
import pytest
import torch

from vlight.nets import ModelFamily, ModelSpec, build_model
from vlight.sampling import AugmentConfig, SamplerConfig
from vlight.training import (Checkpoint, TrainConfig, bce_loss, learning_rate,
                             load_checkpoint, restore_model, save_checkpoint,
                             snapshot, train)

SMALL_SPEC = ModelSpec(family=ModelFamily.VLIGHT, width=16)


def small_train_cfg(**overrides) -> TrainConfig:
    base = dict(samples_total=40, batch_size=4, lr_switch_samples=12,
                checkpoint_every=20, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def small_sampler_cfg(**overrides) -> SamplerConfig:
    base = dict(patch_size=32, scale_range=(1.0, 1.5), samples_total=40,
                batch_size=4, seed=7)
    base.update(overrides)
    return SamplerConfig(**base)


class TestLoss:
    def test_symmetric_point(self):
        loss = bce_loss(torch.zeros(1, 1, 3, 3), torch.full((1, 3, 3), 0.5))
        assert abs(loss.item() - math.log(2)) < 1e-6

    def test_saturation(self):
        loss = bce_loss(torch.full((1, 1, 2, 2), 20.0), torch.ones(1, 2, 2))
        assert loss.item() < 1e-8

    def test_extreme_logits_stay_finite(self):
        loss = bce_loss(torch.full((1, 1, 2, 2), -500.0), torch.ones(1, 2, 2))
        assert torch.isfinite(loss)

    def test_target_range_validation(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            bce_loss(torch.zeros(1, 1, 2, 2), torch.full((1, 2, 2), 1.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            bce_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 3, 3))

    def test_gradient_equals_sigmoid_minus_target(self):
        torch.manual_seed(0)
        z = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        t = torch.rand(1, 3, 3, dtype=torch.float64)
        bce_loss(z, t).backward()
        expected = (torch.sigmoid(z.detach()[:, 0]) - t) / t.numel()
        assert torch.allclose(z.grad[:, 0], expected, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        z0 = torch.randn(1, 1, 3, 3, dtype=torch.float64)
        t = torch.rand(1, 3, 3, dtype=torch.float64)
        z = z0.clone().requires_grad_(True)
        bce_loss(z, t).backward()
        h = 1e-6
        rng = np.random.default_rng(2)
        for _ in range(5):
            idx = (0, 0, int(rng.integers(3)), int(rng.integers(3)))
            zp, zm = z0.clone(), z0.clone()
            zp[idx] += h
            zm[idx] -= h
            fd = (bce_loss(zp, t) - bce_loss(zm, t)).item() / (2 * h)
            assert abs(fd - z.grad[idx].item()) < 1e-4

    def test_batch_permutation_invariance(self):
        torch.manual_seed(3)
        z = torch.randn(4, 1, 5, 5)
        t = torch.rand(4, 5, 5)
        perm = torch.tensor([2, 0, 3, 1])
        assert torch.allclose(bce_loss(z, t), bce_loss(z[perm], t[perm]), atol=1e-7)


class TestSchedule:
    def test_boundaries(self):
        cfg = TrainConfig()
        assert learning_rate(0, cfg) == 0.001
        assert learning_rate(79_999, cfg) == 0.001
        assert learning_rate(80_000, cfg) == 0.0002
        assert learning_rate(99_990, cfg) == 0.0002

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(samples_total=100, lr_switch_samples=100).validate()
        with pytest.raises(ValueError, match="divide"):
            TrainConfig(samples_total=100, batch_size=3, lr_switch_samples=50,
                        checkpoint_every=10).validate()


class TestAdam:
    def test_first_step_magnitude_is_bias_corrected_lr(self):
        w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = torch.optim.Adam([w], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
        (w * 1.0).sum().backward()
        before = w.detach().clone()
        opt.step()
        assert abs(abs((w.detach() - before).item()) - 1e-3) < 1e-9


class TestCheckpointFormat:
    def _checkpoint(self) -> Checkpoint:
        model = build_model(SMALL_SPEC, seed=1)
        opt = torch.optim.Adam(model.parameters())
        loss = model(torch.randn(1, 3, 32, 32)).sum()
        loss.backward()
        opt.step()
        return snapshot(model, opt, samples_seen=10, config_fingerprint="abc123")

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self._checkpoint()
        path = tmp_path / "c.vckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.samples_seen == 10
        assert loaded.adam_step == 1
        assert loaded.config_fingerprint == "abc123"
        assert set(loaded.model_state) == set(ckpt.model_state)
        for key, arr in ckpt.model_state.items():
            assert loaded.model_state[key].dtype == arr.dtype, key
            assert np.array_equal(loaded.model_state[key], arr), key
        for name, moments in ckpt.adam_state.items():
            for kind, arr in moments.items():
                assert np.array_equal(loaded.adam_state[name][kind], arr)

    def test_restore_model_reproduces_outputs(self, tmp_path):
        ckpt = self._checkpoint()
        save_checkpoint(ckpt, tmp_path / "c.vckpt")
        model = restore_model(load_checkpoint(tmp_path / "c.vckpt")).eval()
        x = torch.randn(1, 3, 32, 32)
        reference = build_model(SMALL_SPEC, seed=0)
        reference.load_state_dict({k: torch.from_numpy(v.copy())
                                   for k, v in ckpt.model_state.items()})
        with torch.no_grad():
            assert torch.equal(model(x), reference.eval()(x))

    def test_truncated_file_rejected(self, tmp_path):
        ckpt = self._checkpoint()
        path = tmp_path / "c.vckpt"
        save_checkpoint(ckpt, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 64])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.vckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_rng_state_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        state = rng.bit_generator.state
        ckpt = Checkpoint(model_spec=SMALL_SPEC, model_state={}, adam_state={},
                          adam_step=0, samples_seen=0, rng_state=state)
        save_checkpoint(ckpt, tmp_path / "r.vckpt")
        loaded = load_checkpoint(tmp_path / "r.vckpt")
        fresh = np.random.default_rng(0)
        fresh.bit_generator.state = loaded.rng_state
        assert fresh.standard_normal(4).tolist() == rng.standard_normal(4).tolist()


class TestTrainLoop:
    def test_step_count_and_log(self, toy_records, tmp_path):
        model = build_model(SMALL_SPEC, seed=0)
        cfg = small_train_cfg(samples_total=40, batch_size=4)
        ckpt = train(model, records=toy_records, sampler_cfg=small_sampler_cfg(),
                     aug_cfg=AugmentConfig.none(), cfg=cfg, out_dir=tmp_path)
        assert ckpt.samples_seen == 40
        rows = (tmp_path / "loss_log.tsv").read_text().strip().splitlines()
        assert len(rows) == 1 + 10  # header + one row per optimizer step
        assert rows[1].split("\t")[0] == "4"

    @pytest.mark.parametrize("every,expected", [(50, 2), (40, 3), (200, 1)])
    def test_checkpoint_cadence(self, toy_records, tmp_path, every, expected):
        model = build_model(SMALL_SPEC, seed=0)
        cfg = small_train_cfg(samples_total=100, batch_size=10,
                              lr_switch_samples=50, checkpoint_every=every)
        sampler_cfg = small_sampler_cfg(samples_total=100, batch_size=10)
        train(model, toy_records, sampler_cfg, AugmentConfig.none(), cfg,
              out_dir=tmp_path / f"run{every}")
        files = sorted((tmp_path / f"run{every}" / "checkpoints").glob("*.vckpt"))
        assert len(files) == expected

    def test_fixed_seed_runs_are_bit_identical(self, toy_records):
        results = []
        for _ in range(2):
            model = build_model(SMALL_SPEC, seed=3)
            ckpt = train(model, toy_records, small_sampler_cfg(),
                         AugmentConfig(), small_train_cfg())
            results.append(ckpt)
        a, b = results
        for key in a.model_state:
            assert np.array_equal(a.model_state[key], b.model_state[key]), key
        for name in a.adam_state:
            for kind in a.adam_state[name]:
                assert np.array_equal(a.adam_state[name][kind], b.adam_state[name][kind])

    def test_resume_matches_uninterrupted(self, toy_records, tmp_path):
        full_cfg = small_train_cfg(samples_total=40)
        half_cfg = small_train_cfg(samples_total=20)

        model_a = build_model(SMALL_SPEC, seed=4)
        final_a = train(model_a, toy_records, small_sampler_cfg(), AugmentConfig(), full_cfg)
        save_checkpoint(final_a, tmp_path / "a.vckpt")

        model_b = build_model(SMALL_SPEC, seed=4)
        half = train(model_b, toy_records, small_sampler_cfg(), AugmentConfig(), half_cfg)
        save_checkpoint(half, tmp_path / "half.vckpt")
        resumed = load_checkpoint(tmp_path / "half.vckpt")
        model_b2 = build_model(SMALL_SPEC, seed=999)  # weights come from the checkpoint
        final_b = train(model_b2, toy_records, small_sampler_cfg(), AugmentConfig(),
                        full_cfg, resume=resumed)
        save_checkpoint(final_b, tmp_path / "b.vckpt")

        assert (tmp_path / "a.vckpt").read_bytes() == (tmp_path / "b.vckpt").read_bytes()

    def test_nonfinite_loss_aborts_with_provenance(self, toy_records):
        model = build_model(SMALL_SPEC, seed=0)
        with torch.no_grad():
            model.head.weight.fill_(float("inf"))
        with pytest.raises(RuntimeError, match="non-finite loss"):
            train(model, toy_records, small_sampler_cfg(), AugmentConfig.none(),
                  small_train_cfg())

    def test_empty_split_rejected(self):
        model = build_model(SMALL_SPEC, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(model, [], small_sampler_cfg(), AugmentConfig.none(), small_train_cfg())

    def test_loss_decreases_on_learnable_synthetic_task(self, toy_records, tmp_path):
        model = build_model(ModelSpec(family=ModelFamily.VLIGHT, width=32), seed=1)
        cfg = small_train_cfg(samples_total=1500, batch_size=6, lr_switch_samples=1200,
                              checkpoint_every=1500)
        sampler_cfg = small_sampler_cfg(patch_size=48, samples_total=1500, batch_size=6)
        geometric_only = AugmentConfig(rgb_shift=0.0, brightness_contrast=0.0, gamma=0.0)
        train(model, toy_records, sampler_cfg, geometric_only, cfg, out_dir=tmp_path)
        rows = (tmp_path / "loss_log.tsv").read_text().strip().splitlines()[1:]
        losses = [float(r.split("\t")[2]) for r in rows]
        untrained = float(np.mean(losses[:2]))
        last = float(np.mean(losses[-10:]))
        # clear decrease, and beats constant prior matching (~0.47 here):
        # the model discriminates vessels rather than predicting the base rate
        assert last < 0.65 * untrained, (untrained, last)
        assert last < 0.42, last


@pytest.mark.dataset
@pytest.mark.slow
@pytest.mark.skipif("VLIGHT_DRIVE_ROOT" not in os.environ,
                    reason="set VLIGHT_DRIVE_ROOT to run the DRIVE convergence smoke")
def test_drive_2000_sample_smoke():
    from vlight.data import DatasetKind, load_dataset, read_record

    index = load_dataset(os.environ["VLIGHT_DRIVE_ROOT"], DatasetKind.DRIVE)
    records = [read_record(index, rid) for rid in index.train_ids]
    model = build_model(ModelSpec(family=ModelFamily.VLIGHT), seed=0)
    cfg = TrainConfig(samples_total=2000, batch_size=10, lr_switch_samples=1600,
                      checkpoint_every=2000)
    sampler_cfg = SamplerConfig(patch_size=512, scale_range=(2.0, 4.0),
                                samples_total=2000, batch_size=10, seed=0)
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        train(model, records, sampler_cfg, AugmentConfig(), cfg, out_dir=tmp)
        rows = open(f"{tmp}/loss_log.tsv").read().strip().splitlines()[1:]
    losses = [float(r.split("\t")[2]) for r in rows]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
