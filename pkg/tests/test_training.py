import json

import numpy as np
import pytest
import torch
from PIL import Image

from kspi.ksp import read_ksp, write_ksp
from kspi.training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    train,
)
from kspi.unfolding import HatnetConfig, build_hatnet


@pytest.fixture
def image_dir(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(4):
        arr = (rng.random((48, 48)) * 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(d / f"img{i}.png")
    return d


def tiny_net():
    return HatnetConfig(n_r=16, n_c=16, m_r=8, m_c=8, stages=1, channels=8)


def tiny_train(image_dir, **kw):
    base = dict(
        data_dir=str(image_dir),
        crop=16,
        dataset_size=8,
        val_images=2,
        epochs_main=2,
        lr_main=1e-3,
        epochs_finetune=1,
        lr_finetune=1e-4,
        batch_size=4,
        sr=0.25,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestMseLoss:
    def test_identical_zero(self):
        x = torch.randn(2, 1, 8, 8)
        assert mse_loss(x, x).item() == 0.0

    def test_unit_offset(self):
        x = torch.randn(2, 1, 8, 8)
        assert mse_loss(x + 1.0, x).item() == pytest.approx(1.0, abs=1e-6)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((3, 5))
        ours = mse_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(ours - ref) <= 1e-8

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            mse_loss(torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 4, 5))


class TestTrainConfig:
    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(data_dir="x", lr_main=0)
        with pytest.raises(ValueError):
            TrainConfig(data_dir="x", epochs_main=-1)
        with pytest.raises(ValueError):
            TrainConfig(data_dir="x", crop=10)
        with pytest.raises(ValueError):
            TrainConfig(data_dir="x", sr=1.5)

    def test_lr_schedule_boundary(self):
        cfg = TrainConfig(data_dir="x", epochs_main=3, epochs_finetune=2)
        assert [cfg.lr_for_epoch(e) for e in range(5)] == [1e-3] * 3 + [1e-4] * 2


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = build_hatnet(tiny_net(), seed=3)
        save_checkpoint(tmp_path / "ckpt", model, seed=3)
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["stages"] == 1
        for name, ref in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], ref), name

    def test_shape_validation(self, tmp_path):
        model = build_hatnet(tiny_net(), seed=3)
        save_checkpoint(tmp_path / "ckpt", model, seed=3)
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        rel = manifest["tensors"]["rho"]
        write_ksp(tmp_path / "ckpt" / rel, np.zeros(7, dtype=np.float32))
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(tmp_path / "ckpt")

    def test_non_checkpoint_rejected(self, tmp_path):
        from kspi.ksp import save_tensor_dir

        save_tensor_dir(tmp_path / "d", {"x": np.zeros(2)}, {"kind": "other"})
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(tmp_path / "d")


class TestTrain:
    def test_zero_epochs_checkpoint_equals_initialization(self, image_dir, tmp_path):
        cfg = tiny_train(image_dir, epochs_main=0, epochs_finetune=0)
        result = train(cfg, tiny_net(), tmp_path / "run")
        trained, _ = load_checkpoint(result.last_dir)
        fresh = build_hatnet(tiny_net(), seed=cfg.seed)
        for name, ref in fresh.state_dict().items():
            assert torch.equal(trained.state_dict()[name], ref), name

    def test_smoke_loss_decreases(self, image_dir, tmp_path):
        cfg = tiny_train(image_dir, epochs_main=10, epochs_finetune=0)
        result = train(cfg, tiny_net(), tmp_path / "run")
        assert result.rows[-1].train_loss < result.rows[0].train_loss

    def test_log_schema_and_phase_boundary(self, image_dir, tmp_path):
        cfg = tiny_train(image_dir)
        result = train(cfg, tiny_net(), tmp_path / "run")
        lines = result.log_path.read_text().strip().splitlines()
        assert lines[0] == "epoch,phase,lr,train_loss,val_psnr"
        assert len(lines) == 1 + cfg.total_epochs
        phases = [row.phase for row in result.rows]
        assert phases == ["main"] * cfg.epochs_main + ["finetune"] * cfg.epochs_finetune

    def test_resume_reproduces_next_epoch_bitwise(self, image_dir, tmp_path):
        full_cfg = tiny_train(image_dir, epochs_main=3, epochs_finetune=0)
        full = train(full_cfg, tiny_net(), tmp_path / "full")

        part_cfg = tiny_train(image_dir, epochs_main=2, epochs_finetune=0)
        part = train(part_cfg, tiny_net(), tmp_path / "part")
        resumed = train(full_cfg, tiny_net(), tmp_path / "resumed", resume_from=part.last_dir)

        assert len(resumed.rows) == 1
        assert resumed.rows[0].epoch == 2
        assert resumed.rows[0].train_loss == full.rows[2].train_loss

    def test_divergence_aborts_with_location(self, image_dir, tmp_path):
        cfg = tiny_train(image_dir, lr_main=1e8, epochs_main=5, epochs_finetune=0)
        with pytest.raises(TrainingDiverged) as exc:
            train(cfg, tiny_net(), tmp_path / "run")
        assert exc.value.epoch >= 0 and exc.value.step >= 0

    def test_first_step_loss_bitwise_reproducible(self, image_dir, tmp_path):
        cfg = tiny_train(image_dir, epochs_main=1, epochs_finetune=0)
        a = train(cfg, tiny_net(), tmp_path / "a")
        b = train(cfg, tiny_net(), tmp_path / "b")
        assert a.rows[0].train_loss == b.rows[0].train_loss


class TestEvaluate:
    def make_exact_checkpoint(self, tmp_path):
        # Full sampling + zero denoiser bodies: the network output equals the
        # ground truth, so metrics hit their ideal values.
        cfg = HatnetConfig(n_r=16, n_c=16, m_r=16, m_c=16, stages=1, channels=8,
                           scheme="hadamard_cc")
        model = build_hatnet(cfg, seed=0)
        with torch.no_grad():
            for p in model.denoisers.parameters():
                p.zero_()
        save_checkpoint(tmp_path / "exact", model, seed=0)
        return tmp_path / "exact"

    @pytest.fixture
    def test_dir(self, tmp_path):
        rng = np.random.default_rng(5)
        d = tmp_path / "test_imgs"
        d.mkdir()
        for i in range(3):
            arr = (rng.random((16, 16)) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(d / f"t{i}.png")
        return d

    def test_exact_model_reaches_ideal_metrics(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        report = evaluate(ckpt, test_dir)
        hat = report.method("hatnet")
        # The network runs at float32, so lossless means ~1e-7 relative error.
        assert hat.mean_ssim == pytest.approx(1.0, abs=1e-7)
        assert hat.mean_psnr > 100.0

    def test_adjoint_row_always_present(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        report = evaluate(ckpt, test_dir)
        assert report.method("adjoint") is not None

    def test_mean_matches_per_image_mean(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        report = evaluate(ckpt, test_dir)
        adj = report.method("adjoint")
        assert adj.mean_psnr == pytest.approx(np.mean(adj.psnr_values), abs=1e-9)

    def test_sr_mismatch_rejected(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        with pytest.raises(ValueError, match="sr"):
            evaluate(ckpt, test_dir, sr=0.25)

    def test_report_serialization(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        report = evaluate(ckpt, test_dir)
        report.to_json(tmp_path / "r.json")
        report.to_csv(tmp_path / "r.csv")
        payload = json.loads((tmp_path / "r.json").read_text())
        assert {m["method"] for m in payload["methods"]} == {"adjoint", "hatnet"}
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "method,image,psnr,ssim"
        # one row per image plus a mean row, per method
        assert len(lines) == 1 + 2 * (3 + 1)

    def test_per_stage_psnr_reported(self, tmp_path, test_dir):
        ckpt = self.make_exact_checkpoint(tmp_path)
        report = evaluate(ckpt, test_dir)
        stages = report.method("hatnet").stage_mean_psnr
        assert stages is not None and len(stages) == 1
