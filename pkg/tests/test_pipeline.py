import json
import math

import numpy as np
import pytest
import torch

from msflow.pipeline import checkpoint as ckpt_io
from msflow.pipeline import config as config_io
from msflow.pipeline.cli import cli
from msflow.pipeline.data import DatasetSpec, build_dataset, load_image_folder, preprocess, synthetic_dataset


class TestPreprocess:
    def test_crop_and_resize_geometry(self):
        from PIL import Image

        img = Image.new("RGB", (480, 320), color=(128, 128, 128))
        out = preprocess(img, 256)
        assert out.shape == (3, 256, 256)

    def test_square_target_size_is_rescale_only(self):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        out = preprocess(arr, 64)
        expected = (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
        assert np.array_equal(out, expected)

    def test_white_maps_to_one(self):
        arr = np.full((32, 32, 3), 255, dtype=np.uint8)
        out = preprocess(arr, 32)
        assert np.all(out == 1.0)

    def test_black_maps_to_minus_one(self):
        arr = np.zeros((32, 32, 3), dtype=np.uint8)
        assert np.all(preprocess(arr, 32) == -1.0)

    def test_too_small_rejected(self):
        from PIL import Image

        with pytest.raises(ValueError):
            preprocess(Image.new("RGB", (8, 8)), 64)


class TestSyntheticDataset:
    def test_bit_identical_for_same_seed(self):
        a = synthetic_dataset(64, 64, seed=7)
        b = synthetic_dataset(64, 64, seed=7)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = synthetic_dataset(8, 32, seed=1)
        b = synthetic_dataset(8, 32, seed=2)
        assert not np.array_equal(a, b)

    def test_value_range(self):
        arr = synthetic_dataset(32, 32, seed=0)
        assert arr.min() >= -1.0 and arr.max() <= 1.0
        assert arr.dtype == np.float32

    def test_frequency_bands_span_two_octaves(self):
        # dominant radial-octave band per image should vary across the set
        arr = synthetic_dataset(64, 64, seed=3)
        dominant = []
        for img in arr:
            gray = img.mean(axis=0)
            spectrum = np.abs(np.fft.fftshift(np.fft.fft2(gray - gray.mean()))) ** 2
            h, w = spectrum.shape
            yy, xx = np.mgrid[0:h, 0:w]
            radius = np.hypot(yy - h / 2, xx - w / 2)
            octave = np.floor(np.log2(np.maximum(radius, 1e-9))).astype(int)
            bands = {}
            for o in range(0, int(math.log2(min(h, w)))):
                mask = octave == o
                if mask.any():
                    bands[o] = spectrum[mask].sum()
            dominant.append(max(bands, key=bands.get))
        assert max(dominant) - min(dominant) >= 2

    def test_invalid_count_rejected(self):
        with pytest.raises(ValueError):
            synthetic_dataset(0, 32, seed=0)


class TestDatasetBuild:
    def test_splits_are_disjoint_draws(self):
        train = build_dataset("synthetic_textures", 16, "train", num_images=8, seed=0)
        val = build_dataset("synthetic_textures", 16, "val", num_images=8, seed=0)
        assert train.shape == val.shape == (8, 3, 16, 16)
        assert not torch.equal(train, val)

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(kind="cifar")

    def test_image_folder_round_trip(self, tmp_path):
        from PIL import Image

        for i in range(3):
            Image.new("RGB", (40, 40), color=(i * 40, 10, 10)).save(tmp_path / f"img{i}.png")
        (tmp_path / "broken.png").write_bytes(b"not an image")
        arr = load_image_folder(tmp_path, 16)
        assert arr.shape == (3, 3, 16, 16)  # corrupt file skipped with a log


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "encoder/w": rng.normal(size=(4, 5)).astype(np.float32),
            "decoder/b": rng.normal(size=(7,)).astype(np.float64),
            "decoder/idx": np.arange(5, dtype=np.int64),
        }
        path = ckpt_io.save_checkpoint(tmp_path / "x.ckpt", tensors, meta={"kind": "stage1", "step": 12})
        loaded = ckpt_io.load_checkpoint(path)
        assert loaded.step == 12 and loaded.kind == "stage1"
        for name, arr in tensors.items():
            assert np.array_equal(loaded.tensors[name], arr)
            assert loaded.tensors[name].dtype == arr.dtype

    def test_corruption_detected(self, tmp_path):
        path = ckpt_io.save_checkpoint(tmp_path / "x.ckpt", {"g/w": np.ones(16, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ckpt_io.CheckpointIntegrityError):
            ckpt_io.load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path, monkeypatch):
        monkeypatch.setattr(ckpt_io, "FORMAT_VERSION", 99)
        path = ckpt_io.save_checkpoint(tmp_path / "x.ckpt", {"g/w": np.ones(4, dtype=np.float32)})
        monkeypatch.undo()
        with pytest.raises(ckpt_io.CheckpointVersionError):
            ckpt_io.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = ckpt_io.save_checkpoint(tmp_path / "x.ckpt", {"g/w": np.ones(64, dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(ckpt_io.CheckpointIntegrityError):
            ckpt_io.load_checkpoint(path)

    def test_module_round_trip(self, tmp_path):
        module = torch.nn.Linear(4, 3)
        path = ckpt_io.save_checkpoint(tmp_path / "m.ckpt", ckpt_io.module_arrays("decoder", module))
        loaded = ckpt_io.load_checkpoint(path)
        fresh = torch.nn.Linear(4, 3)
        ckpt_io.load_module(fresh, loaded, "decoder")
        assert torch.equal(fresh.weight, module.weight)
        assert torch.equal(fresh.bias, module.bias)

    def test_missing_group_rejected(self, tmp_path):
        path = ckpt_io.save_checkpoint(tmp_path / "m.ckpt", {"encoder/w": np.ones(2, dtype=np.float32)})
        loaded = ckpt_io.load_checkpoint(path)
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.load_module(torch.nn.Linear(1, 1), loaded, "decoder")

    def test_optimizer_round_trip(self, tmp_path):
        module = torch.nn.Linear(4, 3)
        opt = torch.optim.AdamW(module.parameters(), lr=1e-3)
        module(torch.randn(2, 4)).sum().backward()
        opt.step()
        tensors, meta = ckpt_io.optimizer_arrays("optimizer", opt)
        path = ckpt_io.save_checkpoint(tmp_path / "o.ckpt", tensors, meta={"optimizer": meta})
        loaded = ckpt_io.load_checkpoint(path)
        fresh = torch.optim.AdamW(module.parameters(), lr=1e-3)
        ckpt_io.load_optimizer(fresh, loaded, "optimizer")
        for pid, state in opt.state_dict()["state"].items():
            for key, val in state.items():
                other = fresh.state_dict()["state"][pid][key]
                if torch.is_tensor(val):
                    assert torch.equal(val, other)
                else:
                    assert val == other


TINY_CONFIG = {
    "model": {"width": 32, "depth": 1, "heads": 2, "patch_size": 4,
              "num_latent_tokens": 4, "latent_token_dim": 8, "encoder_depth": 1},
    "schedule": {"base_resolution": 8, "num_stages": 2, "steps_per_stage": [2, 2]},
    "stage1": {"max_steps": 4, "batch_size": 8, "log_every": 1, "val_every": 0, "ckpt_every": 0},
    "distill": {"max_steps": 2, "batch_size": 8, "log_every": 1, "val_every": 0, "ckpt_every": 0},
    "data": {"resolution": 16, "num_train": 16, "num_val": 8},
    "seed": 0,
}


def write_tiny_config(tmp_path, **extra):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_defaults_validate(self):
        config_io.load_run_config(None, [])

    def test_overrides(self, tmp_path):
        path = write_tiny_config(tmp_path)
        config = config_io.load_run_config(path, ["stage1.max_steps=7", "distill.lambda_perc=0.25"])
        assert config.stage1.max_steps == 7
        assert config.distill.lambda_perc == 0.25

    def test_schedule_data_mismatch_rejected(self, tmp_path):
        path = write_tiny_config(tmp_path)
        with pytest.raises(ValueError):
            config_io.load_run_config(path, ["data.resolution=64"])

    def test_unknown_key_rejected(self, tmp_path):
        path = write_tiny_config(tmp_path)
        with pytest.raises((ValueError, TypeError)):
            config_io.load_run_config(path, ["stage1.bogus_field=1"])

    def test_fingerprint_tracks_content(self, tmp_path):
        path = write_tiny_config(tmp_path)
        a = config_io.fingerprint(config_io.load_run_config(path, []))
        b = config_io.fingerprint(config_io.load_run_config(path, ["seed=1"]))
        c = config_io.fingerprint(config_io.load_run_config(path, []))
        assert a == c and a != b

    def test_resolved_config_round_trips(self, tmp_path):
        path = write_tiny_config(tmp_path)
        config = config_io.load_run_config(path, [])
        written = config_io.write_resolved(config, tmp_path / "out")
        reloaded = config_io.load_run_config(written, [])
        assert config_io.fingerprint(reloaded) == config_io.fingerprint(config)


class TestCli:
    def test_usage_error_exit_code(self, capsys):
        assert cli(["--bogus"]) == 2
        assert cli(["unknown-command"]) == 2
        assert cli(["distill"]) == 2  # missing required --teacher
        capsys.readouterr()

    def test_runtime_failure_exit_code(self, tmp_path, capsys):
        path = write_tiny_config(tmp_path)
        code = cli(["distill", "--config", str(path), "--teacher", str(tmp_path / "missing.ckpt"),
                    "--out-dir", str(tmp_path / "out")])
        captured = capsys.readouterr()
        assert code == 1
        assert "Traceback" in captured.err or "Error" in captured.err

    def test_train_distill_reconstruct_eval_bench(self, tmp_path, capsys):
        config_path = write_tiny_config(tmp_path)
        out = tmp_path / "run"

        assert cli(["train", "--config", str(config_path), "--out-dir", str(out)]) == 0
        teacher = out / "stage1_final.ckpt"
        assert teacher.exists()
        assert (out / "config.json").exists()
        assert (out / "stage1_log.jsonl").exists()

        assert cli(["distill", "--config", str(config_path), "--teacher", str(teacher),
                    "--out-dir", str(out / "s2")]) == 0
        student = out / "s2" / "distill_final.ckpt"
        assert student.exists()

        assert cli(["reconstruct", "--config", str(config_path), "--checkpoint", str(teacher),
                    "--num", "2", "--out-dir", str(out / "rec")]) == 0
        assert (out / "rec" / "reconstructions.png").exists()
        sidecar = json.loads((out / "rec" / "reconstructions.json").read_text())
        assert sidecar["forward_passes"] == 8  # 4 total steps, guidance doubles
        assert len(sidecar["psnr"]) == 2

        capsys.readouterr()
        assert cli(["eval", "--config", str(config_path), "--checkpoint", str(teacher),
                    "--num", "8", "--out-dir", str(out / "ev")]) == 0
        report = json.loads((out / "ev" / "metrics.json").read_text())
        assert {"rfid", "psnr_mean", "ssim_mean", "throughput", "forward_pass_count"} <= set(report)

        capsys.readouterr()
        assert cli(["bench", "--config", str(config_path), "--teacher", str(teacher),
                    "--student", str(student), "--batches", "1", "--batch-size", "4",
                    "--out-dir", str(out / "bench")]) == 0
        bench = json.loads((out / "bench" / "bench.json").read_text())
        assert bench["teacher"]["forward_passes_per_image"] == 4
        assert bench["student"]["forward_passes_per_image"] == 2
        assert bench["speedup"]["forward_pass_ratio"] == 2.0

    def test_sweep_produces_complete_csv(self, tmp_path, capsys):
        config_path = write_tiny_config(tmp_path)
        out = tmp_path / "sweep"
        code = cli(["sweep", "--config", str(config_path), "--out-dir", str(out),
                    "--axis", "lambda_perc=0.1,0.5", "--axis", "cfg=1",
                    "--stage1-steps", "2", "--distill-steps", "1", "--eval-images", "4"])
        capsys.readouterr()
        assert code == 0
        rows = (out / "sweep.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + 2 cells
        header = rows[0].split(",")
        assert {"scales", "cfg", "lambda_perc", "rfid", "psnr", "ssim", "throughput"} <= set(header)
        for row in rows[1:]:
            assert all(cell != "" for cell in row.split(","))
