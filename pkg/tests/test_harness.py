"""Dataset generation, checkpoints, config handling, trainer, CLI."""

import os

import numpy as np
import pytest

from avcc.checkpoint import load_checkpoint, save_checkpoint
from avcc.cli import main as cli_main
from avcc.config import GEOMETRIES, Config, make_config
from avcc.data import (SceneDataset, generate_dataset, read_ppm,
                       synth_crowd_audio, write_ppm)
from avcc.errors import CheckpointError, ConfigError
from avcc.model import build_model
from avcc.nn import seed_stream
from avcc.optim import Adam, lr_schedule
from avcc.tensor import Tensor
from avcc.train import Trainer, evaluate


def tiny_dataset(tmp_path, n=6, seed=0, counts=(2, 8)):
    out = tmp_path / f"data_{n}_{seed}"
    generate_dataset(str(out), n, counts, seed, GEOMETRIES["toy"])
    return str(out)


def tiny_config(tmp_path, data_dir, **kw):
    defaults = dict(geometry="toy", epochs=1, batch_size=2, lr=1e-4,
                    dropout=0.0, data_dir=data_dir,
                    out_dir=str(tmp_path / "run"), eval_every=1, seed=5)
    defaults.update(kw)
    return Config(**defaults)


class TestSyntheticAudio:
    def test_rms_monotone_in_count_for_fixed_seed(self):
        # identical noise/distractor draws, only the count changes
        rms = []
        for count in (1, 5, 20, 50):
            w = synth_crowd_audio(count, np.random.default_rng(77))
            rms.append(float(np.sqrt(np.mean(w**2))))
        assert all(b > a for a, b in zip(rms, rms[1:]))

    def test_rms_of_50_exceeds_5_after_disk_roundtrip(self, tmp_path):
        from avcc.audio import read_wav, write_wav

        values = {}
        for count in (5, 50):
            w = np.clip(synth_crowd_audio(count, np.random.default_rng(3)), -1, 1)
            path = tmp_path / f"{count}.wav"
            write_wav(path, w)
            back = read_wav(path).samples
            values[count] = float(np.sqrt(np.mean(back**2)))
        assert values[50] > values[5]


class TestDatasetGeneration:
    def test_empty_dataset(self, tmp_path):
        out = tmp_path / "empty"
        manifest = generate_dataset(str(out), 0, (1, 5), 0, GEOMETRIES["toy"])
        data = SceneDataset(str(out))
        assert len(data) == 0
        assert os.path.exists(manifest)

    def test_fixed_count_range(self, tmp_path):
        out = tmp_path / "five"
        generate_dataset(str(out), 4, (5, 5), 1, GEOMETRIES["toy"])
        data = SceneDataset(str(out))
        for i in range(4):
            assert len(data.points(i)) == 5

    def test_files_and_manifest(self, tmp_path):
        path = tiny_dataset(tmp_path, n=3)
        data = SceneDataset(path)
        assert len(data) == 3
        assert data.meta["geometry"] == "toy"
        img = data.image(0)
        assert img.shape == (3, 64, 36)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert data.log_mel(0).shape == (64, 96)

    def test_generation_is_reproducible(self, tmp_path):
        a = tiny_dataset(tmp_path, n=3, seed=9)
        b_dir = tmp_path / "copy"
        generate_dataset(str(b_dir), 3, (2, 8), 9, GEOMETRIES["toy"])
        for name in sorted(os.listdir(a)):
            with open(os.path.join(a, name), "rb") as fa, \
                 open(os.path.join(b_dir, name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_annotation_count_matches_blob_count(self, tmp_path):
        path = tiny_dataset(tmp_path, n=5, counts=(3, 12))
        data = SceneDataset(path)
        for i in range(5):
            assert 3 <= len(data.points(i)) <= 12

    def test_audio_open_audit(self, tmp_path):
        path = tiny_dataset(tmp_path, n=2)
        data = SceneDataset(path, load_audio=False)
        assert data.log_mel(0) is None
        assert data.audio_opens == 0
        data2 = SceneDataset(path, load_audio=True)
        data2.log_mel(0)
        data2.log_mel(0)  # cached: one open
        assert data2.audio_opens == 1

    def test_ppm_roundtrip(self, tmp_path, rng):
        img = rng.random((3, 16, 9))
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (3, 16, 9)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9


class TestConfig:
    def test_unknown_geometry(self):
        with pytest.raises(ConfigError):
            Config(geometry="huge")

    def test_file_plus_override(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("geometry=toy\nlr=0.001\nno_pir=true\n# comment\n")
        cfg = make_config(str(path), lr=0.01)
        assert cfg.geometry == "toy"
        assert cfg.lr == 0.01  # explicit override wins
        assert cfg.no_pir is True

    def test_bad_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("warp_speed=9\n")
        with pytest.raises(ConfigError):
            make_config(str(path))

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AVCC_SEED", "321")
        cfg = Config(seed=7)
        assert cfg.seed == 321

    def test_lr_schedule_frozen_value(self):
        assert abs(lr_schedule(1e-5, 0.99, 10) - 9.04382075008804e-06) < 1e-18

    def test_ablation_flags_reach_distinct_architectures(self):
        rows = {
            "explicit_off": dict(no_pir=True, no_pce=True),
            "no_pir": dict(no_pir=True),
            "no_pce": dict(no_pce=True),
            "no_avt": dict(no_avt=True),
            "no_ccm": dict(no_ccm=True),
            "no_audio_in_fusion": dict(no_audio_in_fusion=True),
            "single_branch": dict(single_branch=True),
        }
        seen = {}
        for name, flags in rows.items():
            cfg = Config(geometry="toy", **flags)
            model = build_model(cfg)
            key = (model.parameter_count(), cfg.active_losses(),
                   model.combiner is not None, cfg.no_ccm)
            assert key not in seen, f"{name} collides with {seen.get(key)}"
            seen[key] = name


class TestCheckpoint:
    def test_roundtrip_restores_parameters(self, tmp_path, rng):
        cfg = Config(geometry="toy", dropout=0.0)
        model = build_model(cfg, seed=seed_stream(1))
        path = str(tmp_path / "m.avcc")
        opt = Adam(model.named_parameters())
        save_checkpoint(path, model, epoch=3, optimizer=opt,
                        rng=np.random.default_rng(5))
        model2 = build_model(cfg, seed=seed_stream(2))
        opt2 = Adam(model2.named_parameters())
        epoch, rng_state = load_checkpoint(path, model2, opt2)
        assert epoch == 3
        assert rng_state is not None
        for (n1, p1), (n2, p2) in zip(model.named_parameters(),
                                      model2.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data.astype(np.float32),
                                          p2.data.astype(np.float32))

    def test_save_load_save_is_byte_identical(self, tmp_path):
        cfg = Config(geometry="toy", dropout=0.0)
        model = build_model(cfg, seed=seed_stream(1))
        opt = Adam(model.named_parameters())
        p1 = str(tmp_path / "a.avcc")
        p2 = str(tmp_path / "b.avcc")
        rng_state = np.random.default_rng(5)
        save_checkpoint(p1, model, epoch=1, optimizer=opt, rng=rng_state)
        model2 = build_model(cfg, seed=seed_stream(9))
        opt2 = Adam(model2.named_parameters())
        rng2 = np.random.default_rng(0)
        _, state = load_checkpoint(p1, model2, opt2)
        rng2.bit_generator.state = state
        save_checkpoint(p2, model2, epoch=1, optimizer=opt2, rng=rng2)
        with open(p1, "rb") as fa, open(p2, "rb") as fb:
            assert fa.read() == fb.read()

    def test_magic_is_avcc1(self, tmp_path):
        cfg = Config(geometry="toy")
        model = build_model(cfg)
        path = str(tmp_path / "m.avcc")
        save_checkpoint(path, model)
        with open(path, "rb") as fh:
            assert fh.read(5) == b"AVCC1"

    def test_shape_mismatch_detected(self, tmp_path):
        cfg = Config(geometry="toy")
        model = build_model(cfg)
        path = str(tmp_path / "m.avcc")
        save_checkpoint(path, model)
        other = build_model(Config(geometry="low_res"))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other)


class TestTrainerAndEvaluate:
    def test_one_epoch_smoke(self, tmp_path):
        data = tiny_dataset(tmp_path, n=4)
        cfg = tiny_config(tmp_path, data)
        trainer = Trainer(cfg)
        logs = trainer.train()
        assert len(logs) == 1
        assert np.isfinite(logs[0].report.total)
        assert os.path.exists(os.path.join(cfg.out_dir, "metrics.log"))
        assert os.path.exists(os.path.join(cfg.out_dir, "checkpoint_final.avcc"))

    def test_reproducible_at_one_thread(self, tmp_path):
        data = tiny_dataset(tmp_path, n=4)
        blobs = []
        for run in ("r1", "r2"):
            cfg = tiny_config(tmp_path, data, epochs=2, dropout=0.3,
                              out_dir=str(tmp_path / run), threads=1)
            Trainer(cfg).train()
            with open(os.path.join(cfg.out_dir, "metrics.log"), "rb") as fh:
                log = fh.read()
            with open(os.path.join(cfg.out_dir, "checkpoint_final.avcc"), "rb") as fh:
                ckpt = fh.read()
            blobs.append((log, ckpt))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]

    def test_threads_mode_runs(self, tmp_path):
        data = tiny_dataset(tmp_path, n=4)
        cfg = tiny_config(tmp_path, data, threads=2)
        logs = Trainer(cfg).train()
        assert np.isfinite(logs[0].report.total)

    def test_image_only_mode_never_opens_audio(self, tmp_path):
        data = tiny_dataset(tmp_path, n=4)
        cfg = tiny_config(tmp_path, data, cc_v=True)
        trainer = Trainer(cfg)
        trainer.train()
        assert trainer.data.audio_opens == 0

    def test_evaluate_is_deterministic(self, tmp_path):
        data = tiny_dataset(tmp_path, n=4)
        cfg = tiny_config(tmp_path, data)
        Trainer(cfg).train()
        ckpt = os.path.join(cfg.out_dir, "checkpoint_final.avcc")
        a = evaluate(cfg, checkpoint=ckpt)
        b = evaluate(cfg, checkpoint=ckpt)
        assert a == b

    def test_evaluate_none_equals_zero_sigma(self, tmp_path):
        from avcc.groundtruth import DegradationSpec

        data = tiny_dataset(tmp_path, n=3)
        cfg = tiny_config(tmp_path, data)
        plain = evaluate(cfg)
        zero = evaluate(cfg, degradation=DegradationSpec("gaussian_noise",
                                                         sigma=0.0))
        assert plain == zero

    def test_or_sweep_emits_one_row_per_rate(self, tmp_path):
        data = tiny_dataset(tmp_path, n=3)
        cfg = tiny_config(tmp_path, data)
        report = evaluate(cfg, or_sweep=[0.0, 0.25, 0.5, 0.75, 1.0])
        rows = [l for l in report.splitlines() if l.startswith("or=")]
        assert len(rows) == 5


class TestCli:
    def test_gen_train_eval_infer_pipeline(self, tmp_path, capsys):
        data = str(tmp_path / "d")
        assert cli_main(["gen-data", "--out", data, "--n", "3",
                         "--count-min", "2", "--count-max", "5",
                         "--seed", "1", "--geometry", "toy"]) == 0
        run = str(tmp_path / "run")
        assert cli_main(["train", "--geometry", "toy", "--epochs", "1",
                         "--batch-size", "2", "--dropout", "0.0",
                         "--data-dir", data, "--out-dir", run,
                         "--seed", "3"]) == 0
        ckpt = os.path.join(run, "checkpoint_final.avcc")
        assert cli_main(["eval", "--geometry", "toy", "--data-dir", data,
                         "--checkpoint", ckpt]) == 0
        out = str(tmp_path / "infer")
        assert cli_main(["infer", "--geometry", "toy", "--data-dir", data,
                         "--checkpoint", ckpt, "--index", "0",
                         "--out", out, "--dump-lms"]) == 0
        assert os.path.exists(os.path.join(out, "density.pgm"))
        assert os.path.exists(os.path.join(out, "density.dmp"))
        assert os.path.exists(os.path.join(out, "patch_importance.txt"))
        assert os.path.exists(os.path.join(out, "patch_counts.txt"))
        assert os.path.exists(os.path.join(out, "features.lms"))
        captured = capsys.readouterr()
        assert "count=" in captured.out

    def test_corrupt_then_infer_on_black_input(self, tmp_path, capsys):
        data = str(tmp_path / "d2")
        cli_main(["gen-data", "--out", data, "--n", "2", "--seed", "2",
                  "--geometry", "toy"])
        dark = str(tmp_path / "dark")
        assert cli_main(["corrupt", "--src", data, "--out", dark,
                         "--degrade", "occlusion",
                         "--occlusion-rate", "1.0"]) == 0
        img = SceneDataset(dark).image(0)
        np.testing.assert_array_equal(img, 0.0)
        out = str(tmp_path / "infer2")
        assert cli_main(["infer", "--geometry", "toy", "--data-dir", dark,
                         "--index", "0", "--out", out]) == 0

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["train", "--warp", "9"])
        assert exc.value.code == 2

    def test_missing_dataset_is_one_line_error(self, tmp_path, capsys):
        code = cli_main(["train", "--geometry", "toy",
                         "--data-dir", str(tmp_path / "nope"),
                         "--out-dir", str(tmp_path / "r")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert err.count("\n") == 1
