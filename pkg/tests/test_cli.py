"""End-to-end command-line behavior via main(argv)."""

import numpy as np
import pytest

from warpfit.checkpoint import save_checkpoint
from warpfit.cli import main
from warpfit.data import render_digit
from warpfit.imaging import read_png_gray, write_png_gray
from warpfit.locnet import LocNetModel
from warpfit.matcher import MatcherModel


def write_micro_config(path, **overrides):
    lines = {
        "canvas_size": 64, "loc_input_size": 64, "digit_size": 28,
        "digit_bank_per_class": 2,
        "loc_train_size": 3, "loc_val_size": 2, "loc_test_size": 2,
        "match_train_size": 3, "match_val_size": 2, "match_test_size": 2,
        "eval_size": 2, "overlay_count": 1,
        "loc_epochs": 1, "match_epochs": 1,
        "loc_batch_size": 2, "match_batch_size": 2,
    }
    lines.update(overrides)
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return path


def save_untrained_models(paths_root, rng):
    """Fresh model checkpoints so register can run without training."""
    ckpt = paths_root / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    loc = LocNetModel(input_size=64, rng=rng)
    payload = {k: v.data for k, v in loc.tensors().items()}
    payload["meta.input_size"] = np.array([64.0], dtype=np.float32)
    save_checkpoint(ckpt / "locnet.wfck", payload)
    matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
    payload = {k: v.data for k, v in matcher.tensors().items()}
    payload["meta.input_size"] = np.array([28.0], dtype=np.float32)
    payload["meta.control_side"] = np.array([4.0], dtype=np.float32)
    save_checkpoint(ckpt / "matcher.wfck", payload)


class TestWarp:
    def test_identity_params_reproduce_mask(self, rng, tmp_path, capsys):
        mask = (render_digit(3, rng, 28) >= 0.5).astype(np.float32)
        write_png_gray(tmp_path / "in.png", mask)
        values = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] + [0.0] * 8  # K = 4
        (tmp_path / "p.txt").write_text(
            "# identity\n" + "".join(f"{v}\n" for v in values))
        code = main(["warp", "--mask", str(tmp_path / "in.png"),
                     "--params", str(tmp_path / "p.txt"),
                     "--out-png", str(tmp_path / "out.png")])
        assert code == 0
        out = read_png_gray(tmp_path / "out.png")
        np.testing.assert_allclose(out, mask, atol=2 / 255)

    def test_bad_param_count_fails(self, rng, tmp_path, capsys):
        write_png_gray(tmp_path / "in.png", np.ones((8, 8), dtype=np.float32))
        (tmp_path / "p.txt").write_text("1.0\n2.0\n")
        code = main(["warp", "--mask", str(tmp_path / "in.png"),
                     "--params", str(tmp_path / "p.txt"),
                     "--out-png", str(tmp_path / "out.png")])
        assert code == 1
        assert "error [warp]" in capsys.readouterr().err

    def test_non_square_grid_fails(self, rng, tmp_path, capsys):
        write_png_gray(tmp_path / "in.png", np.ones((8, 8), dtype=np.float32))
        values = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] + [0.0] * 6  # K = 3
        (tmp_path / "p.txt").write_text("".join(f"{v}\n" for v in values))
        code = main(["warp", "--mask", str(tmp_path / "in.png"),
                     "--params", str(tmp_path / "p.txt"),
                     "--out-png", str(tmp_path / "out.png")])
        assert code == 1
        assert "square" in capsys.readouterr().err

    def test_bad_float_reports_line(self, tmp_path, capsys):
        write_png_gray(tmp_path / "in.png", np.ones((8, 8), dtype=np.float32))
        (tmp_path / "p.txt").write_text("1.0\nnot-a-number\n")
        code = main(["warp", "--mask", str(tmp_path / "in.png"),
                     "--params", str(tmp_path / "p.txt"),
                     "--out-png", str(tmp_path / "out.png")])
        assert code == 1
        assert ":2:" in capsys.readouterr().err


class TestStageCommands:
    def test_gen_data_smoke(self, tmp_path, capsys):
        cfg = write_micro_config(tmp_path / "cfg.txt")
        code = main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "run")])
        assert code == 0
        root = tmp_path / "run" / "data"
        assert (root / "loc_train" / "manifest.csv").exists()
        assert (root / "match_train").is_dir()
        assert (root / "eval_pairs" / "manifest.csv").exists()

    def test_bad_config_key_fails_cleanly(self, tmp_path, capsys):
        p = tmp_path / "cfg.txt"
        p.write_text("definitely_not_a_key = 1\n")
        code = main(["gen-data", "--config", str(p)])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_invalid_config_value_fails_cleanly(self, tmp_path, capsys):
        cfg = write_micro_config(tmp_path / "cfg.txt", loc_lr=-0.5)
        code = main(["gen-data", "--config", str(cfg)])
        assert code == 1

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_train_without_data_names_stage(self, tmp_path, capsys):
        cfg = write_micro_config(tmp_path / "cfg.txt")
        code = main(["train-locnet", "--config", str(cfg),
                     "--out", str(tmp_path / "empty-run")])
        assert code == 1
        assert "error [train-locnet]" in capsys.readouterr().err


class TestRegister:
    def test_register_with_untrained_checkpoints(self, rng, tmp_path, capsys):
        run = tmp_path / "run"
        save_untrained_models(run, rng)
        cfg = write_micro_config(tmp_path / "cfg.txt")
        moving = np.zeros((64, 64), dtype=np.float32)
        digit = render_digit(5, rng, 28)
        moving[18:46, 18:46] = digit
        fixed = np.zeros((64, 64), dtype=np.float32)
        fixed[4:32, 30:58] = render_digit(5, rng, 28)
        for name, img in (("moving", moving), ("fixed", fixed),
                          ("mask", (moving >= 0.5).astype(np.float32))):
            write_png_gray(tmp_path / f"{name}.png", img)
        code = main(["register", "--config", str(cfg), "--out", str(run),
                     "--moving", str(tmp_path / "moving.png"),
                     "--moving-mask", str(tmp_path / "mask.png"),
                     "--fixed", str(tmp_path / "fixed.png")])
        assert code == 0
        out = run / "register"
        assert (out / "overlay.png").exists()
        assert (out / "warped.png").exists()
        record = (out / "record.csv").read_text().splitlines()
        assert record[0].startswith("moving,fixed,dc,miou")
        assert len(record) == 2
        assert "DC" in capsys.readouterr().out

    def test_register_skip_localization(self, rng, tmp_path, capsys):
        run = tmp_path / "run"
        save_untrained_models(run, rng)
        moving = np.zeros((64, 64), dtype=np.float32)
        moving[18:46, 18:46] = render_digit(7, rng, 28)
        write_png_gray(tmp_path / "m.png", moving)
        write_png_gray(tmp_path / "k.png", (moving >= 0.5).astype(np.float32))
        write_png_gray(tmp_path / "f.png", moving)
        code = main(["register", "--out", str(run), "--skip-localization",
                     "--moving", str(tmp_path / "m.png"),
                     "--moving-mask", str(tmp_path / "k.png"),
                     "--fixed", str(tmp_path / "f.png")])
        assert code == 0
        row = (run / "register" / "record.csv").read_text().splitlines()[1]
        assert row.endswith(",0")  # no fallback on the skip path

    def test_register_missing_checkpoint_fails(self, rng, tmp_path, capsys):
        write_png_gray(tmp_path / "m.png", np.ones((64, 64), dtype=np.float32))
        code = main(["register", "--out", str(tmp_path / "nowhere"),
                     "--moving", str(tmp_path / "m.png"),
                     "--moving-mask", str(tmp_path / "m.png"),
                     "--fixed", str(tmp_path / "m.png")])
        assert code == 1
        assert "error [register]" in capsys.readouterr().err
