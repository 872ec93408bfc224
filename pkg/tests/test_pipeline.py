"""Pipeline plumbing: paths, single-pair registration, stages, streams."""

import numpy as np
import pytest

from warpfit.config import ExperimentConfig
from warpfit.data import gen_composites, synth_digit_bank
from warpfit.errors import DimensionError, PipelineError
from warpfit.locnet import LocNetModel
from warpfit.matcher import MatcherModel
from warpfit.pipeline import (ExperimentPaths, RegistrationRecord,
                              _downsampled_pairs, _stream, canvas_scores,
                              register_pair, run_experiment, stage_gen_data)


def micro_config(**overrides):
    base = dict(
        canvas_size=64, loc_input_size=64, digit_size=28,
        digit_bank_per_class=2,
        loc_train_size=3, loc_val_size=2, loc_test_size=2,
        match_train_size=3, match_val_size=2, match_test_size=2,
        eval_size=2, overlay_count=1,
        loc_epochs=1, match_epochs=1, loc_batch_size=2, match_batch_size=2,
    )
    base.update(overrides)
    cfg = ExperimentConfig(**base)
    cfg.validate()
    return cfg


@pytest.fixture
def scene(rng):
    """One displaced single-digit pair at 64 px plus its ground truth."""
    digits, labels = synth_digit_bank(2, rng)
    (s,) = gen_composites("/unused", digits, labels, 1, rng, canvas_size=64,
                          distractors=(0, 0), write_files=False,
                          condition_moving=False)
    return s


class TestPaths:
    def test_layout(self, tmp_path):
        p = ExperimentPaths(tmp_path / "run")
        assert p.dataset("loc_train") == tmp_path / "run" / "data" / "loc_train"
        assert p.manifest("x") == tmp_path / "run" / "data" / "x" / "manifest.csv"
        assert p.locnet_ckpt.name == "locnet.wfck"
        assert p.matcher_ckpt.parent == p.checkpoints
        assert p.noloc_ckpt.name == "matcher_noloc.wfck"
        assert p.results_csv == tmp_path / "run" / "eval" / "results.csv"
        assert p.report.parent == p.eval_dir
        assert p.overlays == p.eval_dir / "overlays"

    def test_accepts_string_root(self):
        assert ExperimentPaths("runs/x").root.name == "x"


class TestRegisterPair:
    def test_skip_localization_uses_full_frame(self, rng, scene):
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        record = register_pair(None, matcher, scene["moving"],
                               (scene["moving"] >= 0.5), scene["fixed"],
                               skip_localization=True)
        assert record.rect == (0, 0, 64, 64)
        assert record.box is None
        assert not record.fallback
        assert record.warped_canvas.shape == (64, 64)
        assert record.moving_template.shape == (28, 28)
        assert record.fixed_crop.shape == (28, 28)

    def test_identity_matcher_pastes_template_back(self, rng, scene):
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        record = register_pair(None, matcher, scene["moving"],
                               (scene["moving"] >= 0.5), scene["fixed"],
                               skip_localization=True)
        # a fresh matcher warps by the identity, so the crop-frame output
        # is the recentered moving template itself
        np.testing.assert_allclose(record.result.warped,
                                   record.moving_template, atol=1e-5)

    def test_template_is_recentered_from_corner(self, rng):
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        moving = np.zeros((64, 64), dtype=np.float32)
        moving[2:12, 50:60] = 1.0
        fixed = np.zeros((64, 64), dtype=np.float32)
        fixed[30:40, 30:40] = 1.0
        record = register_pair(None, matcher, moving, moving, fixed,
                               skip_localization=True)
        # the 10 px square fills the template regardless of where it sat
        assert record.moving_template.mean() > 0.5
        ys, xs = np.nonzero(record.moving_template)
        assert abs(xs.mean() - 13.5) < 2.5 and abs(ys.mean() - 13.5) < 2.5

    def test_untrained_locnet_path_is_well_formed(self, rng, scene):
        loc = LocNetModel(input_size=64, rng=rng)
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        record = register_pair(loc, matcher, scene["moving"],
                               (scene["moving"] >= 0.5), scene["fixed"])
        x0, y0, x1, y1 = record.rect
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
        if record.box is None:
            assert record.fallback and record.rect == (0, 0, 64, 64)
        else:
            assert not record.fallback

    def test_wrong_fixed_size_for_locnet_rejected(self, rng, scene):
        loc = LocNetModel(input_size=112, rng=rng)
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        with pytest.raises(DimensionError):
            register_pair(loc, matcher, scene["moving"],
                          (scene["moving"] >= 0.5), scene["fixed"])

    def test_mask_shape_mismatch_rejected(self, rng, scene):
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        with pytest.raises(DimensionError):
            register_pair(None, matcher, scene["moving"],
                          np.zeros((32, 32)), scene["fixed"],
                          skip_localization=True)

    def test_canvas_scores_accepts_record_or_array(self, rng, scene):
        matcher = MatcherModel(input_size=28, control_side=4, rng=rng)
        record = register_pair(None, matcher, scene["moving"],
                               (scene["moving"] >= 0.5), scene["fixed"],
                               skip_localization=True)
        gt = scene["fixed_mask"]
        dc_a, iou_a = canvas_scores(record, gt)
        dc_b, iou_b = canvas_scores(record.warped_canvas, gt)
        assert dc_a == dc_b and iou_a == iou_b
        assert 0.0 <= dc_a <= 1.0 and 0.0 <= iou_a <= 1.0


class TestStreams:
    def test_streams_are_reproducible(self):
        cfg = ExperimentConfig(seed=5)
        a = _stream(cfg, "bank").integers(0, 1 << 30, size=4)
        b = _stream(cfg, "bank").integers(0, 1 << 30, size=4)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_distinct_per_consumer(self):
        cfg = ExperimentConfig(seed=5)
        a = _stream(cfg, "bank").integers(0, 1 << 30, size=4)
        b = _stream(cfg, "loc_train").integers(0, 1 << 30, size=4)
        assert not np.array_equal(a, b)

    def test_streams_change_with_seed(self):
        a = _stream(ExperimentConfig(seed=5), "bank").integers(0, 1 << 30, size=4)
        b = _stream(ExperimentConfig(seed=6), "bank").integers(0, 1 << 30, size=4)
        assert not np.array_equal(a, b)


class TestStages:
    def test_gen_data_writes_every_split(self, tmp_path):
        cfg = micro_config()
        paths = ExperimentPaths(tmp_path)
        counts = stage_gen_data(cfg, paths)
        for split in ("loc_train", "loc_val", "loc_test",
                      "displaced_train", "eval_pairs"):
            assert paths.manifest(split).exists(), split
        for split in ("match_train", "match_val", "match_test"):
            pngs = list(paths.dataset(split).glob("*_moving.png"))
            assert len(pngs) == counts[split], split
        # displaced splits hold single digits: mask pixels from one digit only
        assert counts["displaced_train"] == cfg.match_train_size
        assert counts["eval_pairs"] == cfg.eval_size

    def test_gen_data_is_deterministic(self, tmp_path):
        cfg = micro_config()
        a_root, b_root = tmp_path / "a", tmp_path / "b"
        stage_gen_data(cfg, ExperimentPaths(a_root))
        stage_gen_data(cfg, ExperimentPaths(b_root))
        a = (a_root / "data" / "loc_train" / "manifest.csv").read_text()
        b = (b_root / "data" / "loc_train" / "manifest.csv").read_text()
        assert a == b
        img_a = (a_root / "data" / "loc_train" / "00000_fixed.png").read_bytes()
        img_b = (b_root / "data" / "loc_train" / "00000_fixed.png").read_bytes()
        assert img_a == img_b

    def test_downsampled_pairs_are_soft_unit_range(self, tmp_path):
        cfg = micro_config()
        paths = ExperimentPaths(tmp_path)
        stage_gen_data(cfg, paths)
        moving, fixed = _downsampled_pairs(paths.manifest("displaced_train"), 28)
        assert moving.shape == fixed.shape == (cfg.match_train_size, 28, 28)
        assert 0.0 <= moving.min() and moving.max() <= 1.0
        assert moving.sum(axis=(1, 2)).min() > 0
        assert fixed.sum(axis=(1, 2)).min() > 0

    def test_failure_names_the_stage(self, tmp_path):
        cfg = micro_config(idx_images=str(tmp_path / "missing.idx"),
                           idx_labels=str(tmp_path / "missing2.idx"))
        with pytest.raises(PipelineError, match="gen-data"):
            run_experiment(cfg, out_dir=tmp_path / "run")

    def test_run_writes_config_template_before_failing(self, tmp_path):
        cfg = micro_config(idx_images=str(tmp_path / "missing.idx"),
                           idx_labels=str(tmp_path / "missing2.idx"))
        with pytest.raises(PipelineError):
            run_experiment(cfg, out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "config.txt").exists()
