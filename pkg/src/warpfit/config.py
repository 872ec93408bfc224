"""Experiment configuration: a flat ``key = value`` text format.

One assignment per line, ``#`` starts a comment line, blank lines are
ignored. Every key must match a field of ExperimentConfig; unknown keys,
duplicate keys, and unparseable values are rejected with the offending
line number so a bad config never half-loads.
"""

from dataclasses import dataclass, fields
from pathlib import Path
import math
import typing

from .errors import ConfigError


@dataclass
class ExperimentConfig:
    """Every knob the pipeline reads, with desk-scale defaults.

    The full-scale reference settings (epochs in the hundreds, 100k
    samples) are reachable by overriding the split sizes and epoch
    counts; the defaults are sized so the whole experiment finishes on a
    single workstation core.
    """

    seed: int = 7
    out_dir: str = "runs/experiment"

    # Dataset source: synthetic digit bank by default; point idx_images /
    # idx_labels at IDX files to use real digits instead.
    idx_images: str = ""
    idx_labels: str = ""
    digit_bank_per_class: int = 500

    # Scene generation.
    canvas_size: int = 112
    digit_size: int = 28
    distractors_min: int = 0
    distractors_max: int = 3
    crop_margin: float = 0.1

    # Split sizes.
    loc_train_size: int = 5000
    loc_val_size: int = 500
    loc_test_size: int = 500
    match_train_size: int = 2400
    match_val_size: int = 300
    match_test_size: int = 300
    eval_size: int = 300
    overlay_count: int = 12

    # Localizer training.
    loc_lr: float = 0.001
    loc_beta1: float = 0.9
    loc_beta2: float = 0.99
    loc_lr_decay: float = 1e-5
    loc_weight_decay: float = 5e-4
    loc_batch_size: int = 32
    loc_epochs: int = 12
    loc_input_size: int = 112
    loc_early_stop_iou: float = 0.68

    # Matcher training.
    match_lr: float = 0.001
    match_beta1: float = 0.9
    match_beta2: float = 0.99
    match_lr_decay: float = 1e-6
    match_weight_decay: float = 1e-4
    match_batch_size: int = 128
    match_epochs: int = 12
    match_input_size: int = 28
    control_points: int = 64
    smoothness_weight: float = 1.0
    match_early_stop_dice: float = 0.82

    # Evaluation fan-out (forced to 1 by --deterministic).
    workers: int = 1

    def validate(self) -> None:
        """Check cross-field invariants; raises ConfigError."""
        nonneg = {"distractors_min", "distractors_max", "loc_lr_decay",
                  "loc_weight_decay", "match_lr_decay", "match_weight_decay",
                  "seed"}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type is str or isinstance(value, str):
                continue
            if f.name in nonneg:
                if value < 0:
                    raise ConfigError(f"{f.name} must be >= 0, got {value}")
            elif value <= 0:
                raise ConfigError(f"{f.name} must be positive, got {value}")
        if self.distractors_min > self.distractors_max:
            raise ConfigError(
                f"distractors_min {self.distractors_min} exceeds "
                f"distractors_max {self.distractors_max}")
        for name in ("loc_beta1", "loc_beta2", "match_beta1", "match_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        side = math.isqrt(self.control_points)
        if side * side != self.control_points or side < 2:
            raise ConfigError(
                f"control_points must be a perfect square >= 4, got {self.control_points}")
        if self.loc_input_size % 16 != 0 or self.loc_input_size < 64:
            raise ConfigError(
                f"loc_input_size must be a multiple of 16 and >= 64, got {self.loc_input_size}")
        if self.canvas_size != self.loc_input_size:
            raise ConfigError(
                f"canvas_size {self.canvas_size} must equal loc_input_size "
                f"{self.loc_input_size}: the localizer runs on full scenes")
        if self.canvas_size < 2 * self.digit_size:
            raise ConfigError(
                f"canvas_size {self.canvas_size} too small for "
                f"{self.digit_size}px digits")
        if self.match_input_size < 8:
            raise ConfigError(
                f"match_input_size must be at least 8, got {self.match_input_size}")
        if not 0 < self.crop_margin < 1:
            raise ConfigError(f"crop_margin must lie in (0, 1), got {self.crop_margin}")
        if bool(self.idx_images) != bool(self.idx_labels):
            raise ConfigError("idx_images and idx_labels must be set together")

    @property
    def control_side(self) -> int:
        return math.isqrt(self.control_points)


_FIELD_TYPES = typing.get_type_hints(ExperimentConfig)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines into a validated ExperimentConfig."""
    cfg = ExperimentConfig()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key '{key}'", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key '{key}'", line=lineno)
        seen.add(key)
        ftype = _FIELD_TYPES[key]
        try:
            if ftype is int:
                parsed: object = int(value)
            elif ftype is float:
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(
                f"invalid value for '{key}': '{value}' "
                f"(expected {ftype.__name__})", line=lineno) from None
        setattr(cfg, key, parsed)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def write_template(path, cfg: ExperimentConfig | None = None) -> None:
    """Write a config file holding every field of ``cfg`` (or defaults)."""
    cfg = cfg or ExperimentConfig()
    lines = ["# experiment configuration: key = value, '#' comments"]
    for f in fields(ExperimentConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
