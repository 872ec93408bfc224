"""Mask matching: a conv net regresses thin-plate-spline warp parameters.

The moving and fixed masks are stacked as two channels and pass through
six 3x3 conv layers (pooling after every second one), two dense layers,
and a regression head emitting 6 affine values plus 2K control-point
displacements. The head starts at exactly zero weights with an identity
affine bias, so the initial warp is the identity and training starts
from "output = input". The loss is soft dice between the warped moving
mask and the fixed mask plus a weighted smoothness penalty on the
displacement lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import MetricLog
from .errors import DimensionError, ParameterError, TrainingError
from .losses import LossBreakdown, dc_metric, dice_loss, miou_metric, smoothness_loss
from .nn import Conv2d, Dense, maxpool2d
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, concat, leaky_relu, no_grad, zero_grad
from .tps import ControlGrid, TpsParams, bilinear_sample, tps_grid, tps_solve

LEAKY_SLOPE = 1e-4
CONV_CHANNELS = (32, 32, 64, 64, 128, 128)
FC_SIZES = (256, 128)
IDENTITY_BIAS_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


class MatcherModel:
    """Convolutional regressor from a mask pair to warp parameters."""

    def __init__(self, input_size: int = 28, control_side: int = 8,
                 rng: np.random.Generator | None = None,
                 conv_channels: tuple = CONV_CHANNELS, fc_sizes: tuple = FC_SIZES):
        rng = rng if rng is not None else np.random.default_rng(0)
        if len(conv_channels) % 2 != 0:
            raise ParameterError("conv channel list must pair up around the pooling points")
        side = int(input_size)
        pools = len(conv_channels) // 2
        if side < 2 ** pools:
            raise ParameterError(
                f"input size {side} is too small for {pools} pooling stages")
        self.input_size = side
        self.grid = ControlGrid(control_side)
        self.conv_channels = tuple(conv_channels)
        self.fc_sizes = tuple(fc_sizes)

        self.convs: list[Conv2d] = []
        cin = 2
        for i, cout in enumerate(conv_channels, start=1):
            self.convs.append(Conv2d(f"c{i}", cin, cout, 3, rng, padding=1))
            cin = cout
        for _ in range(pools):
            side = side // 2
        self.feature_size = conv_channels[-1] * side * side

        self.fcs: list[Dense] = []
        din = self.feature_size
        for i, dout in enumerate(fc_sizes, start=1):
            self.fcs.append(Dense(f"fc{i}", din, dout, rng))
            din = dout
        k = self.grid.num_points
        bias = np.concatenate([np.asarray(IDENTITY_BIAS_AFFINE), np.zeros(2 * k)])
        self.head = Dense("head", din, 6 + 2 * k, rng, zero_init=True, bias_init=bias)

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in (*self.convs, *self.fcs, self.head):
            out.update(layer.tensors())
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors().items() if v.requires_grad}

    def forward_params(self, pair: Tensor) -> tuple[Tensor, Tensor]:
        """(N,2,S,S) -> affine (N,2,3) and displacements (N,K,2)."""
        if pair.ndim != 4 or pair.shape[1] != 2:
            raise DimensionError(f"expected (N,2,S,S) input, got {pair.shape}")
        if pair.shape[2] != self.input_size or pair.shape[3] != self.input_size:
            raise DimensionError(
                f"model is built for {self.input_size}px inputs, got {pair.shape[2:]}")
        x = pair
        for i, conv in enumerate(self.convs):
            x = conv(x)
            # leaky ReLU is strictly increasing, so applying it after the
            # pool is the same function evaluated on fewer elements
            if i % 2 == 1:
                x = maxpool2d(x, 2, 2)
            x = leaky_relu(x, LEAKY_SLOPE)
        n = pair.shape[0]
        x = x.reshape((n, self.feature_size))
        for fc in self.fcs:
            x = leaky_relu(fc(x), LEAKY_SLOPE)
        out = self.head(x)
        k = self.grid.num_points
        affine = out[:, :6].reshape((n, 2, 3))
        disp = out[:, 6:].reshape((n, k, 2))
        return affine, disp


@dataclass
class MatchResult:
    """Registration outcome for one mask pair."""

    params: TpsParams
    warped: np.ndarray           # soft warped moving mask (H, W)
    losses: LossBreakdown        # plain floats
    dc: float
    miou: float


def match_batch(model: MatcherModel, moving: Tensor, fixed: Tensor,
                weight: float = 1.0) -> dict:
    """Differentiable forward over a batch: masks (N,1,S,S) -> loss pieces.

    Returns tensors: affine, displacements, warped, per-sample dice and
    smoothness, and the scalar mean total loss.
    """
    pair = concat([moving, fixed], axis=1)
    affine, disp = model.forward_params(pair)
    coeffs = tps_solve(model.grid, affine, disp)
    field = tps_grid(model.grid, coeffs, (model.input_size, model.input_size))
    warped = bilinear_sample(moving, field)
    dice = dice_loss(fixed, warped, axes=(1, 2, 3))
    smooth = smoothness_loss(disp, model.grid.points_per_side)
    total = (dice + smooth * weight).mean()
    return {"affine": affine, "displacements": disp, "warped": warped,
            "dice": dice, "smoothness": smooth, "total": total}


def match_pair(model: MatcherModel, moving_mask: np.ndarray, fixed_mask: np.ndarray,
               weight: float = 1.0) -> MatchResult:
    """Run the matcher on one mask pair (no gradients) and score the result."""
    moving_mask = np.asarray(moving_mask, dtype=np.float32)
    fixed_mask = np.asarray(fixed_mask, dtype=np.float32)
    if moving_mask.shape != fixed_mask.shape:
        raise DimensionError(
            f"mask shapes differ: {moving_mask.shape} vs {fixed_mask.shape}")
    with no_grad():
        out = match_batch(model,
                          Tensor(moving_mask[None, None], dtype=np.float32),
                          Tensor(fixed_mask[None, None], dtype=np.float32),
                          weight)
        params = TpsParams(out["affine"].data[0].astype(np.float64),
                           out["displacements"].data[0].astype(np.float64))
        warped = np.clip(out["warped"].data[0, 0], 0.0, 1.0)
        dice_v = float(out["dice"].data[0])
        smooth_v = float(out["smoothness"].data[0])
    breakdown = LossBreakdown(dice_v, smooth_v, dice_v + weight * smooth_v, weight)
    return MatchResult(params, warped, breakdown,
                       dc_metric(fixed_mask, warped), miou_metric(fixed_mask, warped))


def evaluate_matcher(model: MatcherModel, moving: np.ndarray, fixed: np.ndarray,
                     weight: float = 1.0, batch: int = 128) -> tuple[float, float, float]:
    """(mean total loss, mean DC, mean IoU) over a mask-pair dataset."""
    m = moving.shape[0]
    losses, dcs, ious = [], [], []
    for start in range(0, m, batch):
        sl = slice(start, min(start + batch, m))
        mv = np.asarray(moving[sl], dtype=np.float32)[:, None]
        fx = np.asarray(fixed[sl], dtype=np.float32)[:, None]
        with no_grad():
            out = match_batch(model, Tensor(mv, dtype=np.float32),
                              Tensor(fx, dtype=np.float32), weight)
            losses.append((out["dice"].data + weight * out["smoothness"].data))
            warped = out["warped"].data
        for i in range(mv.shape[0]):
            dcs.append(dc_metric(fx[i, 0], warped[i, 0]))
            ious.append(miou_metric(fx[i, 0], warped[i, 0]))
    return float(np.concatenate(losses).mean()), float(np.mean(dcs)), float(np.mean(ious))


def train_matcher(model: MatcherModel, train_pairs: tuple[np.ndarray, np.ndarray],
                  val_pairs: tuple[np.ndarray, np.ndarray], *,
                  epochs: int, batch_size: int, lr: float, lr_decay: float,
                  weight_decay: float, smoothness_weight: float,
                  rng: np.random.Generator, metrics_path, checkpoint_path,
                  early_stop_dice: float = 2.0,
                  beta1: float = 0.9, beta2: float = 0.99,
                  train_eval_cap: int = 512) -> dict:
    """Train on (moving, fixed) mask arrays; keep the best-validation-dice
    weights; stop early once validation DC reaches ``early_stop_dice``."""
    if epochs < 1 or batch_size < 1:
        raise ParameterError("epochs and batch size must be positive")
    train_mv, train_fx = train_pairs
    val_mv, val_fx = val_pairs
    m = train_mv.shape[0]
    if batch_size > m:
        raise ParameterError(f"batch size {batch_size} exceeds {m} training pairs")

    params = model.parameters()
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, lr_decay=lr_decay)
    logger = MetricLog(metrics_path)
    best = {"dice": -1.0, "epoch": 0}
    history = []
    cap = min(train_eval_cap, m)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(m)
        losses = []
        for start in range(0, m - batch_size + 1, batch_size):
            idx = perm[start:start + batch_size]
            mv = train_mv[idx].astype(np.float32)[:, None]
            fx = train_fx[idx].astype(np.float32)[:, None]
            out = match_batch(model, Tensor(mv, dtype=np.float32),
                              Tensor(fx, dtype=np.float32), smoothness_weight)
            loss = out["total"]
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // batch_size}")
            zero_grad(params)
            backward(loss)
            adam_step(params, state, weight_decay)
            losses.append(value)

        tr_loss, tr_dc, tr_iou = evaluate_matcher(
            model, train_mv[:cap], train_fx[:cap], smoothness_weight)
        val_loss, val_dc, val_iou = evaluate_matcher(model, val_mv, val_fx, smoothness_weight)
        logger.row(epoch, "train", float(np.mean(losses)), tr_dc, tr_iou)
        logger.row(epoch, "val", val_loss, val_dc, val_iou)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_dc": val_dc, "val_iou": val_iou})
        if val_dc > best["dice"]:
            best = {"dice": val_dc, "epoch": epoch}
            payload = dict(model.tensors())
            payload["meta.input_size"] = np.array([model.input_size], dtype=np.float32)
            payload["meta.control_side"] = np.array([model.grid.points_per_side], dtype=np.float32)
            save_checkpoint(checkpoint_path, payload)
        if val_dc >= early_stop_dice:
            break
    return {"history": history, "best": best}


def load_matcher(path) -> MatcherModel:
    loaded = load_checkpoint(path)
    for key in ("meta.input_size", "meta.control_side"):
        if key not in loaded:
            raise ParameterError(f"{path}: checkpoint lacks {key}")
    model = MatcherModel(int(loaded["meta.input_size"][0]),
                         int(loaded["meta.control_side"][0]))
    load_into(model.tensors(), loaded)
    return model
