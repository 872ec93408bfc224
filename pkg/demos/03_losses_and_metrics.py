"""
Dice, smoothness, and the evaluation metrics
============================================

The matcher trains on soft dice plus a smoothness penalty over its
displacement lattice; evaluation uses hard dice (DC) and mean IoU.
This walks through what each number responds to.
"""

import numpy as np

from warpfit.losses import (dc_metric, dice_loss, miou_metric,
                            smoothness_loss, total_loss)
from warpfit.tensor import Tensor

# Two 20x20 squares, the second shifted right by 4 pixels.
a = np.zeros((32, 32), dtype=np.float32)
b = np.zeros_like(a)
a[6:26, 6:26] = 1.0
b[6:26, 10:30] = 1.0

# Soft dice loss is 1 - overlap; identical masks score 0.
print("dice loss, identical: %.4f" % float(dice_loss(Tensor(a), Tensor(a)).data))
print("dice loss, shifted:   %.4f" % float(dice_loss(Tensor(a), Tensor(b)).data))

# The hard metrics threshold at 0.5 and count pixels. DC and IoU always
# satisfy DC = 2 IoU / (1 + IoU).
dc = dc_metric(a, b)
iou = miou_metric(a, b)
print("DC %.4f, IoU %.4f, 2*IoU/(1+IoU) = %.4f" % (dc, iou, 2 * iou / (1 + iou)))

# Smoothness sums squared differences between neighboring control-point
# displacements. Constant fields cost nothing: the penalty only fights
# bending, never translation.
k = 4
flat = np.tile([0.3, -0.2], (k * k, 1))
print("smoothness of a constant field: %.1f"
      % float(smoothness_loss(Tensor(flat), k).data))

rng = np.random.default_rng(3)
rough = rng.standard_normal((k * k, 2))
s_rough = float(smoothness_loss(Tensor(rough), k).data)
s_shifted = float(smoothness_loss(Tensor(rough + 5.0), k).data)
print("rough field: %.4f, same field shifted by 5: %.4f" % (s_rough, s_shifted))

# total_loss bundles dice + weight * smoothness and keeps the pieces.
parts = total_loss(Tensor(a), Tensor(b), Tensor(0.1 * rough), k, weight=0.5)
breakdown = parts.as_floats()
print("total %.4f = dice %.4f + 0.5 * smoothness %.4f"
      % (breakdown.total, breakdown.dice, breakdown.smoothness))
