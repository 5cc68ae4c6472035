"""Regression losses returning (value, gradient w.r.t. prediction)."""
import numpy as np


def mae_loss(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSSES = {"mae": mae_loss, "mse": mse_loss}
