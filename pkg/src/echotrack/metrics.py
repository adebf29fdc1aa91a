"""Per-block error metrics and target-to-estimate association."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError


def rsse(
    theta_true: np.ndarray,
    d_true: np.ndarray,
    theta_hat: np.ndarray,
    d_hat: np.ndarray,
) -> tuple[float, float]:
    """Root sum square errors over index-aligned targets: (angle, distance)."""
    theta_true, theta_hat = np.asarray(theta_true), np.asarray(theta_hat)
    d_true, d_hat = np.asarray(d_true), np.asarray(d_hat)
    if theta_true.shape != theta_hat.shape or d_true.shape != d_hat.shape:
        raise DimensionError("truth/estimate counts differ")
    angle = float(np.sqrt(np.sum((theta_true - theta_hat) ** 2)))
    dist = float(np.sqrt(np.sum((d_true - d_hat) ** 2)))
    return angle, dist


def per_target_loss(
    theta_true: np.ndarray,
    d_true: np.ndarray,
    theta_hat: np.ndarray,
    d_hat: np.ndarray,
    eta: float,
) -> np.ndarray:
    """Weighted squared error per target: (dtheta)^2 + eta (dd)^2."""
    return (np.asarray(theta_true) - np.asarray(theta_hat)) ** 2 + eta * (
        np.asarray(d_true) - np.asarray(d_hat)
    ) ** 2


def hungarian_association(theta_true: np.ndarray, theta_hat: np.ndarray) -> np.ndarray:
    """Assignment of unordered estimates to targets minimizing total squared
    angle error; returns indices such that theta_hat[idx[q]] pairs with
    target q."""
    cost = (np.asarray(theta_true)[:, None] - np.asarray(theta_hat)[None, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    idx = np.empty(len(theta_true), dtype=np.int64)
    idx[rows] = cols
    return idx
