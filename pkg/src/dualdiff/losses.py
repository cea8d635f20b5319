"""Training objectives for the two branches."""

from dataclasses import dataclass

import numpy as np

from .errors import MonotonicityError, ShapeError
from .numerics import Tensor, as_tensor


def _shape(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    total: float


def loss_past(eps_true, eps_hat, ell):
    """Heteroscedastic Gaussian NLL in noise space, averaged over coordinates.

    ``0.5 * exp(-ell) * (eps - eps_hat)**2 + 0.5 * ell``.  Can be negative.
    """
    if not _shape(eps_true) == _shape(eps_hat) == _shape(ell):
        raise ShapeError(f"shape mismatch: {_shape(eps_true)}, {_shape(eps_hat)}, {_shape(ell)}")
    eps_hat, ell = as_tensor(eps_hat), as_tensor(ell)
    r = eps_hat - eps_true
    return (0.5 * (-ell).exp() * (r * r) + 0.5 * ell).mean()


def loss_future(y0, y0_hat, gap):
    """SNR-gap weighted squared error of the clean-data prediction.

    ``y0``/``y0_hat`` are ``(B, T, 2)`` (or ``(T, 2)``); ``gap`` is per timestep and
    broadcast over both coordinates.  Summed over timesteps, averaged over batch.
    """
    if _shape(y0) != _shape(y0_hat):
        raise ShapeError(f"shape mismatch: {_shape(y0)} vs {_shape(y0_hat)}")
    gap = as_tensor(gap)
    if not np.all(gap.data > 0):
        raise MonotonicityError("loss weights (SNR gaps) must be positive")
    if gap.shape != _shape(y0)[:-1]:
        raise ShapeError(f"gap shape {gap.shape} does not match timesteps {_shape(y0)[:-1]}")
    r = as_tensor(y0_hat) - y0
    weighted = gap.reshape(gap.shape + (1,)) * (r * r)
    per_sample = weighted.sum(axis=(-2, -1))
    return 0.5 * (per_sample.mean() if per_sample.ndim else per_sample)


def total_loss(l1, l2):
    """Sum the branch losses; returns the differentiable total and a breakdown."""
    total = l1 + l2
    v1 = l1.item() if isinstance(l1, Tensor) else float(l1)
    v2 = l2.item() if isinstance(l2, Tensor) else float(l2)
    vt = total.item() if isinstance(total, Tensor) else float(total)
    return total, LossBreakdown(v1, v2, vt)
