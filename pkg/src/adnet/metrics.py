"""Tonemapping, the tonemapped L1 training loss, and PSNR metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op

DENOMINATORS = ("log1p_mu", "one_plus_mu")


@dataclass(frozen=True)
class LossConfig:
    """μ-law settings.

    ``log1p_mu`` normalises by log(1 + μ) so that T(1) = 1; ``one_plus_mu``
    divides by 1 + μ as the formula is sometimes printed.
    """

    mu: float = 5000.0
    tonemap_denominator: str = "log1p_mu"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.tonemap_denominator not in DENOMINATORS:
            raise ValueError(f"tonemap_denominator must be one of {DENOMINATORS}")

    @property
    def denominator(self) -> float:
        if self.tonemap_denominator == "log1p_mu":
            return math.log1p(self.mu)
        return 1.0 + self.mu


class ClampCounter:
    """Counts negative inputs clamped to zero by :func:`mu_law`."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


negative_clamps = ClampCounter()


def mu_tonemap(x: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Plain-array μ-law, used for metrics."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(cfg.mu * np.maximum(x, 0.0)) / cfg.denominator


def mu_law(x: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Differentiable μ-law tonemap; negative inputs are clamped at zero."""
    d = x.data
    neg = d < 0
    if neg.any():
        negative_clamps.count += int(neg.sum())
        d = np.where(neg, 0, d).astype(x.dtype)
    mu, den = cfg.mu, cfg.denominator
    out = (np.log1p(mu * d) / den).astype(x.dtype)
    deriv = np.where(neg, 0, mu / ((1 + mu * d) * den)).astype(x.dtype)
    return make_op("mu_law", out, (x,), lambda g: (g * deriv,))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    n = diff.size
    return make_op(
        "l1", np.asarray(np.abs(diff).mean()), (a, b), lambda g: (g * sign / n, -g * sign / n)
    )


def loss_l1_tonemapped(pred: Tensor, gt: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"loss: shape mismatch {pred.shape} vs {gt.shape}")
    return l1_loss(mu_law(gt, cfg), mu_law(pred, cfg))


def psnr(
    pred: np.ndarray,
    gt: np.ndarray,
    domain: str = "linear",
    cfg: LossConfig = LossConfig(),
    ceiling: float = 100.0,
) -> float:
    """PSNR in dB against a peak of 1.0, capped at ``ceiling``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    if domain == "mu":
        pred, gt = mu_tonemap(pred, cfg), mu_tonemap(gt, cfg)
    elif domain != "linear":
        raise ValueError("domain must be 'linear' or 'mu'")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return ceiling
    return min(ceiling, 10.0 * math.log10(1.0 / mse))
