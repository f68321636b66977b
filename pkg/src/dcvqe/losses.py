"""Training losses: L1, the rank-correlation penalty, and a pairwise baseline.

The correlation penalty rewards predictions whose deviations from the batch
mean agree in sign with the ground-truth deviations; it is an unnormalized
Spearman-style order constraint. Two forms are provided: the double-sum
anchor form (non-differentiable oracle, plain floats) and the mean-deviation
form used for training, which are algebraically identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class TiedGroundTruthError(ValueError):
    """Every ground-truth pair is tied; the pairwise loss is undefined."""


VARIANTS = ("correlation", "pwrl", "l1")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7   # weight of the L1 term
    beta: float = 0.3    # weight of the order-constraint term
    variant: str = "correlation"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, "
                             f"beta={self.beta}")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}, expected one of {VARIANTS}")


def _as_column(x, what: str) -> Tensor:
    t = ad.as_tensor(x)
    if t.data.ndim == 1:
        t = ad.reshape(t, (t.size, 1))
    if t.data.ndim != 2 or t.shape[1] != 1:
        raise ad.ShapeError(f"{what} must be a vector, got shape {t.shape}")
    return t


def _pair(p, g) -> tuple[Tensor, Tensor]:
    pc = _as_column(p, "predictions")
    gc = _as_column(g, "ground truths")
    if pc.shape[0] != gc.shape[0]:
        raise ad.ShapeError(f"length mismatch: {pc.shape[0]} predictions vs "
                            f"{gc.shape[0]} ground truths")
    return pc, gc


def l1_loss(p, g) -> Tensor:
    """Mean absolute error; subgradient 0 where prediction equals target."""
    pc, gc = _pair(p, g)
    return ad.mean_axis(ad.absolute(ad.sub(pc, gc)), None)


def correlation_loss(p, g) -> Tensor:
    """Order-constraint penalty, mean-deviation form (the training path).

    N * sum_n max(0, -(p_n - mean(p)) * (g_n - mean(g))). Gradient flows
    through the prediction mean. Zero exactly whenever p is a positive
    affine transform of g. Note the N prefactor is kept, so the term scales
    with batch size; tune its weight per batch size.
    """
    pc, gc = _pair(p, g)
    n = pc.shape[0]
    dev_p = ad.sub(pc, ad.mean_axis(pc, None))
    dev_g = ad.sub(gc, ad.mean_axis(gc, None))
    hinge = ad.max0(ad.scale(ad.mul(dev_p, dev_g), -1.0))
    return ad.scale(ad.sum_all(hinge), float(n))


def correlation_loss_raw(p, g) -> float:
    """Double-sum anchor form of the order constraint, evaluated literally.

    (1/N) * sum_n max(0, -(sum_m (p_n-p_m)) * (sum_m (g_n-g_m))). Kept as a
    plain-float oracle for the mean-deviation form; not differentiable.
    """
    pv = np.asarray(p, dtype=np.float64).reshape(-1)
    gv = np.asarray(g, dtype=np.float64).reshape(-1)
    if pv.size != gv.size:
        raise ad.ShapeError(f"length mismatch: {pv.size} vs {gv.size}")
    sum_p = (pv[:, None] - pv[None, :]).sum(axis=1)
    sum_g = (gv[:, None] - gv[None, :]).sum(axis=1)
    return float(np.maximum(0.0, -(sum_p * sum_g)).mean())


def pairwise_ranking_loss(p, g) -> Tensor:
    """Cross-entropy pairwise ranking baseline.

    Mean over ordered pairs (n, m), n != m, of
    log(1 + exp(-sign(g_n - g_m) * (p_n - p_m))); pairs with tied ground
    truths are skipped.
    """
    pc, gc = _pair(p, g)
    n = pc.shape[0]
    if n < 2:
        raise ad.ShapeError(f"pairwise ranking loss needs >= 2 samples, got {n}")
    gv = gc.data.reshape(-1)
    rows, signs = [], []
    for a in range(n):
        for b in range(n):
            if a == b or gv[a] == gv[b]:
                continue
            row = np.zeros(n)
            row[a], row[b] = 1.0, -1.0
            rows.append(row)
            signs.append(np.sign(gv[a] - gv[b]))
    if not rows:
        raise TiedGroundTruthError("all ground truths tied; no rankable pairs")
    select = Tensor(np.asarray(rows))          #P x N pair-difference selector
    neg_sign = Tensor(-np.asarray(signs).reshape(-1, 1))
    diffs = ad.matmul(select, pc)
    return ad.mean_axis(ad.softplus(ad.mul(diffs, neg_sign)), None)


def total_loss(p, g, cfg: LossConfig) -> Tensor:
    """Weighted combination alpha * L1 + beta * order term (per variant)."""
    pc, gc = _pair(p, g)
    terms = []
    if cfg.alpha > 0:
        terms.append(ad.scale(l1_loss(pc, gc), cfg.alpha))
    if cfg.variant != "l1" and cfg.beta > 0:
        order = correlation_loss if cfg.variant == "correlation" else pairwise_ranking_loss
        terms.append(ad.scale(order(pc, gc), cfg.beta))
    if not terms:
        return ad.scale(l1_loss(pc, gc), 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
