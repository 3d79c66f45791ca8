"""Training objectives.

Supervised frames use a pixel-mean softmax cross-entropy on the logits head.
Unlabeled frames use two segment-level terms on the dense head, computed
from precomputed overlapping segment masks:

* invariance: mean squared deviation of features from their segment mean,
  normalized by feature dimension and total segment pixel count, pushing
  features toward constancy inside each segment;
* variance: a hinge that pushes the means of different segments at least a
  margin apart, preventing the collapsed all-constant solution.

Both are composed on the autodiff tape through custom pooling operations.
A pixel covered by several masks contributes to every one of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, record_op, scale, sum_all
from .errors import ContractViolation, ShapeError
from .masks import MaskSet

__all__ = [
    "SegmentStats",
    "LossBreakdown",
    "cross_entropy",
    "segment_pool",
    "invariance_loss",
    "variance_loss",
    "real_loss",
]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[label].

    ``logits`` is (C, H, W); ``labels`` is integer (H, W) with values in
    [0, C). Stabilized by per-pixel max subtraction.
    """
    ld = logits.data
    if ld.ndim != 3:
        raise ShapeError(f"logits must be (C, H, W), got {ld.shape}")
    c = ld.shape[0]
    lab = np.asarray(labels)
    if lab.shape != ld.shape[1:]:
        raise ShapeError(f"labels {lab.shape} do not match logits {ld.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ContractViolation(f"labels must be integers, got dtype {lab.dtype}")
    if lab.min() < 0 or lab.max() >= c:
        raise ContractViolation(f"labels must lie in [0, {c}), got [{lab.min()}, {lab.max()}]")

    npix = lab.size
    flat_lab = lab.ravel()
    cols = np.arange(npix)
    shifted = ld - ld.max(axis=0)
    ex = np.exp(shifted)
    den = ex.sum(axis=0)
    log_probs = shifted - np.log(den)
    out = Tensor(-log_probs.reshape(c, npix)[flat_lab, cols].sum() / npix)

    def rule(g):
        grad = (ex / den).reshape(c, npix).copy()
        grad[flat_lab, cols] -= 1.0
        return ((float(g) / npix) * grad.reshape(ld.shape),)

    return record_op(out, (logits,), rule)


@dataclass
class SegmentStats:
    """Pooled per-segment statistics. ``mu`` and ``var`` are None when n = 0."""

    mu: Tensor | None  # (n, d) segment means
    var: Tensor | None  # (n, d) sums of squared deviations from the mean
    counts: np.ndarray  # (n,) pixel count per segment
    n: int
    d: int


def segment_pool(dense: Tensor, masks: MaskSet) -> SegmentStats:
    """Pools a (D, H, W) feature map over every mask of the set.

    Overlapping pixels contribute to every mask containing them. Gradients
    flow back through both the means and the squared deviations; for the
    deviations the mean's own dependence cancels exactly, because deviations
    within one segment sum to zero.
    """
    dd = dense.data
    if dd.ndim != 3:
        raise ShapeError(f"dense features must be (D, H, W), got {dd.shape}")
    d, h, w = dd.shape
    if (masks.height, masks.width) != (h, w):
        raise ShapeError(
            f"mask grid {masks.width}x{masks.height} does not match features {w}x{h}"
        )
    index_lists = [m.flat_indices() for m in masks.masks]
    counts = np.array([ix.size for ix in index_lists], dtype=np.int64)
    n = len(index_lists)
    if n == 0:
        return SegmentStats(mu=None, var=None, counts=counts, n=0, d=d)

    z = dd.reshape(d, h * w)
    mu_val = np.empty((n, d))
    var_val = np.empty((n, d))
    for i, ix in enumerate(index_lists):
        zi = z[:, ix]
        m = zi.mean(axis=1)
        dev = zi - m[:, None]
        mu_val[i] = m
        var_val[i] = (dev * dev).sum(axis=1)
    mu = Tensor(mu_val)
    var = Tensor(var_val)

    def mu_rule(g):
        buf = np.zeros((d, h * w))
        for i, ix in enumerate(index_lists):
            buf[:, ix] += g[i][:, None] / ix.size
        return (buf.reshape(dd.shape),)

    def var_rule(g):
        buf = np.zeros((d, h * w))
        for i, ix in enumerate(index_lists):
            zi = z[:, ix]
            dev = zi - zi.mean(axis=1)[:, None]
            buf[:, ix] += 2.0 * dev * g[i][:, None]
        return (buf.reshape(dd.shape),)

    record_op(mu, (dense,), mu_rule)
    record_op(var, (dense,), var_rule)
    return SegmentStats(mu=mu, var=var, counts=counts, n=n, d=d)


def invariance_loss(stats: SegmentStats) -> Tensor:
    """Sum of squared deviations over all segments, divided by the feature
    dimension and the total pooled pixel count. Zero when there are no
    segments."""
    if stats.n == 0:
        return Tensor(0.0)
    total_pixels = int(stats.counts.sum())
    return scale(sum_all(stats.var), 1.0 / (stats.d * total_pixels))


def variance_loss(stats: SegmentStats, margin: float) -> Tensor:
    """Mean over unordered segment pairs of max(0, margin - ||mu_i - mu_j||).

    The hinge closes at exactly the margin; coincident means get subgradient
    zero. Zero when fewer than two segments exist.
    """
    if margin <= 0.0:
        raise ValueError(f"margin must be positive, got {margin}")
    if stats.n <= 1:
        return Tensor(0.0)
    mu = stats.mu
    mu_val = mu.data
    iu, ju = np.triu_indices(stats.n, k=1)
    diff = mu_val[iu] - mu_val[ju]
    dist = np.sqrt((diff * diff).sum(axis=1))
    n_pairs = iu.size
    out = Tensor(np.maximum(0.0, margin - dist).sum() / n_pairs)

    def rule(g):
        active = (dist < margin) & (dist > 0.0)
        safe = np.where(dist > 0.0, dist, 1.0)
        coef = np.where(active, -1.0 / safe, 0.0) / n_pairs
        scaled = coef[:, None] * diff
        gmu = np.zeros_like(mu_val)
        np.add.at(gmu, iu, scaled)
        np.add.at(gmu, ju, -scaled)
        return (float(g) * gmu,)

    return record_op(out, (mu,), rule)


@dataclass
class LossBreakdown:
    """Scalar values of the loss terms for logging; tensors stay on the tape."""

    supervised: float | None = None
    invariance: float | None = None
    variance: float | None = None
    combined_real: float | None = None


def real_loss(
    dense: Tensor, masks: MaskSet, alpha: float, margin: float
) -> tuple[Tensor, LossBreakdown]:
    """alpha * (invariance + variance) over one unlabeled frame.

    Frames with fewer than two masks carry no usable signal and contribute
    an exact zero, so callers can skip the backward pass for them.
    """
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    stats = segment_pool(dense, masks)
    if stats.n <= 1:
        return Tensor(0.0), LossBreakdown(invariance=0.0, variance=0.0, combined_real=0.0)
    inv = invariance_loss(stats)
    var = variance_loss(stats, margin)
    total = scale(add(inv, var), alpha)
    breakdown = LossBreakdown(
        invariance=inv.item(), variance=var.item(), combined_real=total.item()
    )
    return total, breakdown
