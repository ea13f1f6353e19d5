"""Segmentation losses (cross-entropy + Lovasz-softmax) and IoU metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError


@dataclass
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    ignore_label: int = -1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DomainError("loss weights must be non-negative")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _scored(x: Tensor, labels: np.ndarray, cfg: LossConfig) -> tuple[Tensor, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != x.shape[0]:
        raise DomainError("labels must have one entry per row")
    keep = labels != cfg.ignore_label
    if not keep.any():
        raise DomainError("every point is ignored; loss is undefined")
    lab = labels[keep]
    if lab.min() < 0 or lab.max() >= x.shape[1]:
        raise DomainError("label out of range")
    if keep.all():
        return x, lab
    return ad.take_rows(x, np.nonzero(keep)[0]), lab


def cross_entropy(logits, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean negative log-likelihood over non-ignored points."""
    x, lab = _scored(_as_tensor(logits), labels, cfg)
    logp = ad.log_softmax(x)
    onehot = np.zeros(x.shape, dtype=x.dtype)
    onehot[np.arange(len(lab)), lab] = 1
    return ad.mul(ad.tsum(ad.mul(logp, onehot)), -1.0 / len(lab))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss along a sorted ground-truth mask."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over classes present in ``labels``.

    The sort order is computed from current values and treated as fixed during
    the backward pass.
    """
    p, lab = _scored(_as_tensor(probs), labels, cfg)
    n, num_classes = p.shape
    present = np.unique(lab)
    fg = (lab[:, None] == present[None, :]).astype(p.dtype)          # (n, K)
    p_present = ad.getitem(p, (slice(None), present))
    errors = ad.add(ad.mul(p_present, 1 - 2 * fg), fg)                # |fg - p|
    order = np.argsort(-errors.data, axis=0, kind="stable")           # (n, K)
    cols = np.broadcast_to(np.arange(len(present)), order.shape)
    errors_sorted = ad.getitem(errors, (order, cols))
    grads = np.stack([lovasz_grad(fg[order[:, k], k]) for k in range(len(present))], axis=1)
    per_class = ad.tsum(ad.mul(errors_sorted, grads), axis=0)
    return ad.mean(per_class)


def total_loss(logits, labels, cfg: LossConfig = LossConfig(), parts: bool = False):
    """``lambda1 * CE + lambda2 * Lovasz`` on softmax probabilities.

    With ``parts=True`` returns ``(total, ce, lovasz)``.
    """
    logits = _as_tensor(logits)
    ce = cross_entropy(logits, labels, cfg)
    lov = lovasz_softmax(ad.softmax(logits), labels, cfg)
    total = ad.add(ad.mul(ce, cfg.lambda1), ad.mul(lov, cfg.lambda2))
    return (total, ce, lov) if parts else total


# -- metrics -----------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int,
                     ignore_label: int = -1) -> np.ndarray:
    """Counts ``conf[true, pred]`` over non-ignored points."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    keep = labels != ignore_label
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; ``nan`` where the class is absent from both truth and prediction."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(conf: np.ndarray) -> float:
    conf = np.asarray(conf)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or conf.sum() == 0:
        raise DomainError("mIoU needs a non-empty square confusion matrix")
    return float(np.nanmean(per_class_iou(conf)))
