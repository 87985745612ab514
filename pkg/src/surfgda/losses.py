"""Segmentation and domain losses, parcel weighting, and the Dice metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_FLOOR = 1e-12


@dataclass
class ClassWeights:
    weights: np.ndarray
    mode: str

    @property
    def num_parcels(self) -> int:
        return len(self.weights)


@dataclass
class LossReport:
    dice_term: Tensor
    ce_term: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.dice_term.item(), self.ce_term.item(), self.total.item()


def class_weights(labels, num_parcels: int, mode: str = "inverse-frequency") -> ClassWeights:
    """Parcel weights; inverse-frequency weights are ``1/(count+1)`` scaled to sum to C.

    ``labels`` may be one array or an iterable of per-graph arrays.
    """
    if mode == "uniform":
        return ClassWeights(np.ones(num_parcels), mode)
    if mode != "inverse-frequency":
        raise ValueError(f"unknown class-weight mode {mode!r}")
    if isinstance(labels, np.ndarray):
        labels = [labels]
    counts = np.zeros(num_parcels)
    for lab in labels:
        lab = np.asarray(lab)
        if lab.size and lab.max() >= num_parcels:
            raise ValueError("label outside [0, num_parcels)")
        counts += np.bincount(lab, minlength=num_parcels)
    w = 1.0 / (counts + 1.0)
    return ClassWeights(w * num_parcels / w.sum(), mode)


def one_hot(labels, num_parcels: int) -> np.ndarray:
    out = np.zeros((len(labels), num_parcels))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def seg_loss(probs: Tensor, onehot: np.ndarray, weights, eps: float = 1e-6,
             ce_form: str = "log") -> LossReport:
    """Weighted Dice loss plus weighted cross-entropy (mean over nodes).

    ``ce_form="linear"`` replaces ``log(p)`` by ``p`` in the cross-entropy sum.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ValueError(f"probs {probs.shape} vs one-hot {onehot.shape}")
    rowsum = probs.value.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-6):
        raise ValueError("probability rows do not sum to 1")
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64).reshape(1, -1)
    n = probs.shape[0]
    wy = Tensor(w * onehot)
    overlap = dc.sum(dc.elementwise_mul(probs, wy))
    mass = dc.sum(dc.elementwise_mul(probs, Tensor(np.broadcast_to(w, probs.shape)))) + float((w * onehot).sum())
    dice = 1.0 - (2.0 * overlap + eps) / (mass + eps)
    if ce_form == "log":
        logp = dc.log(dc.clamp_min(probs, LOG_FLOOR))
    elif ce_form == "linear":
        logp = probs
    else:
        raise ValueError(f"unknown ce-form {ce_form!r}")
    ce = dc.sum(dc.elementwise_mul(logp, wy)) * (-1.0 / n)
    return LossReport(dice, ce, dice + ce)


def bce(z_hat: Tensor, z: float) -> Tensor:
    """Binary cross-entropy of a 1x1 probability against a 0/1 domain label."""
    p = dc.clamp(z_hat, LOG_FLOOR, 1.0 - LOG_FLOOR)
    return -(dc.log(1.0 - p) * (1.0 - z) + dc.log(p) * float(z))


def dice_metric(pred, truth, num_parcels: int) -> tuple[np.ndarray, float]:
    """Per-parcel Dice (NaN where a parcel is absent from both) and their mean."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    inter = np.bincount(truth[pred == truth], minlength=num_parcels).astype(float)
    size = np.bincount(pred, minlength=num_parcels) + np.bincount(truth, minlength=num_parcels)
    per = np.full(num_parcels, np.nan)
    present = size > 0
    per[present] = 2.0 * inter[present] / size[present]
    mean = float(np.mean(per[present])) if present.any() else 1.0
    return per, mean
