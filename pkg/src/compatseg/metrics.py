"""Dice scores on argmax-hardened predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import LabelField


@dataclass(frozen=True)
class DiceResult:
    """Per-sample, per-class Dice; an empty-vs-empty class scores 1."""

    per_sample: np.ndarray  # (n, m)

    @property
    def per_class(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    @property
    def mean(self) -> float:
        return float(self.per_class.mean())

    @property
    def foreground_mean(self) -> float:
        """Mean over structures, leaving out the background (last) class."""
        return float(self.per_class[:-1].mean())


def harden(pred: np.ndarray) -> np.ndarray:
    """Argmax class per row of a ``(..., V, m)`` prediction (ties go to the lower index)."""
    return np.argmax(pred, axis=-1)


def dice_masks(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


def _per_class(pred_map: np.ndarray, gt_map: np.ndarray, m: int) -> np.ndarray:
    return np.array([dice_masks(pred_map == j, gt_map == j) for j in range(m)])


def dice(prediction: np.ndarray, gt: LabelField) -> DiceResult:
    """Dice of one ``(V, m)`` prediction (or ``(V, 2m)`` split prediction) against ground truth."""
    return dice_batch(np.asarray(prediction)[None], [gt])


def dice_batch(predictions: np.ndarray, gts: Sequence[LabelField]) -> DiceResult:
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape[0] != len(gts):
        raise ValueError(f"{predictions.shape[0]} predictions for {len(gts)} ground truths")
    rows = []
    for pred, gt in zip(predictions, gts):
        m = gt.m
        if pred.shape == (gt.num_pixels, 2 * m):
            pred = np.minimum(pred[:, :m] + pred[:, m:], 1.0)
        if pred.shape != (gt.num_pixels, m):
            raise ValueError(f"prediction shape {pred.shape} does not match ({gt.num_pixels}, {m})")
        gt_map = gt.class_map().reshape(-1)
        if (gt_map < 0).any():
            raise ValueError("Dice needs a fully determined ground truth")
        rows.append(_per_class(harden(pred), gt_map, m))
    return DiceResult(np.array(rows))
