"""Positive/negative loss families and the composed compatible loss.

All kernels take ``pred`` of shape ``(..., V, m)`` with entries in ``[0, 1]``
and a :class:`~compatseg.labels.LabelField`.  Leading axes are batch axes (the
brute-force oracle evaluates whole grids of candidate predictions at once);
the return value has the leading shape of ``pred``.  Losses are sums over
entries, never means.

With ``with_grad=True`` each kernel returns ``(value, d value / d pred)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .labels import LabelField, masks

FLOOR = 1e-7

class Family(str, Enum):
    POSITIVE_CE = "p_ce"
    NEGATIVE_CE = "n_ce"
    POSITIVE_DICE = "p_dice"
    NEGATIVE_DICE = "n_dice"
    TARGET_ADAPTIVE_CE = "ta_ce"
    TARGET_ADAPTIVE_DICE = "ta_dice"
    EXCLUSIVE_CE = "ex_ce"
    EXCLUSIVE_DICE = "ex_dice"

    @property
    def side(self) -> str:
        return "P" if self in _P_SIDE else "N"


_P_SIDE = {
    Family.POSITIVE_CE,
    Family.POSITIVE_DICE,
    Family.TARGET_ADAPTIVE_CE,
    Family.TARGET_ADAPTIVE_DICE,
}


@dataclass(frozen=True)
class LossFamily:
    tag: Family
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", Family(self.tag))
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def side(self) -> str:
        return self.tag.side


@dataclass(frozen=True)
class CompLossSpec:
    positive: LossFamily = LossFamily(Family.POSITIVE_CE)
    negative: LossFamily = LossFamily(Family.NEGATIVE_CE)
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self) -> None:
        if self.positive.side != "P":
            raise ValueError(f"{self.positive.tag.value} is not a positive-side family")
        if self.negative.side != "N":
            raise ValueError(f"{self.negative.tag.value} is not a negative-side family")
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ValueError("alpha1 and alpha2 must both be positive")

    @classmethod
    def parse(cls, positive: str, negative: str, alpha1: float = 1.0, alpha2: float = 1.0,
              epsilon: float = 1.0) -> "CompLossSpec":
        return cls(LossFamily(Family(positive), epsilon), LossFamily(Family(negative), epsilon),
                   float(alpha1), float(alpha2))

    def describe(self) -> str:
        return (f"positive={self.positive.tag.value}, negative={self.negative.tag.value}, "
                f"alpha1={self.alpha1:g}, alpha2={self.alpha2:g}")


# per-entry distances ------------------------------------------------------

def _neg_log(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-log(max(x, FLOOR))`` and its derivative in ``x``."""
    live = x > FLOOR
    safe = np.where(live, x, FLOOR)
    return -np.log(safe), np.where(live, -1.0 / safe, 0.0)


def f_positive_ce(a):
    return _neg_log(a)


def f_negative_ce(a):
    v, d = _neg_log(1.0 - a)
    return v, -d


def f_positive_dice(a):
    return 1.0 - 2.0 * a / (1.0 + a), -2.0 / (1.0 + a) ** 2


def f_negative_dice(a):
    return 2.0 * a / (1.0 + a), 2.0 / (1.0 + a) ** 2


def f_exclusive_ce(a, epsilon: float = 1.0):
    return np.log(a + epsilon), 1.0 / (a + epsilon)


def negative_entry(family: LossFamily) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """The per-entry distance ``f_N(a, 0)`` of a negative-side family."""
    tag = family.tag
    if tag is Family.NEGATIVE_CE:
        return f_negative_ce
    if tag in (Family.NEGATIVE_DICE, Family.EXCLUSIVE_DICE):
        return f_negative_dice
    if tag is Family.EXCLUSIVE_CE:
        return lambda a: f_exclusive_ce(a, family.epsilon)
    raise ValueError(f"{tag.value} is not a negative-side family")


def positive_entry(family: LossFamily) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """The per-entry distance ``f_P(a, 1)`` of a positive-side family."""
    if family.tag in (Family.POSITIVE_CE, Family.TARGET_ADAPTIVE_CE):
        return f_positive_ce
    if family.tag in (Family.POSITIVE_DICE, Family.TARGET_ADAPTIVE_DICE):
        return f_positive_dice
    raise ValueError(f"{family.tag.value} is not a positive-side family")


# helpers --------------------------------------------------------------------

def _check(pred: np.ndarray, label: LabelField) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[-2:] != label.states.shape:
        raise ValueError(f"prediction shape {pred.shape[-2:]} does not match label {label.states.shape}")
    return pred


def _finish(value, grad, with_grad):
    return (value, grad) if with_grad else value


def _masked_sum(pred, mask, fn, with_grad):
    val, d = fn(pred)
    value = np.where(mask, val, 0.0).sum(axis=(-2, -1))
    return value, (np.where(mask, d, 0.0) if with_grad else None)


def _row_term(pred, rows, cols, fn, with_grad):
    """Sum over ``rows`` of ``fn(sum of pred over cols)``; a single merged term per pixel."""
    s = pred[..., cols].sum(axis=-1)
    val, d = fn(s)
    value = np.where(rows, val, 0.0).sum(axis=-1)
    if not with_grad:
        return value, None
    grad = np.zeros_like(pred)
    grad[..., cols] = np.where(rows, d, 0.0)[..., None]
    return value, grad


def _clip_one(fn):
    """``fn(min(s, 1))`` with the clip's subgradient (1 below one, 0 above)."""
    def wrapped(s):
        inside = s < 1.0
        v, d = fn(np.minimum(s, 1.0))
        return v, np.where(inside, d, 0.0)
    return wrapped


# public kernels -----------------------------------------------------------

def loss_p_ce(pred, label: LabelField, with_grad: bool = False):
    pred = _check(pred, label)
    pos, _, _ = masks(label)
    return _finish(*_masked_sum(pred, pos, f_positive_ce, with_grad), with_grad)


def loss_n_ce(pred, label: LabelField, with_grad: bool = False):
    pred = _check(pred, label)
    _, neg, _ = masks(label)
    return _finish(*_masked_sum(pred, neg, f_negative_ce, with_grad), with_grad)


def loss_p_dice(pred, label: LabelField, with_grad: bool = False):
    pred = _check(pred, label)
    pos, _, _ = masks(label)
    return _finish(*_masked_sum(pred, pos, f_positive_dice, with_grad), with_grad)


def loss_n_dice(pred, label: LabelField, with_grad: bool = False):
    pred = _check(pred, label)
    _, neg, _ = masks(label)
    return _finish(*_masked_sum(pred, neg, f_negative_dice, with_grad), with_grad)


def loss_p_target_adaptive(pred, label: LabelField, base: str = "ce", with_grad: bool = False):
    """Positive loss with every unannotated class merged into one.

    Pixels without a positive entry are scored once on the summed prediction
    of the unannotated classes, clipped at 1.
    """
    pred = _check(pred, label)
    unknown_cols = label.known_classes.complement().indices()
    if unknown_cols.size == 0:
        raise ValueError("target-adaptive loss needs at least one unannotated class")
    entry = {"ce": f_positive_ce, "dice": f_positive_dice}[base]
    pos, _, _ = masks(label)
    v1, g1 = _masked_sum(pred, pos, entry, with_grad)
    merged_rows = ~pos.any(axis=1)
    v2, g2 = _row_term(pred, merged_rows, unknown_cols, _clip_one(entry), with_grad)
    return _finish(v1 + v2, (g1 + g2) if with_grad else None, with_grad)


def loss_n_exclusive(pred, label: LabelField, base: str = "ce", epsilon: float = 1.0,
                     with_grad: bool = False):
    """Negative loss plus a mutual-exclusion term on annotated pixels.

    On a pixel with a positive entry the summed prediction of the unannotated
    classes is penalized; the term vanishes when every class is annotated.
    """
    pred = _check(pred, label)
    if base == "ce":
        entry = lambda a: f_exclusive_ce(a, epsilon)  # noqa: E731
    elif base == "dice":
        entry = f_negative_dice
    else:
        raise KeyError(base)
    pos, neg, _ = masks(label)
    v1, g1 = _masked_sum(pred, neg, entry, with_grad)
    unknown_cols = label.known_classes.complement().indices()
    merged_rows = pos.any(axis=1)
    if unknown_cols.size == 0:
        return _finish(v1, g1, with_grad)
    v2, g2 = _row_term(pred, merged_rows, unknown_cols, entry, with_grad)
    return _finish(v1 + v2, (g1 + g2) if with_grad else None, with_grad)


def family_loss(family: LossFamily, pred, label: LabelField, with_grad: bool = False):
    tag = family.tag
    if tag is Family.POSITIVE_CE:
        return loss_p_ce(pred, label, with_grad)
    if tag is Family.NEGATIVE_CE:
        return loss_n_ce(pred, label, with_grad)
    if tag is Family.POSITIVE_DICE:
        return loss_p_dice(pred, label, with_grad)
    if tag is Family.NEGATIVE_DICE:
        return loss_n_dice(pred, label, with_grad)
    if tag is Family.TARGET_ADAPTIVE_CE:
        return loss_p_target_adaptive(pred, label, "ce", with_grad)
    if tag is Family.TARGET_ADAPTIVE_DICE:
        return loss_p_target_adaptive(pred, label, "dice", with_grad)
    if tag is Family.EXCLUSIVE_CE:
        return loss_n_exclusive(pred, label, "ce", family.epsilon, with_grad)
    return loss_n_exclusive(pred, label, "dice", family.epsilon, with_grad)


def loss_comp(pred, label: LabelField, spec: CompLossSpec = CompLossSpec(), with_grad: bool = False):
    """``alpha1 * L_P + alpha2 * L_N``."""
    if not isinstance(spec, CompLossSpec):
        raise TypeError("spec must be a CompLossSpec")
    if with_grad:
        vp, gp = family_loss(spec.positive, pred, label, True)
        vn, gn = family_loss(spec.negative, pred, label, True)
        return spec.alpha1 * vp + spec.alpha2 * vn, spec.alpha1 * gp + spec.alpha2 * gn
    return (spec.alpha1 * family_loss(spec.positive, pred, label)
            + spec.alpha2 * family_loss(spec.negative, pred, label))


def loss_conventional_ce(pred, numeric_label, with_grad: bool = False):
    """Binary cross entropy against a numeric (possibly ``p``-valued) label."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(numeric_label, dtype=np.float64)
    if pred.shape[-y.ndim:] != y.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match label {y.shape}")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("numeric label entries must lie in [0, 1]")
    vp, dp = _neg_log(pred)
    vn, dn = _neg_log(1.0 - pred)
    value = (y * vp + (1.0 - y) * vn).sum(axis=(-2, -1))
    return _finish(value, y * dp - (1.0 - y) * dn if with_grad else None, with_grad)
