"""Conditional supervision: intersection/extra targets and the prior loss.

A prediction ``z_hat`` has shape ``(..., V, 2m)``: the first ``m`` channels are
the intersection with the conditional labels, the last ``m`` the extra part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import LabelError, LabelField, State
from .losses import CompLossSpec, loss_comp, negative_entry


@dataclass(frozen=True, eq=False)
class ConditionalLabelStack:
    """One binary map per class, taken from that class's conditional image.

    ``maps`` has shape ``(m, V)``; ``maps[j]`` is 1 inside structure ``j`` of
    the conditional image annotated with class ``j``.
    """

    maps: np.ndarray

    def __post_init__(self) -> None:
        maps = np.asarray(self.maps)
        if maps.ndim != 2:
            raise ValueError("maps must have shape (m, V)")
        if not np.all((maps == 0) | (maps == 1)):
            raise ValueError("conditional maps must be binary")
        maps = maps.astype(np.uint8)
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)

    @classmethod
    def from_donors(cls, donors: list[LabelField]) -> "ConditionalLabelStack":
        """Stack column ``j`` of ``donors[j]``; each donor must annotate its class."""
        rows = []
        for j, donor in enumerate(donors):
            if j not in donor.known_classes:
                raise LabelError(f"donor for class {j} does not annotate it")
            rows.append(donor.states[:, j] == State.POSITIVE)
        return cls(np.stack(rows).astype(np.uint8))

    @property
    def m(self) -> int:
        return self.maps.shape[0]

    def matrix(self) -> np.ndarray:
        """The ``(V, m)`` view aligned with label rows."""
        return self.maps.T


@dataclass(frozen=True)
class SupervisionTarget:
    intersection: LabelField
    extra: LabelField

    def numeric(self, unknown_value: float = 0.0) -> np.ndarray:
        """``(V, 2m)`` numeric target with UNKNOWN replaced by ``unknown_value``."""
        out = []
        for half in (self.intersection, self.extra):
            a = (half.states == State.POSITIVE).astype(np.float64)
            a[half.states == State.UNKNOWN] = unknown_value
            out.append(a)
        return np.concatenate(out, axis=1)

    def to_bytes(self) -> bytes:
        return self.intersection.to_bytes() + self.extra.to_bytes()


# (target state, conditional bit) -> (intersection state, extra state)
_P, _N, _U = State.POSITIVE, State.NEGATIVE, State.UNKNOWN
SUPERVISION_TABLE = {
    (_P, 1): (_P, _N),
    (_P, 0): (_N, _P),
    (_N, 1): (_N, _N),
    (_N, 0): (_N, _N),
    (_U, 1): (_U, _N),
    (_U, 0): (_N, _U),
}


def make_supervision(target_label: LabelField, cond: ConditionalLabelStack) -> SupervisionTarget:
    """Split the target label into the parts inside and outside the conditional labels."""
    c = cond.matrix()
    if c.shape != target_label.states.shape:
        raise ValueError(f"conditional stack {c.shape} does not match label {target_label.states.shape}")
    t = target_label.states
    inter = np.empty_like(t)
    extra = np.empty_like(t)
    for (ts, cs), (zi, ze) in SUPERVISION_TABLE.items():
        sel = (t == ts) & (c == cs)
        inter[sel] = zi
        extra[sel] = ze
    known = target_label.known_classes
    h, w = target_label.height, target_label.width
    return SupervisionTarget(LabelField(h, w, inter, known), LabelField(h, w, extra, known))


def split_halves(z_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.shape[-1] % 2:
        raise ValueError("z_hat must have an even number of channels")
    m = z_hat.shape[-1] // 2
    return z_hat[..., :m], z_hat[..., m:]


def recompose(z_hat: np.ndarray) -> np.ndarray:
    """Segmentation from intersection and extra: ``min(z_inter + z_extra, 1)``."""
    inter, extra = split_halves(z_hat)
    return np.minimum(inter + extra, 1.0)


def loss_prior(z_hat, cond: ConditionalLabelStack, spec: CompLossSpec = CompLossSpec(),
               with_grad: bool = False):
    """Inclusiveness and exclusiveness penalty.

    The intersection must vanish where the conditional map is 0 and the extra
    part must vanish where it is 1; both use the negative-side distance of
    ``spec``.
    """
    inter, extra = split_halves(z_hat)
    c = cond.matrix().astype(bool)
    if inter.shape[-2:] != c.shape:
        raise ValueError(f"z_hat halves {inter.shape[-2:]} do not match conditional stack {c.shape}")
    f = negative_entry(spec.negative)
    vi, di = f(inter)
    ve, de = f(extra)
    value = np.where(~c, vi, 0.0).sum(axis=(-2, -1)) + np.where(c, ve, 0.0).sum(axis=(-2, -1))
    if not with_grad:
        return value
    return value, np.concatenate([np.where(~c, di, 0.0), np.where(c, de, 0.0)], axis=-1)


def loss_comp_z(z_hat, target_label: LabelField, spec: CompLossSpec = CompLossSpec(),
                with_grad: bool = False):
    """Compatible loss of a split prediction, evaluated on its recomposition.

    This is the definition of the split-target loss, so it equals
    ``loss_comp(recompose(z_hat), target_label)`` exactly.
    """
    inter, extra = split_halves(z_hat)
    s = inter + extra
    y_hat = np.minimum(s, 1.0)
    if not with_grad:
        return loss_comp(y_hat, target_label, spec)
    value, g = loss_comp(y_hat, target_label, spec, with_grad=True)
    g = np.where(s < 1.0, g, 0.0)
    return value, np.concatenate([g, g], axis=-1)


def loss_cc(z_hat, target_label: LabelField, cond: ConditionalLabelStack,
            spec: CompLossSpec = CompLossSpec(), with_grad: bool = False, use_prior: bool = True):
    """Conditional-compatible loss: compatible loss on the recomposition plus the prior loss."""
    if not with_grad:
        value = loss_comp_z(z_hat, target_label, spec)
        return value + loss_prior(z_hat, cond, spec) if use_prior else value
    value, grad = loss_comp_z(z_hat, target_label, spec, with_grad=True)
    if use_prior:
        vp, gp = loss_prior(z_hat, cond, spec, with_grad=True)
        value, grad = value + vp, grad + gp
    return value, grad
