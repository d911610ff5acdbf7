"""Brute-force certification of loss compatibility on small instances.

A loss is *compatible* over a partial label when the one-hot ground truth is
among its minimizers.  The oracle searches the prediction box ``[0, 1]^(V x m)``
on a grid, using only raw loss evaluations (never the autograd engine), and
compares the minimum it finds with the loss at the ground truth.

Loss callables are vectorized: ``loss(pred)`` accepts ``(..., V, m)`` and
returns the leading shape.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditional import ConditionalLabelStack, loss_cc, loss_prior, make_supervision
from .labels import ClassSet, LabelField, encode_full, numeric_encoding, restrict
from .losses import CompLossSpec, Family, LossFamily, family_loss, loss_comp, loss_conventional_ce

Loss = Callable[[np.ndarray], np.ndarray]

SEPARABLE_TOL = 1e-9
JOINT_TOL = 1e-4


class NotSeparableError(ValueError):
    """The loss couples entries; use :func:`minimize_joint`."""


class ConvergenceError(RuntimeError):
    """Coordinate descent did not settle within its sweep budget."""


class PreconditionError(ValueError):
    pass


@dataclass
class CompatReport:
    loss_id: str
    v: int
    m: int
    kept: tuple[int, ...]
    min_value: float
    gt_value: float
    tolerance: float
    method: str
    witness: np.ndarray = field(repr=False)

    @property
    def margin(self) -> float:
        return self.gt_value - self.min_value

    @property
    def compatible(self) -> bool:
        return self.gt_value <= self.min_value + self.tolerance

    @property
    def verdict(self) -> str:
        return "compatible" if self.compatible else "incompatible"

    def line(self) -> str:
        kept = " ".join(map(str, self.kept))
        return (f"{self.loss_id} V={self.v} m={self.m} kept=[{kept}] method={self.method} "
                f"min={self.min_value:.6g} at_gt={self.gt_value:.6g} margin={self.margin:.6g} "
                f"verdict={self.verdict}")

    def row(self) -> list[str]:
        return [self.loss_id, str(self.v), str(self.m), " ".join(map(str, self.kept)), self.method,
                f"{self.min_value:.6g}", f"{self.gt_value:.6g}", f"{self.margin:.6g}", self.verdict]


CSV_HEADER = ["loss", "V", "m", "kept", "method", "min", "at_gt", "margin", "verdict"]


def reports_csv(reports: Sequence[CompatReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def grid(step: float) -> np.ndarray:
    if not 0 < step <= 0.1:
        raise ValueError("grid_step must lie in (0, 0.1]")
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


def is_separable(loss: Loss, shape: tuple[int, int], rng: np.random.Generator, trials: int = 12) -> bool:
    """Probe additive separability: ``f(x_ab) + f(x) == f(x_a) + f(x_b)`` for entry pairs.

    Every pair of entries sharing a pixel row is probed, since merged terms
    couple exactly those, plus ``trials`` random pairs across rows.  Probe
    values stay below 0.3 so that no summed row reaches the clip at 1, where a
    merged term is flat and would look separable.
    """
    v, m = shape
    pairs = [((i, a), (i, b)) for i in range(v) for a in range(m) for b in range(a + 1, m)]
    if v > 1:
        for _ in range(trials):
            i1, i2 = rng.choice(v, size=2, replace=False)
            pairs.append(((int(i1), int(rng.integers(m))), (int(i2), int(rng.integers(m)))))
    if not pairs:
        return True
    probes = []
    for e1, e2 in pairs:
        x = rng.uniform(0.02, 0.3, size=shape)
        u, w = rng.uniform(0.0, 0.3, size=2)
        xa, xb, xab = x.copy(), x.copy(), x.copy()
        xa[e1], xb[e2] = u, w
        xab[e1], xab[e2] = u, w
        probes += [x, xa, xb, xab]
    vals = loss(np.stack(probes)).reshape(-1, 4)
    lhs, rhs = vals[:, 3] + vals[:, 0], vals[:, 1] + vals[:, 2]
    scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return bool(np.all(np.abs(lhs - rhs) <= 1e-9 * scale))


def minimize_separable(loss: Loss, shape: tuple[int, int], grid_step: float = 0.01,
                       check: bool = True, seed: int = 0) -> tuple[float, np.ndarray]:
    """Per-entry 1-D grid search; the global minimum is the sum of per-entry minima."""
    g = grid(grid_step)
    v, m = shape
    if check and not is_separable(loss, shape, np.random.default_rng(seed)):
        raise NotSeparableError("loss is not separable across entries")
    n = v * m
    cand = np.zeros((n, g.size, n))
    cand[np.arange(n), :, np.arange(n)] = g
    vals = loss(cand.reshape(n, g.size, v, m))  # (n, G)
    witness = g[np.argmin(vals, axis=1)].reshape(v, m)
    return float(loss(witness)), witness


def minimize_joint(loss: Loss, shape: tuple[int, int], grid_step: float = 0.01, restarts: int = 50,
                   seed: int = 0, max_sweeps: int = 200, return_trace: bool = False):
    """Coordinate descent on the grid from ``restarts`` random starts, run as one batch.

    Each coordinate move is exact over the grid, so every restart's objective
    is non-increasing; a restart stops moving once a full sweep changes nothing.
    """
    g = grid(grid_step)
    v, m = shape
    n = v * m
    rng = np.random.default_rng(seed)
    x = g[rng.integers(g.size, size=(restarts, n))]
    cur = loss(x.reshape(restarts, v, m))
    trace = [float(cur.min())]
    for _ in range(max_sweeps):
        moved = False
        for e in range(n):
            cand = np.repeat(x[:, None, :], g.size, axis=1)
            cand[:, :, e] = g
            vals = loss(cand.reshape(restarts, g.size, v, m))
            best = np.argmin(vals, axis=1)
            bv = vals[np.arange(restarts), best]
            better = bv < cur - 1e-15
            if better.any():
                moved = True
                x[better, e] = g[best[better]]
                cur = np.where(better, bv, cur)
        trace.append(float(cur.min()))
        if not moved:
            break
    else:
        raise ConvergenceError(f"coordinate descent still moving after {max_sweeps} sweeps")
    k = int(np.argmin(cur))
    result = (float(cur[k]), x[k].reshape(v, m))
    return (*result, trace) if return_trace else result


def check_compatibility(loss: Loss, label: LabelField, gt_value_point: np.ndarray, loss_id: str = "loss",
                        tolerance: float | None = None, method: str = "auto", grid_step: float = 0.01,
                        seed: int = 0, restarts: int = 50) -> CompatReport:
    """Compare ``loss(ground truth)`` with the grid minimum.

    ``gt_value_point`` is the numeric ground truth in the same layout the loss
    consumes (``(V, m)`` for plain losses, ``(V, 2m)`` for split predictions).
    """
    shape = gt_value_point.shape
    if method == "auto":
        method = "separable" if is_separable(loss, shape, np.random.default_rng(seed)) else "joint"
    if method == "separable":
        min_value, witness = minimize_separable(loss, shape, grid_step, check=False)
        tol = SEPARABLE_TOL if tolerance is None else tolerance
    elif method == "joint":
        min_value, witness = minimize_joint(loss, shape, grid_step, restarts=restarts, seed=seed)
        tol = JOINT_TOL if tolerance is None else tolerance
    else:
        raise ValueError(f"unknown method {method!r}")
    return CompatReport(loss_id, label.num_pixels, label.m, tuple(label.known_classes), min_value,
                        float(loss(gt_value_point)), tol, method, witness)


def check_linearity(loss1: Callable[[LabelField], Loss], loss2: Callable[[LabelField], Loss],
                    w1: float, w2: float, instances: Sequence[tuple[LabelField, LabelField]],
                    loss_id: str = "combo", **kw) -> list[CompatReport]:
    """Certify ``w1*loss1 + w2*loss2`` on every ``(label, ground truth)`` instance.

    ``loss1`` and ``loss2`` build a loss from a label.  Each component is
    certified first; an incompatible component violates the precondition.
    """
    if not (w1 > 0 and w2 > 0):
        raise PreconditionError("linearity needs w1 > 0 and w2 > 0")
    out = []
    for label, gt in instances:
        point = numeric_encoding(gt)
        f1, f2 = loss1(label), loss2(label)
        for part, name in ((f1, "part1"), (f2, "part2")):
            rep = check_compatibility(part, label, point, f"{loss_id}:{name}", **kw)
            if not rep.compatible:
                raise PreconditionError(f"component {name} is not compatible: {rep.line()}")

        def combo(x, f1=f1, f2=f2):
            return w1 * f1(x) + w2 * f2(x)

        out.append(check_compatibility(combo, label, point, f"{loss_id}[{w1:.3g},{w2:.3g}]", **kw))
    return out


# random instances -----------------------------------------------------------------

def random_instance(rng: np.random.Generator, v_max: int = 8, ms: Sequence[int] = (3, 4),
                    v_min: int = 1, need_unlabeled: bool = False) -> tuple[LabelField, LabelField]:
    """A random ``(partial label, ground truth)`` pair with ``1 <= q <= m-2``."""
    while True:
        m = int(rng.choice(ms))
        v = int(rng.integers(v_min, v_max + 1))
        gt = encode_full(rng.integers(m, size=(1, v)), m)
        q = int(rng.integers(1, m - 1))
        keep = ClassSet.of(rng.choice(m, size=q, replace=False), m)
        label = restrict(gt, keep)
        if need_unlabeled and not (label.class_map() < 0).any():
            continue
        return label, gt


def bind(family_or_spec, label: LabelField) -> Loss:
    if isinstance(family_or_spec, CompLossSpec):
        return lambda x: loss_comp(x, label, family_or_spec)
    return lambda x: family_loss(family_or_spec, x, label)


PAIRS = {
    "ce": CompLossSpec.parse("p_ce", "n_ce"),
    "dice": CompLossSpec.parse("p_dice", "n_dice"),
    "ta_ex_ce": CompLossSpec.parse("ta_ce", "ex_ce"),
    "ta_ex_dice": CompLossSpec.parse("ta_dice", "ex_dice"),
}


def suite_compatibility(seed: int, n: int = 100, restarts: int = 50) -> list[CompatReport]:
    rng = np.random.default_rng([seed, 1])
    out = []
    for k in range(n):
        label, gt = random_instance(rng)
        point = numeric_encoding(gt)
        for name, spec in PAIRS.items():
            out.append(check_compatibility(bind(spec, label), label, point, f"comp_{name}",
                                           seed=seed + k, restarts=restarts))
    return out


def suite_incompatibility(seed: int, n: int = 100) -> list[CompatReport]:
    rng = np.random.default_rng([seed, 2])
    out = []
    for _ in range(n):
        label, gt = random_instance(rng, need_unlabeled=True)
        a = numeric_encoding(label)
        out.append(check_compatibility(lambda x, a=a: loss_conventional_ce(x, a), label,
                                       numeric_encoding(gt), "conventional_ce", method="separable"))
    return out


FAMILIES = [LossFamily(f) for f in Family]


def suite_linearity(seed: int, n: int = 20, restarts: int = 50) -> list[CompatReport]:
    rng = np.random.default_rng([seed, 3])
    out = []
    for k in range(n):
        label, gt = random_instance(rng)
        f1, f2 = rng.choice(len(FAMILIES), size=2, replace=False)
        w1, w2 = rng.uniform(0.05, 5.0, size=2)
        fam1, fam2 = FAMILIES[f1], FAMILIES[f2]
        out += check_linearity(lambda lb, f=fam1: bind(f, lb), lambda lb, f=fam2: bind(f, lb),
                               float(w1), float(w2), [(label, gt)],
                               loss_id=f"{fam1.tag.value}+{fam2.tag.value}", seed=seed + k, restarts=restarts)
    return out


def random_condition(rng: np.random.Generator, gt: LabelField) -> ConditionalLabelStack:
    return ConditionalLabelStack(rng.integers(0, 2, size=(gt.m, gt.num_pixels)))


def suite_prior(seed: int, n: int = 100, restarts: int = 50,
                spec: CompLossSpec = CompLossSpec()) -> list[tuple[float, CompatReport]]:
    """Prior loss at the gold split target, and its joint grid minimum."""
    rng = np.random.default_rng([seed, 4])
    out = []
    for k in range(n):
        label, gt = random_instance(rng, v_max=4, ms=(3,))
        cond = random_condition(rng, gt)
        gold = make_supervision(label, cond).numeric(0.0)
        at_gold = float(loss_prior(gold, cond, spec))
        gt_point = make_supervision(gt, cond).numeric(0.0)
        rep = check_compatibility(lambda z, c=cond: loss_prior(z, c, spec), label, gt_point,
                                  "prior", method="joint", seed=seed + k, restarts=restarts)
        out.append((at_gold, rep))
    return out


def suite_conditional(seed: int, n: int = 20, restarts: int = 50,
                      spec: CompLossSpec = CompLossSpec()) -> list[CompatReport]:
    """Joint certification of the conditional-compatible loss over the split prediction."""
    rng = np.random.default_rng([seed, 5])
    out = []
    for k in range(n):
        label, gt = random_instance(rng, v_max=4, ms=(3,))
        cond = random_condition(rng, gt)
        point = make_supervision(gt, cond).numeric(0.0)
        out.append(check_compatibility(lambda z, c=cond, lb=label: loss_cc(z, lb, c, spec), label, point,
                                       "cc", method="joint", seed=seed + k, restarts=restarts))
    return out
