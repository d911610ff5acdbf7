"""Central-difference checks of every loss kernel and of the full training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .conditional import ConditionalLabelStack, loss_cc, loss_prior
from .labels import ClassSet, encode_full, numeric_encoding, restrict
from .losses import CompLossSpec, Family, LossFamily, family_loss, loss_comp, loss_conventional_ce
from .net import CompNetConfig, init_params
from .synthdata import PartialSample, Sample, partialize
from .trainer import TrainConfig, dual_objective, make_batch, select_class

H, TOL = 1e-5, 1e-4
MARGIN = 1e-3  # minimum distance of a loss input from a kink for a point to count as interior
NET_MARGIN = 1e-4  # same for network activations; a step of H moves them by about H


@dataclass(frozen=True)
class CheckResult:
    name: str
    point: int
    passed: bool
    max_rel_err: float
    max_abs_err: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} point={self.point} max_rel_err={self.max_rel_err:.6g} max_abs_err={self.max_abs_err:.6g}"


def _instance(rng: np.random.Generator, v: int, m: int):
    gt = encode_full(rng.integers(m, size=(1, v)), m)
    q = int(rng.integers(1, m - 1))
    return restrict(gt, ClassSet.of(rng.choice(m, size=q, replace=False), m))


def _interior(rng: np.random.Generator, shape, label, split: bool) -> np.ndarray:
    """A random prediction away from the clip at 1 (summed channels and split halves)."""
    unk = label.known_classes.complement().indices()
    while True:
        x = rng.uniform(0.05, 0.95, size=shape)
        if split:
            m = shape[-1] // 2
            x *= 0.5
            s = x[:, :m] + x[:, m:]
        else:
            s = x
        merged = s[:, unk].sum(axis=-1)
        if np.abs(merged - 1.0).min() > MARGIN and np.abs(s - 1.0).min() > MARGIN:
            return x


def _kernel(fn: Callable) -> Callable[[Tensor], Tensor]:
    return lambda t: ag.kernel(t, fn)


def loss_checks(seed: int = 0, points: int = 10) -> list[CheckResult]:
    """Every loss family, the composed and conventional losses, the prior and the split loss."""
    out = []
    spec = CompLossSpec.parse("ta_ce", "ex_ce")
    for k in range(points):
        rng = np.random.default_rng([seed, k])
        v, m = int(rng.integers(2, 9)), int(rng.choice([3, 4]))
        label = _instance(rng, v, m)
        cond = ConditionalLabelStack(rng.integers(0, 2, size=(m, v)))
        x = _interior(rng, (v, m), label, split=False)
        z = _interior(rng, (v, 2 * m), label, split=True)
        cases = {f.value: (lambda a, f=f: family_loss(LossFamily(f), a, label, True), x) for f in Family}
        cases["comp"] = (lambda a: loss_comp(a, label, CompLossSpec(), True), x)
        cases["conventional_ce"] = (lambda a: loss_conventional_ce(a, numeric_encoding(label), True), x)
        cases["prior"] = (lambda a: loss_prior(a, cond, spec, True), z)
        cases["cc"] = (lambda a: loss_cc(a, label, cond, spec, True), z)
        for name, (fn, pt) in cases.items():
            r = ag.grad_check(_kernel(fn), pt, h=H, tol=TOL)
            out.append(CheckResult(name, k, r["passed"], r["max_rel_err"], r["max_abs_err"]))
    return out


# full objective --------------------------------------------------------------------

def _tiny_pool(rng: np.random.Generator, n: int = 6, m: int = 3, size: int = 8) -> list[PartialSample]:
    samples = []
    for _ in range(n):
        cmap = rng.integers(m, size=(size, size))
        samples.append(Sample(rng.normal(size=(size, size)), encode_full(cmap, m)))
    return partialize(samples, 1, int(rng.integers(2**31)))


def _unflatten(x: Tensor, shapes: dict[str, tuple[int, ...]]) -> dict[str, Tensor]:
    out, lo = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = ag.reshape(ag.take(x, slice(lo, lo + size)), shape)
        lo += size
    return out


def objective_checks(seed: int = 0, points: int = 10, coords_per_tensor: int = 4,
                     lam: float = 0.2) -> list[CheckResult]:
    """The blended primal/dual objective with respect to PrimNet parameters.

    A tiny CompNet keeps finite differences cheap.  Points are redrawn until
    every leaky-ReLU input, pooling window, clip and hardening threshold is at
    least ``NET_MARGIN`` away from its kink; a few coordinates per parameter tensor
    are differenced.
    """
    cfg = TrainConfig(lam=lam, loss=CompLossSpec.parse("ta_ce", "ex_ce"))
    netcfg = CompNetConfig(3, widths=(2, 3, 4), head_bias=-1.0)
    out = []
    for k in range(points):
        rng = np.random.default_rng([seed, 1000 + k])
        while True:
            pool = _tiny_pool(rng)
            batch = make_batch(pool, [0], rng, True)
            selected = [select_class(pool, d, rng) for d in batch.donors]
            theta = init_params(netcfg, int(rng.integers(2**31)))
            theta = {n: v + rng.normal(0, 0.1, size=v.shape) for n, v in theta.items()}
            frozen = {n: Tensor(v) for n, v in init_params(netcfg, int(rng.integers(2**31))).items()}
            trace: list = []
            dual_objective({n: Tensor(v) for n, v in theta.items()}, frozen, batch, pool, selected, cfg, netcfg, trace)
            if min(trace) > NET_MARGIN:
                break
        shapes = {n: v.shape for n, v in theta.items()}
        flat = np.concatenate([v.reshape(-1) for v in theta.values()])

        def f(x: Tensor) -> Tensor:
            a, b, _ = dual_objective(_unflatten(x, shapes), frozen, batch, pool, selected, cfg, netcfg)
            return ag.add(ag.scale(a, 1.0 - cfg.lam), ag.scale(b, cfg.lam))

        coords, lo = [], 0
        for shape in shapes.values():
            size = int(np.prod(shape))
            coords.extend(lo + rng.choice(size, size=min(coords_per_tensor, size), replace=False))
            lo += size
        r = ag.grad_check(f, flat, h=H, tol=TOL, atol=1e-9, coords=np.array(sorted(coords)))
        out.append(CheckResult("compnet_objective", k, r["passed"], r["max_rel_err"], r["max_abs_err"]))
    return out


def run_all(seed: int = 0, points: int = 10) -> list[CheckResult]:
    return loss_checks(seed, points) + objective_checks(seed, points)
