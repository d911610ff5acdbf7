"""Conditional training of PrimNet and the primal/dual closed loop.

Stage 1 fits PrimNet on conditional bundles.  Stage 2 alternates dual steps:
for a randomly selected class ``s`` the target image and the class-``s``
conditional pair swap roles, the frozen DualNet segments the swapped bundle,
and the blended objective ``(1 - lam) * primal + lam * dual`` is minimized
with respect to PrimNet only.  The soft class-``s`` prediction of PrimNet is
fed to DualNet as a conditional mask, which is the only path by which the
dual term reaches PrimNet.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .conditional import ConditionalLabelStack, loss_cc
from .labels import LabelField, numeric_encoding
from .losses import CompLossSpec, loss_conventional_ce, loss_p_ce
from .metrics import DiceResult, dice_batch
from .net import (CompNetConfig, NetPair, Params, copy_params, forward, init_params, params_hash,
                  recompose_tensor, save_checkpoint, snapshot_sync)
from .synthdata import DonorError, PartialSample, donors_by_class, fixed_conditionals, sample_conditionals

OBJECTIVES = ("conventional_ce", "positive_ce", "comp")


class TrainingError(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    lr1: float = 1e-2
    lr2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs1: int = 60
    epochs2: int = 30
    patience: int = 10
    seed: int = 0
    loss: CompLossSpec = field(default_factory=CompLossSpec)
    objective: str = "comp"
    conditionals: bool = True
    prior: bool = True
    dual: bool = False
    widths: tuple[int, int, int] = (16, 32, 64)
    head_bias: float = -2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not (self.lr1 > 0 and self.lr2 > 0):
            raise ValueError("learning rates must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1 or self.epochs1 < 0 or self.epochs2 < 0 or self.patience < 1:
            raise ValueError("batch size and patience must be >= 1, epochs >= 0")
        if self.objective != "comp" and (self.prior or self.dual):
            raise ValueError("prior loss and dual loop need the split (comp) objective")
        if (self.prior or self.dual) and not self.conditionals:
            raise ValueError("prior loss and dual loop need conditional inputs")

    def net_config(self, m: int) -> CompNetConfig:
        if self.objective == "comp":
            return CompNetConfig(m, "conditional", "sigmoid", self.widths, self.head_bias)
        return CompNetConfig(m, "single", "softmax", self.widths, self.head_bias)

    def echo(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if k == "loss":
                out.update(positive=self.loss.positive.tag.value, negative=self.loss.negative.tag.value,
                           alpha1=repr(self.loss.alpha1), alpha2=repr(self.loss.alpha2))
            elif k == "widths":
                out[k] = " ".join(map(str, v))
            else:
                out[k] = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        return out


class Adam:
    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# batches ---------------------------------------------------------------------------

@dataclass
class Batch:
    indices: list[int]
    images: np.ndarray  # (N, H, W)
    cond_images: np.ndarray  # (N, m, H, W)
    cond_masks: np.ndarray  # (N, m, H, W)
    donors: list[list[int]]  # per sample, donor pool index per class (empty without conditionals)
    labels: list[LabelField]
    stacks: list[ConditionalLabelStack | None]


def make_batch(pool: Sequence[PartialSample], indices: Sequence[int], rng: np.random.Generator,
               conditionals: bool) -> Batch:
    m = pool[0].label.m
    h, w = pool[0].image.shape
    n = len(indices)
    images = np.stack([pool[i].image for i in indices])
    ci = np.zeros((n, m, h, w))
    cm = np.zeros((n, m, h, w))
    donors: list[list[int]] = []
    stacks: list[ConditionalLabelStack | None] = []
    for k, i in enumerate(indices):
        if conditionals:
            ci[k], cm[k], chosen = sample_conditionals(pool, i, rng)
            donors.append(chosen)
            stacks.append(ConditionalLabelStack(cm[k].reshape(m, -1).astype(np.uint8)))
        else:
            donors.append([])
            stacks.append(None)
    return Batch(list(indices), images, ci, cm, donors, [pool[i].label for i in indices], stacks)


def swap_pair(target_image: np.ndarray, target_mask: np.ndarray, cond_images: np.ndarray,
              cond_masks: np.ndarray, s: int):
    """Exchange the target ``(image, mask)`` with conditional pair ``s``; an involution."""
    images, masks = cond_images.copy(), cond_masks.copy()
    new_target, new_mask = images[s].copy(), masks[s].copy()
    images[s], masks[s] = target_image, target_mask
    return new_target, new_mask, images, masks


# objectives ------------------------------------------------------------------------

def _sample_loss(x: np.ndarray, label: LabelField, stack, cfg: TrainConfig):
    if cfg.objective == "conventional_ce":
        return loss_conventional_ce(x, numeric_encoding(label), with_grad=True)
    if cfg.objective == "positive_ce":
        return loss_p_ce(x, label, with_grad=True)
    return loss_cc(x, label, stack, cfg.loss, with_grad=True, use_prior=cfg.prior)


def batch_objective(pred: Tensor, labels: Sequence[LabelField], stacks, cfg: TrainConfig) -> Tensor:
    """Summed per-sample loss of ``(N, C, H, W)`` predictions, divided by the batch size."""
    rows = ag.to_rows(pred)
    n = rows.shape[0]
    norm = 1.0 / n

    def fn(x):
        total, grad = 0.0, np.empty_like(x)
        for i in range(n):
            val, grad[i] = _sample_loss(x[i], labels[i], stacks[i], cfg)
            total += float(val)
        return total * norm, grad * norm

    return ag.kernel(rows, fn)


def _tensors(params: Params, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _grads(theta: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in theta.items()}


def primal_objective(theta: dict[str, Tensor], batch: Batch, cfg: TrainConfig, netcfg: CompNetConfig,
                     trace: list | None = None):
    z = forward(theta, batch.images, batch.cond_images, batch.cond_masks, netcfg, trace)
    if trace is not None and netcfg.head == "conditional":
        m = netcfg.m
        trace.append(np.abs(z.data[:, :m] + z.data[:, m:] - 1.0).min())
    return batch_objective(z, batch.labels, batch.stacks, cfg), z


# dual step -------------------------------------------------------------------------

@dataclass
class DualStep:
    """One closed-loop iteration (gradients are with respect to PrimNet only)."""

    selected: list[int]
    dual_targets: list[int]  # pool index of each swapped-in target (the class-s donor)
    dual_images: np.ndarray
    dual_masks: np.ndarray  # soft masks as fed to DualNet
    dual_stacks: list[ConditionalLabelStack]  # hardened conditional labels for gold targets
    primal: float
    dual: float
    objective: float
    grads: dict[str, np.ndarray] = field(repr=False)


def select_class(pool: Sequence[PartialSample], donors: Sequence[int], rng: np.random.Generator) -> int:
    m = len(donors)
    for _ in range(m):
        s = int(rng.integers(m))
        if s in pool[donors[s]].label.known_classes:
            return s
    raise DonorError(f"no annotated swap target after {m} draws")


def dual_objective(theta: dict[str, Tensor], frozen: dict[str, Tensor], batch: Batch, pool: Sequence[PartialSample],
                   selected: Sequence[int], cfg: TrainConfig, netcfg: CompNetConfig, trace: list | None = None):
    """Primal and dual objective tensors for fixed class selections.

    ``trace`` collects distances from every kink (see :func:`compatseg.net.forward_input`),
    including the clip of the recomposition and the 0.5 hardening threshold.
    """
    m = netcfg.m
    a, z_p = primal_objective(theta, batch, cfg, netcfg, trace)
    soft = recompose_tensor(z_p, m)
    if trace is not None:
        trace.append(np.abs(soft.data - 0.5).min())
    n = len(batch.indices)
    onehot = np.zeros_like(batch.cond_masks)
    onehot[np.arange(n), list(selected)] = 1.0
    hard = soft.data > 0.5
    targets, images, stacks, dual_targets = [], [], [], []
    for i, s in enumerate(selected):
        donor = batch.donors[i][s]
        t_img, _, imgs, msks = swap_pair(batch.images[i], hard[i, s].astype(np.float64),
                                         batch.cond_images[i], batch.cond_masks[i], s)
        targets.append(t_img)
        images.append(imgs)
        stacks.append(ConditionalLabelStack(msks.reshape(m, -1).astype(np.uint8)))
        dual_targets.append(donor)
    masks = ag.add(Tensor(batch.cond_masks * (1.0 - onehot)), ag.mul(Tensor(onehot), soft))
    images = np.stack(images)
    z_d = forward(frozen, np.stack(targets), images, masks, netcfg, trace)
    if trace is not None:
        trace.append(np.abs(z_d.data[:, :m] + z_d.data[:, m:] - 1.0).min())
    b = batch_objective(z_d, [pool[d].label for d in dual_targets], stacks, cfg)
    info = (dual_targets, images, masks.data, stacks)
    return a, b, info


def dual_step(pair: NetPair, batch: Batch, pool: Sequence[PartialSample], cfg: TrainConfig,
              netcfg: CompNetConfig, rng: np.random.Generator) -> DualStep:
    """Blended objective and its gradient with respect to ``pair.prim``; ``pair.dual`` stays frozen."""
    selected = [select_class(pool, d, rng) for d in batch.donors]
    theta = _tensors(pair.prim, True)
    frozen = _tensors(pair.dual, False)
    a, b, (dual_targets, images, masks, stacks) = dual_objective(theta, frozen, batch, pool, selected, cfg, netcfg)
    obj = ag.add(ag.scale(a, 1.0 - cfg.lam), ag.scale(b, cfg.lam))
    ag.backward(obj)
    return DualStep(selected, dual_targets, images, masks, stacks, a.item(), b.item(), obj.item(), _grads(theta))


# evaluation ------------------------------------------------------------------------

def predict(params: Params, netcfg: CompNetConfig, images: np.ndarray, donor_pool: Sequence[PartialSample],
            conditionals: bool, batch_size: int = 16) -> np.ndarray:
    """``(N, V, m)`` class probabilities; conditionals are the lowest-index donors."""
    m = netcfg.m
    n, h, w = images.shape
    if conditionals:
        ci, cm, _ = fixed_conditionals(donor_pool)
    else:
        ci, cm = np.zeros((m, h, w)), np.zeros((m, h, w))
    out = []
    for lo in range(0, n, batch_size):
        chunk = images[lo : lo + batch_size]
        k = len(chunk)
        z = forward(params, chunk, np.broadcast_to(ci, (k, m, h, w)).copy(),
                    np.broadcast_to(cm, (k, m, h, w)).copy(), netcfg)
        y = recompose_tensor(z, m).data if netcfg.head == "conditional" else z.data
        out.append(y.reshape(k, m, h * w).transpose(0, 2, 1))
    return np.concatenate(out)


def evaluate(params: Params, netcfg: CompNetConfig, samples: Sequence[PartialSample],
             donor_pool: Sequence[PartialSample], conditionals: bool) -> DiceResult:
    images = np.stack([s.image for s in samples])
    pred = predict(params, netcfg, images, donor_pool, conditionals)
    return dice_batch(pred, [s.sample.gt for s in samples])


# training loops --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: int
    loss: float
    val_dice: np.ndarray
    sync: bool = False
    prim_hash: str = ""
    dual_hash: str = ""


def log_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    m = len(records[0].val_dice) if records else 0
    wr.writerow(["epoch", "stage", "loss", *[f"val_dice_{j}" for j in range(m)], "sync"])
    for r in records:
        wr.writerow([r.epoch, r.stage, f"{r.loss:.6g}", *[f"{d:.6g}" for d in r.val_dice], int(r.sync)])
    return buf.getvalue()


def _check_donors(pool: Sequence[PartialSample]) -> None:
    m = pool[0].label.m
    for j, cands in enumerate(donors_by_class(pool, m)):
        if not cands:
            raise DonorError(f"no annotated donor for class {j}")


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[lo : lo + size] for lo in range(0, n, size)]


def _guarded(step, where: str):
    try:
        return step()
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite value during {where}: {exc}") from exc


def train_stage1(train: Sequence[PartialSample], val: Sequence[PartialSample], cfg: TrainConfig,
                 checkpoint_dir: str | Path | None = None) -> tuple[Params, list[EpochRecord]]:
    """Fit PrimNet; returns the parameters with the best validation Dice and the epoch log."""
    if cfg.conditionals:
        _check_donors(train)
    netcfg = cfg.net_config(train[0].label.m)
    params = init_params(netcfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    adam = Adam(params, cfg.lr1, cfg.beta1, cfg.beta2, cfg.adam_eps)
    best_params, best = copy_params(params), -1.0
    log: list[EpochRecord] = []
    for epoch in range(cfg.epochs1):
        losses = []
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            batch = make_batch(train, idx, rng, cfg.conditionals)
            theta = _tensors(params, True)

            def step():
                obj, _ = primal_objective(theta, batch, cfg, netcfg)
                ag.backward(obj)
                return obj.item()

            losses.append(_guarded(step, f"stage 1 epoch {epoch} batch {b}"))
            adam.step(params, _grads(theta))
        res = evaluate(params, netcfg, val, train, cfg.conditionals)
        log.append(EpochRecord(epoch, 1, float(np.mean(losses)), res.per_class))
        if res.foreground_mean > best:
            best, best_params = res.foreground_mean, copy_params(params)
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "stage1_best.ckpt", best_params, netcfg)
    return (best_params if cfg.epochs1 else params), log


def train_dcl(train: Sequence[PartialSample], val: Sequence[PartialSample], cfg: TrainConfig,
              init: Params | None = None, checkpoint_dir: str | Path | None = None,
              stage1_log: Sequence[EpochRecord] = ()) -> tuple[Params, list[EpochRecord]]:
    """Stage 1 (unless ``init`` is given) followed by the dual closed loop.

    DualNet is re-synchronized from PrimNet whenever validation Dice has not
    improved for ``cfg.patience`` epochs; the loop ends when a synchronization
    brings no further improvement or the epoch budget runs out.
    """
    if init is None:
        params, log = train_stage1(train, val, cfg, checkpoint_dir)
    else:
        params, log = copy_params(init), list(stage1_log)
    if not cfg.dual or cfg.epochs2 == 0:
        return params, log
    _check_donors(train)
    netcfg = cfg.net_config(train[0].label.m)
    pair = NetPair.from_pretrained(params)
    rng = np.random.default_rng([cfg.seed, 2])
    adam = Adam(pair.prim, cfg.lr2, cfg.beta1, cfg.beta2, cfg.adam_eps)
    best = evaluate(pair.prim, netcfg, val, train, True).foreground_mean
    best_params = copy_params(pair.prim)
    since, improved_since_sync = 0, False
    for epoch in range(cfg.epochs2):
        losses = []
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            batch = make_batch(train, idx, rng, True)
            st = _guarded(lambda: dual_step(pair, batch, train, cfg, netcfg, rng), f"stage 2 epoch {epoch} batch {b}")
            losses.append(st.objective)
            adam.step(pair.prim, st.grads)
        res = evaluate(pair.prim, netcfg, val, train, True)
        rec = EpochRecord(epoch, 2, float(np.mean(losses)), res.per_class)
        log.append(rec)
        if res.foreground_mean > best:
            best, best_params = res.foreground_mean, copy_params(pair.prim)
            since, improved_since_sync = 0, True
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "dcl_best.ckpt", best_params, netcfg)
            continue
        since += 1
        if since >= cfg.patience:
            if not improved_since_sync:
                break
            snapshot_sync(pair)
            rec.sync, since, improved_since_sync = True, 0, False
            rec.prim_hash, rec.dual_hash = params_hash(pair.prim), params_hash(pair.dual)
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"sync_{epoch:04d}.ckpt", pair.prim, netcfg)
    return best_params, log
