"""The six-model ablation ladder on a synthetic partial-annotation task."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .metrics import DiceResult
from .net import Params
from .synthdata import PartialSample, TaskSpec, generate, partialize
from .trainer import EpochRecord, TrainConfig, evaluate, train_dcl, train_stage1

PRESETS: dict[int, dict] = {
    1: dict(objective="conventional_ce", conditionals=False, prior=False, dual=False),
    2: dict(objective="positive_ce", conditionals=False, prior=False, dual=False),
    3: dict(objective="comp", conditionals=False, prior=False, dual=False),
    4: dict(objective="comp", conditionals=True, prior=False, dual=False),
    5: dict(objective="comp", conditionals=True, prior=True, dual=False),
    6: dict(objective="comp", conditionals=True, prior=True, dual=True),
}


# Stage 1 at the single-run default step of 1e-2 collapses the softmax presets on
# this task, so the ladder trains every preset with 1e-3.
ABLATION_TRAIN = TrainConfig(lr1=1e-3)


class PresetError(ValueError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    n_train: int = 40
    n_val: int = 10
    n_test: int = 20
    q: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = ABLATION_TRAIN


def preset_config(preset: int, base: TrainConfig, seed: int | None = None) -> TrainConfig:
    if preset not in PRESETS:
        raise PresetError(f"preset must be one of 1..6, got {preset}")
    kw = dict(PRESETS[preset])
    if seed is not None:
        kw["seed"] = seed
    return replace(base, **kw)


@dataclass
class Splits:
    train: list[PartialSample]
    val: list[PartialSample]
    test: list[PartialSample]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.val, self.test):
            for item in split:
                h.update(np.ascontiguousarray(item.image, dtype="<f8").tobytes())
                h.update(item.sample.gt.to_bytes())
                h.update(item.label.to_bytes())
        return h.hexdigest()


def make_splits(task: TaskSpec, n_train: int, n_val: int, n_test: int, q: int, seed: int) -> Splits:
    """Disjoint train/val/test samples of ``replace(task, seed=seed)``, each partialized with ``q``."""
    spec = replace(task, seed=seed)
    samples = generate(spec, n_train + n_val + n_test)
    tr = partialize(samples[:n_train], q, seed)
    va = partialize(samples[n_train : n_train + n_val], q, seed + 1)
    te = partialize(samples[n_train + n_val :], q, seed + 2)
    return Splits(tr, va, te)


@dataclass
class PresetRun:
    preset: int
    seed: int
    config: TrainConfig
    params: Params
    log: list[EpochRecord]
    val: DiceResult
    test: DiceResult


def run_seed(presets: Sequence[int], acfg: AblationConfig, seed: int) -> list[PresetRun]:
    """Train every preset on one seed.  Preset 6 starts from preset 5's stage-1 model when both run."""
    for p in presets:
        preset_config(p, acfg.train)
    splits = make_splits(acfg.task, acfg.n_train, acfg.n_val, acfg.n_test, acfg.q, seed)
    stage1: dict[int, tuple[Params, list[EpochRecord]]] = {}
    out = []
    for p in sorted(presets):
        cfg = preset_config(p, acfg.train, seed)
        netcfg = cfg.net_config(acfg.task.m)
        if p == 6 and 5 in stage1:
            params, log = train_dcl(splits.train, splits.val, cfg, init=stage1[5][0], stage1_log=stage1[5][1])
        elif cfg.dual:
            params, log = train_dcl(splits.train, splits.val, cfg)
        else:
            params, log = train_stage1(splits.train, splits.val, cfg)
            stage1[p] = (params, log)
        val = evaluate(params, netcfg, splits.val, splits.train, cfg.conditionals)
        test = evaluate(params, netcfg, splits.test, splits.train, cfg.conditionals)
        out.append(PresetRun(p, seed, cfg, params, log, val, test))
    return out


@dataclass(frozen=True)
class AblationRow:
    preset: int
    per_seed: tuple[float, ...]
    per_class: np.ndarray  # mean over seeds

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed))


def summarize(runs: Sequence[PresetRun]) -> list[AblationRow]:
    rows = []
    for p in sorted({r.preset for r in runs}):
        sel = sorted((r for r in runs if r.preset == p), key=lambda r: r.seed)
        rows.append(AblationRow(p, tuple(r.test.foreground_mean for r in sel),
                                np.mean([r.test.per_class for r in sel], axis=0)))
    return rows


def run_ablation(presets: Sequence[int], acfg: AblationConfig) -> tuple[list[AblationRow], list[PresetRun]]:
    runs = [r for s in acfg.seeds for r in run_seed(presets, acfg, s)]
    return summarize(runs), runs


def table_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    m = len(rows[0].per_class) if rows else 0
    n_seeds = len(rows[0].per_seed) if rows else 0
    w.writerow(["preset", "mean_dice", "std_dice", *[f"seed{k}" for k in range(n_seeds)],
                *[f"class{j}" for j in range(m)]])
    for r in rows:
        w.writerow([r.preset, f"{r.mean:.6g}", f"{r.std:.6g}", *[f"{d:.6g}" for d in r.per_seed],
                    *[f"{d:.6g}" for d in r.per_class]])
    return buf.getvalue()


def runs_csv(runs: Sequence[PresetRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    m = len(runs[0].test.per_class) if runs else 0
    w.writerow(["preset", "seed", "val_dice", "test_dice", *[f"test_class{j}" for j in range(m)]])
    for r in sorted(runs, key=lambda r: (r.preset, r.seed)):
        w.writerow([r.preset, r.seed, f"{r.val.foreground_mean:.6g}", f"{r.test.foreground_mean:.6g}",
                    *[f"{d:.6g}" for d in r.test.per_class]])
    return buf.getvalue()
