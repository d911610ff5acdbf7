"""Command-line entry points: gen, train, eval, oracle, ablate, gradcheck.

Exit status is 0 on success, 1 when a run fails validation (bad configuration,
failed certificate or gradient check) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from . import oracle
from .ablation import PRESETS, AblationConfig, Splits, make_splits, preset_config, run_seed, runs_csv, summarize, table_csv
from .config import ConfigError, RunConfig, ablation_defaults, dump_config, echo, load_config
from .gradcheck import run_all
from .metrics import DiceResult
from .net import load_checkpoint, save_checkpoint
from .synthdata import DonorError, dump_split, load_split
from .trainer import evaluate, log_csv, train_dcl, train_stage1

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.txt"


class ValidationFailure(Exception):
    pass


# output helpers ---------------------------------------------------------------------


class Outputs:
    """Collects files written under one output directory for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def write(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def manifest(self, command: str, seed: int | str, cfg_lines: Sequence[str], checksum: str, started: float) -> None:
        lines = [f"command={command}", f"version={__version__}", f"seed={seed}", f"dataset_sha256={checksum}",
                 f"wall_clock_s={time.perf_counter() - started:.6g}", "[config]", *cfg_lines, "[files]"]
        for name in sorted(set(self.files)):
            digest = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
            lines.append(f"{digest}  {name}")
        (self.root / MANIFEST).write_text("\n".join(lines) + "\n")


def dice_csv(res: DiceResult) -> str:
    m = res.per_sample.shape[1]
    rows = [",".join(["sample", *[f"dice_{j}" for j in range(m)], "foreground_mean"])]
    for k, d in enumerate(res.per_sample):
        rows.append(",".join([str(k), *[f"{v:.6g}" for v in d], f"{d[:-1].mean():.6g}"]))
    rows.append(",".join(["mean", *[f"{v:.6g}" for v in res.per_class], f"{res.foreground_mean:.6g}"]))
    return "\n".join(rows) + "\n"


def worker_cap() -> int:
    raw = os.environ.get("COMPATSEG_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"COMPATSEG_THREADS must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"COMPATSEG_THREADS must be a positive integer, got {raw!r}")
    return cap


# configuration ----------------------------------------------------------------------


def resolve(args: argparse.Namespace, base: RunConfig) -> RunConfig:
    cfg = load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = replace(cfg, split=replace(cfg.split, seed=args.seed), train=replace(cfg.train, seed=args.seed),
                      ablation=replace(cfg.ablation, seeds=(args.seed,)))
    if args.q is not None:
        cfg = replace(cfg, split=replace(cfg.split, q=args.q))
    if getattr(args, "preset", None) is not None and args.command == "train":
        cfg = replace(cfg, train=preset_config(args.preset, cfg.train))
    if args.lam is not None:
        cfg = replace(cfg, train=replace(cfg.train, lam=args.lam))
    return cfg


def splits_for(cfg: RunConfig) -> Splits:
    s = cfg.split
    return make_splits(cfg.task, s.n_train, s.n_val, s.n_test, s.q, s.seed)


def write_splits(out: Outputs, splits: Splits, prefix: str = "") -> None:
    start = 0
    for name in SPLITS:
        items = getattr(splits, name)
        path = out.path(f"{prefix}{name}.bin")
        dump_split(path, items, range(start, start + len(items)))
        out.files.append(f"{prefix}{name}.bin.index")
        start += len(items)


def read_split(run: Path, name: str):
    return [p for _, p in load_split(run / "data" / f"{name}.bin")]


# subcommands ------------------------------------------------------------------------


def cmd_gen(args) -> None:
    started = time.perf_counter()
    cfg = resolve(args, RunConfig())
    splits = splits_for(cfg)
    out = Outputs(args.out)
    write_splits(out, splits)
    out.manifest("gen", cfg.split.seed, echo(cfg), splits.checksum(), started)


def cmd_train(args) -> None:
    started = time.perf_counter()
    cfg = resolve(args, RunConfig())
    splits = splits_for(cfg)
    out = Outputs(args.out)
    write_splits(out, splits, "data/")
    out.write("config.ini", dump_config(cfg))
    tcfg = cfg.train
    netcfg = tcfg.net_config(cfg.task.m)
    ckdir = args.out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    if tcfg.dual:
        params, log = train_dcl(splits.train, splits.val, tcfg, checkpoint_dir=ckdir)
    else:
        params, log = train_stage1(splits.train, splits.val, tcfg, checkpoint_dir=ckdir)
    out.files += [f"checkpoints/{p.name}" for p in sorted(ckdir.iterdir())]
    out.write("log.csv", log_csv(log))
    save_checkpoint(out.path("model.ckpt"), params, netcfg)
    out.files.append("model.ckpt.manifest")
    res = evaluate(params, netcfg, splits.val, splits.train, tcfg.conditionals)
    out.write("dice_val.csv", dice_csv(res))
    out.manifest("train", cfg.split.seed, echo(cfg), splits.checksum(), started)
    print(f"val foreground Dice {res.foreground_mean:.6g}")


def cmd_eval(args) -> None:
    started = time.perf_counter()
    run = args.run
    cfg = load_config(run / "config.ini")
    params, netcfg = load_checkpoint(run / "model.ckpt")
    train = read_split(run, "train")
    target = read_split(run, args.split)
    res = evaluate(params, netcfg, target, train, cfg.train.conditionals)
    out = Outputs(args.out if args.out is not None else run / "eval")
    out.write(f"dice_{args.split}.csv", dice_csv(res))
    splits = Splits(train, read_split(run, "val"), read_split(run, "test"))
    out.manifest("eval", cfg.split.seed, echo(cfg), splits.checksum(), started)
    print(f"{args.split} foreground Dice {res.foreground_mean:.6g}")


def cmd_oracle(args) -> None:
    started = time.perf_counter()
    seed = 0 if args.seed is None else args.seed
    n = args.instances
    out = Outputs(args.out)
    comp = oracle.suite_compatibility(seed, n)
    incomp = oracle.suite_incompatibility(seed, n)
    lin = oracle.suite_linearity(seed, max(1, n // 5))
    prior = oracle.suite_prior(seed, n)
    cond = oracle.suite_conditional(seed, max(1, n // 5))
    out.write("compatibility.csv", oracle.reports_csv(comp))
    out.write("incompatibility.csv", oracle.reports_csv(incomp))
    out.write("linearity.csv", oracle.reports_csv(lin))
    out.write("prior.csv", oracle.reports_csv([r for _, r in prior]))
    out.write("conditional.csv", oracle.reports_csv(cond))
    checks = [
        ("compatibility", all(r.compatible for r in comp)),
        ("incompatibility", all(not r.compatible and r.margin > 0 for r in incomp)),
        ("linearity", all(r.compatible for r in lin)),
        ("prior", all(g == 0.0 and r.min_value >= -1e-9 for g, r in prior)),
        ("conditional", all(r.compatible for r in cond)),
    ]
    summary = [f"{name} {'PASS' if ok else 'FAIL'}" for name, ok in checks]
    out.write("summary.txt", "\n".join(summary) + "\n")
    out.manifest("oracle", seed, [f"instances={n}"], "none", started)
    print("\n".join(summary))
    if not all(ok for _, ok in checks):
        raise ValidationFailure("oracle certificates failed, see summary.txt")


def _seed_job(job: tuple[Sequence[int], AblationConfig, int]):
    presets, acfg, seed = job
    return run_seed(presets, acfg, seed)


def cmd_ablate(args) -> None:
    started = time.perf_counter()
    cfg = resolve(args, ablation_defaults())
    presets = (args.preset,) if args.preset is not None else cfg.ablation.presets
    for p in presets:
        preset_config(p, cfg.train)
    s = cfg.split
    seeds = cfg.ablation.seeds
    acfg = AblationConfig(cfg.task, s.n_train, s.n_val, s.n_test, s.q, seeds, cfg.train)
    jobs = [(presets, acfg, seed) for seed in seeds]
    workers = max(1, min(args.jobs, len(seeds), worker_cap()))
    if workers == 1:
        per_seed = [_seed_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_seed_job, jobs))  # map keeps seed order
    runs = [r for rs in per_seed for r in rs]
    out = Outputs(args.out)
    out.write("ablation.csv", table_csv(summarize(runs)))
    out.write("runs.csv", runs_csv(runs))
    for r in runs:
        out.write(f"logs/preset{r.preset}_seed{r.seed}.csv", log_csv(r.log))
    digest = hashlib.sha256()
    for seed in seeds:
        digest.update(make_splits(cfg.task, s.n_train, s.n_val, s.n_test, s.q, seed).checksum().encode())
    out.manifest("ablate", " ".join(map(str, seeds)), echo(cfg) + [f"presets={' '.join(map(str, presets))}"],
                 digest.hexdigest(), started)
    print(table_csv(summarize(runs)), end="")


def cmd_gradcheck(args) -> None:
    started = time.perf_counter()
    seed = 0 if args.seed is None else args.seed
    results = run_all(seed)
    text = "\n".join(r.line() for r in results) + "\n"
    print(text, end="")
    if args.out is not None:
        out = Outputs(args.out)
        out.write("gradcheck.txt", text)
        out.manifest("gradcheck", seed, [], "none", started)
    failed = [r for r in results if not r.passed]
    if failed:
        raise ValidationFailure(f"{len(failed)} gradient check(s) failed")


# parser -----------------------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compatseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"compatseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, config=True):
        if config:
            p.add_argument("--config", type=Path, help="INI file with [task] [split] [train] [ablation] sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=out_required)
        return p

    p = common(sub.add_parser("gen", help="write train/val/test splits"))
    p.add_argument("--q", type=int, help="classes kept per training image")
    p.add_argument("--lambda", dest="lam", type=float, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("train", help="train one model"))
    p.add_argument("--preset", type=int, choices=sorted(PRESETS))
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the dual term")
    p.add_argument("--q", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained run on one split")
    p.add_argument("--run", type=Path, required=True, help="output directory of a train run")
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("oracle", help="run the compatibility certificates"), config=False)
    p.add_argument("--instances", type=_positive, default=100, help="random instances per suite")
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("ablate", help="run the six-preset ablation"))
    p.add_argument("--preset", type=int, choices=sorted(PRESETS))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--q", type=int)
    p.add_argument("--jobs", type=_positive, default=1, help="seeds trained in parallel")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), out_required=False,
               config=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationFailure, ConfigError, DonorError, ValueError, FileNotFoundError) as exc:
        print(f"compatseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
