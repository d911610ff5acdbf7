"""Run configuration files: INI sections ``task``, ``split``, ``train`` and ``ablation``.

A configuration file must spell out every key of every section it contains;
sections it leaves out take the built-in defaults.  Missing and unknown keys
are reported by name.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .ablation import ABLATION_TRAIN
from .losses import CompLossSpec
from .synthdata import TaskSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    n_train: int = 40
    n_val: int = 10
    n_test: int = 20
    q: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")


@dataclass(frozen=True)
class AblationSettings:
    seeds: tuple[int, ...] = (0, 1, 2)
    presets: tuple[int, ...] = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationSettings = field(default_factory=AblationSettings)


def ablation_defaults() -> RunConfig:
    return RunConfig(train=ABLATION_TRAIN)


# key tables: name -> (parse, format) ----------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    return str(v)


_TASK_KEYS = {"height": int, "width": int, "m": int, "noise_sigma": float, "blur_sigma": float,
              "inner_radius": _floats, "ring_width": _floats, "blob_radius": _floats}
_SPLIT_KEYS = {"n_train": int, "n_val": int, "n_test": int, "q": int, "seed": int}
_TRAIN_KEYS = {"lam": float, "lr1": float, "lr2": float, "beta1": float, "beta2": float, "adam_eps": float,
               "batch_size": int, "epochs1": int, "epochs2": int, "patience": int, "seed": int,
               "positive": str, "negative": str, "alpha1": float, "alpha2": float, "objective": str,
               "conditionals": _bool, "prior": _bool, "dual": _bool, "widths": _ints, "head_bias": float}
_ABLATION_KEYS = {"seeds": _ints, "presets": _ints}
SECTIONS = {"task": _TASK_KEYS, "split": _SPLIT_KEYS, "train": _TRAIN_KEYS, "ablation": _ABLATION_KEYS}


def _section_values(cfg: RunConfig, section: str) -> dict[str, object]:
    if section == "task":
        return {k: getattr(cfg.task, k) for k in _TASK_KEYS}
    if section == "split":
        return {f.name: getattr(cfg.split, f.name) for f in fields(SplitConfig)}
    if section == "ablation":
        return {"seeds": cfg.ablation.seeds, "presets": cfg.ablation.presets}
    t = cfg.train
    out: dict[str, object] = {}
    for k in _TRAIN_KEYS:
        if k == "positive":
            out[k] = t.loss.positive.tag.value
        elif k == "negative":
            out[k] = t.loss.negative.tag.value
        elif k in ("alpha1", "alpha2"):
            out[k] = getattr(t.loss, k)
        else:
            out[k] = getattr(t, k)
    return out


def _build(section: str, values: dict[str, object], base: RunConfig) -> RunConfig:
    if section == "task":
        return replace(base, task=replace(base.task, **values))
    if section == "split":
        return replace(base, split=SplitConfig(**values))
    if section == "ablation":
        return replace(base, ablation=AblationSettings(**values))
    values = dict(values)
    loss = CompLossSpec.parse(values.pop("positive"), values.pop("negative"),
                              values.pop("alpha1"), values.pop("alpha2"))
    return replace(base, train=replace(base.train, loss=loss, **values))


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = base if base is not None else RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        keys = SECTIONS[section]
        present = dict(parser[section])
        unknown = sorted(set(present) - set(keys))
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)} in section [{section}]")
        missing = [k for k in keys if k not in present]
        if missing:
            raise ConfigError(f"{source}: missing key(s) {', '.join(missing)} in section [{section}]")
        values = {}
        for k, conv in keys.items():
            try:
                values[k] = conv(present[k])
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{k}: {exc}") from exc
        try:
            cfg = _build(section, values, cfg)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{source}: invalid section [{section}]: {exc}") from exc
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path), base)


def dump_config(cfg: RunConfig) -> str:
    """The full configuration as INI text; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in _section_values(cfg, section).items()]
        lines.append("")
    return "\n".join(lines)


def echo(cfg: RunConfig) -> list[str]:
    """``section.key=value`` lines for manifests."""
    return [f"{s}.{k}={_fmt(v)}" for s in SECTIONS for k, v in _section_values(cfg, s).items()]
