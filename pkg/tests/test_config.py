from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compatseg.ablation import ABLATION_TRAIN
from compatseg.config import (SECTIONS, ConfigError, RunConfig, SplitConfig, ablation_defaults, dump_config, echo,
                              load_config, parse_config)
from compatseg.losses import CompLossSpec

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_round_trip_defaults():
    for cfg in (RunConfig(), ablation_defaults()):
        assert parse_config(dump_config(cfg)) == cfg


@settings(max_examples=25)
@given(lam=st.floats(0, 1), lr=st.floats(1e-6, 1.0), q=st.integers(1, 2), epochs=st.integers(0, 50),
       dual=st.booleans(), pos=st.sampled_from(["p_ce", "p_dice", "ta_ce"]))
def test_round_trip(lam, lr, q, epochs, dual, pos):
    cfg = RunConfig(split=SplitConfig(q=q),
                    train=replace(RunConfig().train, lam=lam, lr1=lr, epochs2=epochs, dual=dual,
                                  loss=CompLossSpec.parse(pos, "n_dice", 0.5, 2.0)))
    assert parse_config(dump_config(cfg)) == cfg


def test_shipped_configs_match_builtins():
    assert load_config(CONFIGS / "default.ini") == RunConfig()
    assert load_config(CONFIGS / "ablation.ini") == ablation_defaults()
    assert ablation_defaults().train == ABLATION_TRAIN


def test_absent_sections_keep_base():
    cfg = parse_config("[split]\nn_train = 5\nn_val = 2\nn_test = 3\nq = 2\nseed = 7\n")
    assert cfg.split == SplitConfig(5, 2, 3, 2, 7)
    assert cfg.train == RunConfig().train
    assert parse_config("", base=ablation_defaults()) == ablation_defaults()


def test_missing_key_named():
    with pytest.raises(ConfigError, match=r"missing key\(s\) seed in section \[split\]"):
        parse_config("[split]\nn_train = 5\nn_val = 2\nn_test = 3\nq = 2\n", "run.ini")


def test_unknown_key_and_section():
    text = dump_config(RunConfig()).replace("lam = 0.2", "lam = 0.2\nlamda = 0.3")
    with pytest.raises(ConfigError, match="lamda"):
        parse_config(text)
    with pytest.raises(ConfigError, match=r"unknown section \[model\]"):
        parse_config("[model]\nx = 1\n")


@pytest.mark.parametrize("old,new", [("lam = 0.2", "lam = lots"), ("dual = false", "dual = maybe"),
                                     ("lam = 0.2", "lam = 2.0"), ("positive = p_ce", "positive = n_ce")])
def test_bad_values(old, new):
    with pytest.raises(ConfigError):
        parse_config(dump_config(RunConfig()).replace(old, new))


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.ini")


def test_echo_covers_every_key():
    lines = echo(RunConfig())
    assert len(lines) == sum(len(keys) for keys in SECTIONS.values())
    assert "train.lam=0.2" in lines and "train.dual=false" in lines and "split.q=1" in lines
