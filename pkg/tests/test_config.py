import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lemonade.config import (Ablations, SearchConfig, config_from_dict, config_to_dict,
                             parse_config)
from lemonade.errors import ConfigError
from lemonade.morph import APPROX_OPS, EXACT_OPS


def test_empty_config_is_all_defaults():
    for text in ("", "   \n", "{}"):
        cfg = parse_config(text)
        assert cfg == SearchConfig()
    cfg = parse_config("")
    assert cfg.n_gen == 100 and cfg.schedule.epochs == 20
    assert cfg.objective_names == ("val_error", "log10_params")
    assert cfg.reference_point == (1.0, 10.0)


def test_n_ac_above_n_pc_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("n_pc: 4\nn_ac: 5\n")
    assert any("n_ac" in p for p in info.value.problems)


def test_ablation_flags():
    cfg = parse_config("ablations:\n  no_kde: true\n")
    assert cfg.ablations == Ablations(no_kde=True)
    cfg = parse_config("ablations: {no_anm: true}")
    assert set(cfg.ops) == set(EXACT_OPS)
    with pytest.raises(ConfigError):
        parse_config(f"enabled_ops: {json.dumps(list(APPROX_OPS))}\nablations: {{no_anm: true}}")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("n_gen: 3\npopulation_size: 10\n")
    assert any("population_size" in p for p in info.value.problems)
    with pytest.raises(ConfigError):
        parse_config("schedule: {epochs: 2, momentum: 0.9}")


def test_every_problem_reported_at_once():
    with pytest.raises(ConfigError) as info:
        parse_config("n_gen: -1\nn_pc: 0\nspace: ss9\nbogus: 1\nschedule: {epochs: x}\n")
    assert len(info.value.problems) >= 4


def test_semantic_problems_listed_together():
    with pytest.raises(ConfigError) as info:
        parse_config("n_pc: 2\nn_ac: 3\nhv_reference: [1.0]\ntasks: [blob]\n")
    assert len(info.value.problems) == 3


def test_bad_yaml_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config("n_gen: [1, 2\n")
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")


def test_schedule_seed_is_not_configurable():
    with pytest.raises(ConfigError):
        parse_config("schedule: {seed: 3}")


@given(st.integers(0, 50), st.integers(1, 20), st.integers(0, 2**31 - 1), st.booleans(),
       st.sampled_from(["ss1", "ss2"]))
def test_dict_roundtrip(n_gen, n_pc, seed, no_kde, space):
    cfg = SearchConfig(n_gen=n_gen, n_pc=n_pc, n_ac=max(1, n_pc // 2), seed=seed, space=space,
                       ablations=Ablations(no_kde=no_kde))
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg
