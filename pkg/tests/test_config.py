import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masked_llp.config import RunConfig
from masked_llp.detect import ConfigError


def test_round_trip_defaults():
    cfg = RunConfig()
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


@settings(max_examples=1000, deadline=None)
@given(
    st.sampled_from(["Prop", "FocalProp", "WFL"]),
    st.sampled_from(["masked", "unmasked", "oracle-mask"]),
    st.integers(2, 10),
    st.integers(0, 2**31),
    st.floats(0.01, 5.0),
    st.integers(0, 500),
)
@pytest.mark.invariant
def test_parse_serialize_parse_identity(loss, mask, folds, seed, alpha, epochs):
    doc = {"loss_mode": loss, "mask_mode": mask, "folds": folds, "seed": seed,
           "detect": {"alpha": alpha}, "proportion": {"epochs": epochs}}
    cfg = RunConfig.from_dict(doc)
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()


@pytest.mark.parametrize(
    "doc, msg",
    [
        ({"colour": 1}, "unknown key"),
        ({"detect": {"alfa": 2}}, "unknown key"),
        ({"folds": 1}, "folds"),
        ({"loss_mode": "listnet"}, "loss_mode"),
        ({"detect": {"threshold": 1.5}}, "threshold"),
        ({"proportion": {"downsample": 3}}, "power of two"),
        ({"detect": []}, "object"),
        ({"folds": "four"}, "type"),
    ],
)
def test_rejected(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig.from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        RunConfig.load(tmp_path / "bad.json")


def test_env_seed(monkeypatch):
    monkeypatch.setenv("MASKED_LLP_SEED", "17")
    assert RunConfig().with_seed_from_env().seed == 17
    monkeypatch.setenv("MASKED_LLP_SEED", "x")
    with pytest.raises(ConfigError):
        RunConfig().with_seed_from_env()
