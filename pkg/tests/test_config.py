import pytest

from sdotflow.config import KEYS, RunConfig, describe_keys
from sdotflow.errors import ValidationError
from sdotflow.sdot import Stage


def test_defaults_documented():
    cfg = RunConfig()
    for key, key_def in KEYS.items():
        assert key_def.doc
        assert cfg[key] == key_def.default
    assert len(describe_keys().splitlines()) == len(KEYS)


def test_canonical_roundtrip():
    text = """
    # comment
    train.steps = 50
    sdot.stages = 10:0.5:64:0.9:0.01, 5:1e-3:32:0.99:0
    pairs.rebalance = yes
    pairs.class_mix = 1:30,0:20
    train.hidden = 32,16
    """
    cfg = RunConfig.from_text(text)
    assert cfg["train.steps"] == 50
    assert cfg["sdot.stages"] == (Stage(10, 0.5, 64, 0.9, 0.01), Stage(5, 1e-3, 32, 0.99, 0.0))
    assert cfg["pairs.rebalance"] is True
    assert cfg["pairs.class_mix"] == ((0, 20), (1, 30))
    echoed = cfg.to_text()
    again = RunConfig.from_text(echoed)
    assert again == cfg
    assert again.to_text() == echoed
    keys = [line.split(" = ")[0] for line in echoed.splitlines()]
    assert keys == sorted(KEYS)


def test_default_config_roundtrip():
    assert RunConfig.from_text(RunConfig().to_text()) == RunConfig()


def test_unknown_key_rejected():
    with pytest.raises(ValidationError, match="unknown"):
        RunConfig.from_text("train.stepz = 3\n")
    with pytest.raises(ValidationError):
        RunConfig({"nope": 1})


@pytest.mark.parametrize("line", [
    "train.steps = many",
    "train.coupling = sideways",
    "sdot.stages = 1:2:3",
    "sdot.stages = 0:0.1:4:0.9:0",
    "pairs.rebalance = maybe",
    "no equals sign",
])
def test_bad_values_rejected(line):
    with pytest.raises(ValidationError):
        RunConfig.from_text(line)


def test_typed_views():
    cfg = RunConfig.from_text("train.coupling = aligned\ntrain.steps = 7\nsdot.seed = 3\n")
    tc = cfg.train_config()
    assert tc.num_steps == 7 and tc.coupling.value == "aligned"
    assert cfg.sdot_config().master_seed == 3
