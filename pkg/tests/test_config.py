import json

import pytest

from hsicomp.config import RunConfig
from hsicomp.data import desk_spec
from hsicomp.errors import ConfigError, SchemeError
from hsicomp.pruning import IterationConfig


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"pruning": {"overall_pr": 0.6}, "scene": desk_spec().to_dict()}))
    cfg = RunConfig.load(p)
    assert cfg.pruning.overall_pr == 0.6 and cfg.pruning.model_drop == 1.0
    assert cfg.scene == desk_spec()
    assert cfg.train.epochs == 30


@pytest.mark.parametrize("doc", [{"nope": 1}, {"quant": {"cle": True, "bogus": 2}}, {"bench": 3}, [1]])
def test_bad_documents(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_thresholds_must_be_positive():
    with pytest.raises(SchemeError):
        IterationConfig(layer_drop=0)
    assert IterationConfig().finetune_config().lr == 1e-6
