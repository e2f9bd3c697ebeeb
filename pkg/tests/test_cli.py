import json

import pytest

from hsicomp.cli import main
from hsicomp.data import desk_spec
from hsicomp.netgraph import build_unet, save


def test_analyze_reference_model(tmp_path, capsys):
    save(build_unet(), tmp_path / "ref")
    assert main(["analyze", str(tmp_path / "ref"), "--input", "192x384x25", "--workdir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "total GFLOPS 34.53" in out
    summary = json.loads((tmp_path / "analyze" / "summary.json").read_text())
    assert summary["params"] == 31_093_952


@pytest.mark.parametrize("value", ["1.5", "1", "-0.1", "abc"])
def test_bad_overall_pr_exits_2(value, capsys):
    with pytest.raises(SystemExit) as info:
        main(["prune", "--overall-pr", value])
    assert info.value.code == 2
    assert "overall" in capsys.readouterr().err or value == "abc"


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["analyze", "x", "--config", str(cfg)]) == 1
    assert "error: config" in capsys.readouterr().err


def test_missing_model_is_a_format_error(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nothing")]) == 1
    assert "error: format" in capsys.readouterr().err


def test_end_to_end_small_run(tmp_path, capsys):
    w = tmp_path / "w"
    cfg = {
        "paths": {"dataset": str(w / "data"), "prepared": str(w / "prepared"), "model": str(w / "model"),
                  "workdir": str(w)},
        "scene": desk_spec().to_dict(),
        "model": {"depth": 2, "init_filters": 4, "dropout": 0.0},
        "train": {"epochs": 1, "batch": 4},
        "pruning": {"finetune_epochs": 1, "model_drop": 100, "locked_fraction": 1.0, "layer_drop": 100},
        "quant": {"calib_images": 4},
        "bench": {"repeat": 2, "warmup": 1},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    c = ["--config", str(path)]
    assert main(["gen-data", "--count", "10"] + c) == 0
    assert main(["preprocess"] + c) == 0
    assert main(["train"] + c) == 0
    assert main(["prune", "--overall-pr", "0.5", "--iterations", "2"] + c) == 0
    report = json.loads((w / "prune" / "iter2" / "report.json").read_text())
    assert report["flops_ratio"] <= 0.5
    pruned = str(w / "prune" / "iter2" / "model")
    assert main(["quantize", "--model", pruned] + c) == 0
    assert json.loads((w / "quant" / "drift.json").read_text())["images"] == 2
    assert main(["eval", "--model", str(w / "quant" / "model"), "--quant", str(w / "quant" / "params.json")] + c) == 0
    assert (w / "eval" / "metrics_test_int8.json").exists()
    assert main(["bench", "--model", str(w / "quant" / "model_fused"), "--quant",
                 str(w / "quant" / "params_fused.json"), "--stages", "3"] + c) == 0
    out = capsys.readouterr().out
    assert "Weighted" in out and "longest task" in out
