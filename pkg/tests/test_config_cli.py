import copy
import json

import numpy as np
import pytest
import yaml

from interpguard import cli
from interpguard._validation import ConfigError
from interpguard.config import DESK_DEFAULTS, RunConfig, validate
from interpguard.pipeline import REPORT_COLUMNS
from interpguard import nn
from interpguard.workflow import Workspace

TINY = {
    "seed": 3,
    "output_dir": "unused",
    "dataset": {"source": "synthetic", "kind": "stripes", "n": 420, "size": 8, "n_classes": 4, "seed": 2,
                "splits": {"train": 200, "detector_train": 100, "rf_train": 80, "test": 40}},
    "classifier": {"architecture": "cnn", "width": 4, "seed": 1,
                   "train": {"learning_rate": 0.005, "batch_size": 32, "epochs": 4, "seed": 0}},
    "attacks": {"l2": [{"method": "DeepFool", "iterations": 10}],
                "linf": [{"method": "FGSM", "epsilon": 0.05}]},
    "detector": {"ig_steps": 2, "sub_detector": {"architecture": "mlp",
                                                 "train": {"learning_rate": 0.005, "epochs": 2}},
                 "forest": {"n_trees": 5, "max_depth": 3}},
    "rectifier": {"alpha": 0.6, "p": 0.5, "duplicates": 1, "n_images": 30,
                  "attack": {"method": "DDN", "targeted": True, "iterations": 5},
                  "train": {"learning_rate": 0.001, "epochs": 1}},
    "evaluation": {"n_images": 40, "grey_box": [{"method": "FGSM", "epsilon": 0.05}],
                   "black_box": {"surrogate": {"architecture": "mlp", "seed": 5, "train": {"epochs": 2}},
                                 "attacks": [{"method": "FGSM", "epsilon": 0.1}]},
                   "white_box": {"n_images": 6, "attacks": [{"method": "PGD", "targeted": True, "iterations": 2}]},
                   "toy_erasure": {"n_images": 20, "attacks": [{"method": "DeepFool", "iterations": 10}]},
                   "transfer": {"n_images": 10, "kinds": ["ORG", "IG"],
                                "attacks": [{"method": "PGD", "targeted": True, "iterations": 2}]}},
}


def write_config(path, data, fmt="json"):
    path.write_text(yaml.safe_dump(data) if fmt == "yaml" else json.dumps(data))
    return path


def test_desk_defaults_validate():
    cfg = RunConfig.desk()
    assert cfg["dataset"]["n"] == DESK_DEFAULTS["dataset"]["n"]
    assert len(cfg.hash) == 16


def test_hash_ignores_output_dir_only():
    a = RunConfig(TINY)
    assert a.hash == a.with_output_dir("/elsewhere").hash
    changed = copy.deepcopy(TINY)
    changed["seed"] = 4
    assert RunConfig(changed).hash != a.hash


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["detector"].pop("ig_steps"), "detector/ig_steps"),
    (lambda d: d.pop("classifier"), "classifier"),
    (lambda d: d["rectifier"].update(bogus=1), "rectifier/bogus"),
    (lambda d: d["attacks"]["l2"][0].update(iters=3), "attacks/l2/0/iters"),
    (lambda d: d["rectifier"].update(alpha=1.5), "rectifier/alpha"),
])
def test_validation_error_paths(mutate, path):
    data = copy.deepcopy(TINY)
    mutate(data)
    with pytest.raises(ConfigError) as err:
        validate(data)
    assert err.value.path == path


def test_yaml_and_json_agree(tmp_path):
    a = RunConfig.from_file(write_config(tmp_path / "c.json", TINY))
    b = RunConfig.from_file(write_config(tmp_path / "c.yaml", TINY, "yaml"))
    assert a.hash == b.hash


def test_cli_missing_key_error_record(tmp_path, capsys):
    data = copy.deepcopy(TINY)
    del data["dataset"]["splits"]
    code = cli.main(["evaluate", "--config", str(write_config(tmp_path / "c.json", data))])
    assert code == 2
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "ConfigError" and record["path"] == "dataset/splits"


def test_cli_missing_artifact(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TINY)
    code = cli.main(["evaluate", "--config", str(cfg), "--output-dir", str(tmp_path / "empty")])
    assert code == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_cli_stages_end_to_end(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TINY)
    out = tmp_path / "run"
    for command in ("train-classifier", "gen-attacks", "build-detector", "train-rectifier", "evaluate",
                    "toy-erasure", "whitebox", "transfer"):
        assert cli.main([command, "--config", str(cfg), "--output-dir", str(out)]) == 0, command
        summary = json.loads(capsys.readouterr().out)
        assert summary["config_hash"] == RunConfig(TINY).hash
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert all(line.endswith(RunConfig(TINY).hash) for line in lines[1:])
    for name in ("whitebox.csv", "toy_erasure.csv", "transfer.csv"):
        assert (out / name).read_text().splitlines()[0].endswith("config_hash")
    for name in ("classifier.npz", "detector.npz", "defended.npz", "attacks_detector_train.npz"):
        with np.load(out / name) as npz:
            assert str(npz["config_hash"]) == RunConfig(TINY).hash

    # reusing artifacts under a different config is refused
    changed = copy.deepcopy(TINY)
    changed["rectifier"]["p"] = 0.4
    code = cli.main(["evaluate", "--config", str(write_config(tmp_path / "d.json", changed)),
                     "--output-dir", str(out)])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["path"] == "config_hash"


def test_workspace_reloads_identically(tmp_path):
    ws = Workspace(RunConfig(TINY).with_output_dir(tmp_path))
    ws.train_classifier()
    fresh = Workspace(RunConfig(TINY).with_output_dir(tmp_path))
    x, _, _ = ws.test_images()
    np.testing.assert_array_equal(nn.predict_proba(fresh.classifier, x), nn.predict_proba(ws.classifier, x))


def test_print_desk_config(capsys):
    assert cli.main(["print-desk-config"]) == 0
    assert json.loads(capsys.readouterr().out) == DESK_DEFAULTS


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for command in cli.COMMANDS:
        assert command in text
