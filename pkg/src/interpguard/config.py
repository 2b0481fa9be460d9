"""Run configuration: JSON-schema validation, defaults and hashing."""

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from ._validation import ConfigError

HASH_EXCLUDED = ("output_dir",)


def load_schema():
    return json.loads(resources.files("interpguard").joinpath("runconfig.schema.json").read_text())


DESK_DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/desk",
    "dataset": {"source": "synthetic", "kind": "stripes", "n": 5900, "size": 16, "n_classes": 10, "seed": 0,
                "splits": {"train": 2000, "detector_train": 2500, "rf_train": 1000, "test": 400}},
    "classifier": {"architecture": "cnn", "width": 8, "seed": 1,
                   "train": {"learning_rate": 0.002, "batch_size": 32, "epochs": 15, "seed": 0}},
    "attacks": {
        "l2": [{"method": "DeepFool"},
               {"method": "CW", "binary_search_steps": 3, "iterations": 50},
               {"method": "DDN", "iterations": 50}],
        "linf": [{"method": "FGSM"}, {"method": "PGD", "iterations": 20}],
    },
    "detector": {"ig_steps": 20, "assignment": "round_robin", "balance": True,
                 "sub_detector": {"architecture": "cnn", "width": 8,
                                  "train": {"learning_rate": 0.002, "batch_size": 32, "epochs": 10, "seed": 0}},
                 "forest": {"n_trees": 100, "max_depth": 8, "max_features": 4, "seed": 0}},
    "rectifier": {"alpha": 0.6, "p": 0.5, "duplicates": 4, "seed": 0, "n_images": 600,
                  "attack": {"method": "DDN", "targeted": True, "iterations": 50},
                  "train": {"learning_rate": 0.001, "batch_size": 32, "epochs": 8, "seed": 0}},
    "evaluation": {
        "n_images": 300,
        "grey_box": [{"method": "FGSM"}, {"method": "PGD"}, {"method": "DeepFool"},
                     {"method": "CW", "binary_search_steps": 3, "iterations": 50},
                     {"method": "DDN", "iterations": 50}],
        "black_box": {"surrogate": {"architecture": "cnn_wide", "width": 8, "seed": 7,
                                    "train": {"learning_rate": 0.002, "batch_size": 32, "epochs": 15, "seed": 3}},
                      "attacks": [{"method": "FGSM"}, {"method": "PGD"}, {"method": "DDN", "iterations": 50}]},
        "white_box": {"n_images": 100, "attacks": [{"method": "PGD", "targeted": True, "iterations": 40}]},
        "toy_erasure": {"n_images": 150, "fraction": 0.05, "attacks": [{"method": "DeepFool"},
                                                      {"method": "CW", "binary_search_steps": 3, "iterations": 50},
                                                      {"method": "DDN", "iterations": 50}]},
        "transfer": {"n_images": 100, "kinds": ["ORG", "VG", "IG", "GBP"],
                     "attacks": [{"method": "PGD", "targeted": True, "iterations": 50}]},
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(data):
    """Raise :class:`ConfigError` naming the first offending key path."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.path))))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = "/".join(filter(None, [path, extra[0] if extra else ""]))
            raise ConfigError("unknown key", path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            path = "/".join(filter(None, [path, missing[0] if missing else ""]))
            raise ConfigError("missing required key", path)
        raise ConfigError(err.message, path or "<root>")


class RunConfig:
    """Validated run configuration.

    ``RunConfig(data)`` validates ``data`` as given; :meth:`desk` fills in the
    desk defaults before validating. The config hash covers everything except
    the output directory, so relocating a run keeps its hash.
    """

    def __init__(self, data):
        validate(data)
        self.data = copy.deepcopy(data)

    @classmethod
    def desk(cls, overrides=None):
        return cls(_merge(DESK_DEFAULTS, overrides or {}))

    @classmethod
    def from_file(cls, path):
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping")
        return cls(data)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def output_dir(self):
        return Path(self.data["output_dir"])

    @property
    def hash(self):
        payload = {k: v for k, v in self.data.items() if k not in HASH_EXCLUDED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    def with_output_dir(self, path):
        return RunConfig({**self.data, "output_dir": str(path)})
