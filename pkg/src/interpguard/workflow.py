"""Staged desk pipeline driven by a :class:`RunConfig`.

Each stage writes its artifacts under the configured output directory,
stamped with the config hash, and later stages reload them. Reusing an
artifact built under a different config raises :class:`ConfigError`.
"""

import csv
from pathlib import Path

import numpy as np

from . import attacks, data, detect, interpret, nn, pipeline, rectify
from ._validation import ConfigError
from .config import RunConfig

FILES = {
    "classifier": "classifier.npz",
    "attacks_detector_train": "attacks_detector_train.npz",
    "attacks_rf_train": "attacks_rf_train.npz",
    "detector": "detector.npz",
    "defended": "defended.npz",
    "report": "report.csv",
    "records": "report.jsonl",
    "whitebox": "whitebox.csv",
    "toy_erasure": "toy_erasure.csv",
    "transfer": "transfer.csv",
    "config": "config.json",
}


def attack_configs(entries):
    return [attacks.AttackConfig.from_dict(e) for e in entries]


def train_config(entry):
    return nn.TrainConfig(**entry)


def write_rows_csv(path, rows, config_hash):
    """Write a list of flat dicts as CSV with a trailing ``config_hash`` column."""
    if not rows:
        Path(path).write_text("config_hash\n")
        return
    fields = list(rows[0]) + ["config_hash"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in {**r, "config_hash":
                                                                                            config_hash}.items()})


class Workspace:
    """Artifacts of one configured run, computed on demand and cached on disk."""

    def __init__(self, config):
        self.config = config if isinstance(config, RunConfig) else RunConfig(config)
        self.dir = self.config.output_dir
        self.hash = self.config.hash
        self._cache = {}

    def path(self, key):
        return self.dir / FILES[key]

    def _prepare_dir(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path("config").write_text(self.config.to_json())

    def _save_npz(self, key, arrays):
        self._prepare_dir()
        with open(self.path(key), "wb") as fh:
            np.savez(fh, config_hash=np.array(self.hash), **arrays)

    def _load_npz(self, key):
        path = self.path(key)
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run the stage that produces it first")
        with np.load(path, allow_pickle=False) as npz:
            arrays = dict(npz)
        found = str(arrays.pop("config_hash", ""))
        if found != self.hash:
            raise ConfigError(f"{path} was produced under config {found}, current config is {self.hash}",
                              "config_hash")
        return arrays

    # -- data ----------------------------------------------------------------

    @property
    def dataset(self):
        if "dataset" not in self._cache:
            spec = self.config["dataset"]
            if spec["source"] == "synthetic":
                ds = data.synth_dataset(spec.get("kind", "stripes"), spec.get("n", 0), spec.get("seed", 0),
                                        spec.get("size", 16), spec.get("n_classes", 10))
            else:
                if "images_path" not in spec or "labels_path" not in spec:
                    raise ConfigError("idx datasets need images_path and labels_path", "dataset")
                ds = data.load_idx(spec["images_path"], spec["labels_path"], spec.get("n_classes"))
            splits = spec["splits"]
            total = sum(splits.values())
            if total > len(ds):
                raise ConfigError(f"splits need {total} images but the dataset has {len(ds)}", "dataset/splits")
            counts = dict(splits)
            if total < len(ds):
                counts["_unused"] = len(ds) - total
            self._cache["dataset"] = self._tag(ds, counts)
        return self._cache["dataset"]

    def _tag(self, ds, counts):
        order = np.random.default_rng([self.config["seed"], 101]).permutation(len(ds))
        tags = np.empty(len(ds), dtype=object)
        start = 0
        for name, count in counts.items():
            tags[order[start:start + count]] = name
            start += count
        keep = tags != "_unused"
        ds = ds.subset(np.flatnonzero(keep))
        return data.Dataset(ds.images, ds.labels, ds.n_classes, ds.name, tags[keep])

    def split(self, tag, limit=None):
        """``(images, labels, ids)`` of a split; ids index the tagged dataset."""
        ds = self.dataset
        idx = np.flatnonzero(ds.splits == tag)
        if limit is not None:
            idx = idx[:limit]
        return ds.images[idx], ds.labels[idx], idx

    # -- stages ----------------------------------------------------------------

    def train_classifier(self):
        spec = self.config["classifier"]
        x, y, _ = self.split("train")
        net = nn.build_preset(spec["architecture"], x.shape[1:], self.dataset.n_classes, spec.get("seed", 0),
                              spec.get("width", 8))
        net, history = nn.train(net, x, y, train_config(spec["train"]))
        self._save_npz("classifier", nn.network_to_arrays(net))
        self._cache["classifier"] = net
        return net

    @property
    def classifier(self):
        if "classifier" not in self._cache:
            self._cache["classifier"] = nn.network_from_arrays(self._load_npz("classifier"))
        return self._cache["classifier"]

    def gen_attacks(self):
        """Attack the detector and forest training splits; store the raw (map-free) sets."""
        spec = self.config["attacks"]
        det_spec = self.config["detector"]
        out = {}
        for offset, split in enumerate(("detector_train", "rf_train")):
            x, y, ids = self.split(split)
            raw, report = detect.build_detection_dataset(
                self.classifier, x, y, attack_configs(spec["l2"]), attack_configs(spec["linf"]), kinds=(),
                balance=det_spec.get("balance", True), seed=self.config["seed"] + offset,
                assignment=det_spec.get("assignment", "all"), source_ids=ids)
            self._prepare_dir()
            detect.save_detection_set(self.path(f"attacks_{split}"), raw, self.hash)
            out[split] = report
        return out

    def detection_set(self, split):
        key = f"detection/{split}"
        if key not in self._cache:
            raw = detect.load_detection_set(self.path(f"attacks_{split}"), self.hash)
            self._cache[key] = detect.make_detection_set(
                self.classifier, raw.images, raw.labels, raw.provenance, raw.true_labels, raw.source_ids,
                ig_config=self.ig_config)
        return self._cache[key]

    @property
    def ig_config(self):
        return interpret.IGConfig(self.config["detector"]["ig_steps"])

    def new_detector(self):
        spec = self.config["detector"]
        sub, forest = spec["sub_detector"], spec["forest"]
        t = sub["train"]
        return detect.EnsembleDetector(
            network=self.classifier, ig_steps=spec["ig_steps"], sub_architecture=sub["architecture"],
            sub_width=sub.get("width", 8), sub_epochs=t.get("epochs", 10), sub_learning_rate=t.get("learning_rate", 1e-3),
            sub_batch_size=t.get("batch_size", 64), n_trees=forest.get("n_trees", 100),
            max_depth=forest.get("max_depth", 8), max_features=forest.get("max_features", 4),
            seed=forest.get("seed", 0))

    def build_detector(self):
        det = self.new_detector().fit(self.detection_set("detector_train"), rf_set=self.detection_set("rf_train"))
        self._save_npz("detector", det.to_arrays())
        self._cache["detector"] = det
        return det

    @property
    def detector(self):
        if "detector" not in self._cache:
            self._cache["detector"] = self.new_detector().load_arrays(self._load_npz("detector"))
        return self._cache["detector"]

    @property
    def rectify_config(self):
        spec = self.config["rectifier"]
        return rectify.RectifyConfig(spec["alpha"], spec["p"], spec["duplicates"], spec.get("seed", 0))

    def train_rectifier(self):
        """Fine-tune on rectified copies of targeted attacks mixed with clean images."""
        spec = self.config["rectifier"]
        net = self.classifier
        x, y, ids = self.split("detector_train", spec.get("n_images"))
        ok = nn.predict(net, x) == y
        x, y, ids = x[ok], y[ok], ids[ok]
        batch = attacks.attack_dataset(net, x, y, attacks.AttackConfig.from_dict(spec["attack"]))
        s = batch.success
        tuned, report = rectify.finetune_on_rectified(net, self.detector, batch.images[s], y[s], x, y,
                                                      self.rectify_config, train_config(spec["train"]), ids[s])
        model = pipeline.DefendedModel(net, self.detector, tuned, self.rectify_config)
        self._save_npz("defended", nn.network_to_arrays(tuned, "Fr/"))
        self._cache["defended"] = model
        return model, report

    @property
    def defended(self):
        if "defended" not in self._cache:
            tuned = nn.network_from_arrays(self._load_npz("defended"), "Fr/")
            self._cache["defended"] = pipeline.DefendedModel(self.classifier, self.detector, tuned,
                                                             self.rectify_config)
        return self._cache["defended"]

    def test_images(self, limit=None):
        return self.split("test", limit)

    def surrogate(self):
        if "surrogate" not in self._cache:
            spec = self.config["evaluation"]["black_box"]["surrogate"]
            cspec = self.config["classifier"]
            if spec["architecture"] == cspec["architecture"] and spec.get("seed", 0) == cspec.get("seed", 0):
                raise ConfigError("surrogate must use a different architecture or seed than the classifier",
                                  "evaluation/black_box/surrogate")
            x, y, _ = self.split("train")
            net = nn.build_preset(spec["architecture"], x.shape[1:], self.dataset.n_classes, spec.get("seed", 0),
                                  spec.get("width", 8))
            self._cache["surrogate"], _ = nn.train(net, x, y, train_config(spec["train"]))
        return self._cache["surrogate"]

    def evaluate(self):
        """Grey-box and black-box rows, written as CSV and JSON lines."""
        spec = self.config["evaluation"]
        x, y, ids = self.test_images(spec.get("n_images"))
        report = pipeline.EvalReport()
        if spec.get("grey_box"):
            report.extend(pipeline.run_grey_box(self.defended, x, y, attack_configs(spec["grey_box"]), self.hash,
                                                ids))
        if spec.get("black_box"):
            report.extend(pipeline.run_black_box(self.defended, self.surrogate(), x, y,
                                                 attack_configs(spec["black_box"]["attacks"]), self.hash, ids,
                                                 seed=self.config["seed"]))
        self._prepare_dir()
        report.write_csv(self.path("report"))
        report.write_records(self.path("records"))
        return report

    def whitebox(self):
        spec = self.config["evaluation"].get("white_box")
        if not spec:
            raise ConfigError("no white_box section configured", "evaluation/white_box")
        x, y, ids = self.test_images(spec.get("n_images"))
        report = pipeline.run_white_box(self.defended, x, y, attack_configs(spec["attacks"]), self.hash, ids)
        self._prepare_dir()
        report.write_csv(self.path("whitebox"))
        return report

    def toy_erasure(self):
        spec = self.config["evaluation"].get("toy_erasure")
        if not spec:
            raise ConfigError("no toy_erasure section configured", "evaluation/toy_erasure")
        x, y, _ = self.test_images(spec.get("n_images", self.config["evaluation"].get("n_images")))
        rows = pipeline.toy_erasure_experiment(self.classifier, x, y, attack_configs(spec["attacks"]),
                                               (0.0, spec.get("fraction", 0.05)))
        self._prepare_dir()
        write_rows_csv(self.path("toy_erasure"), rows, self.hash)
        return rows

    def transfer(self):
        """Transfer attacks against each configured sub-detector, starting from PGD adversarials of ``F``."""
        spec = self.config["evaluation"].get("transfer")
        if not spec:
            raise ConfigError("no transfer section configured", "evaluation/transfer")
        x, y, _ = self.test_images(spec.get("n_images"))
        net = self.classifier
        ok = nn.predict(net, x) == y
        start = attacks.attack_dataset(net, x[ok], y[ok], attacks.AttackConfig("PGD"))
        x_adv, y_adv = start.images[start.success], y[ok][start.success]
        rows = []
        for kind in spec.get("kinds", ["ORG", "VG", "IG", "GBP"]):
            rows.extend(pipeline.run_transfer_attack(self.defended, kind, x_adv, y_adv,
                                                     attack_configs(spec["attacks"])))
        self._prepare_dir()
        write_rows_csv(self.path("transfer"), rows, self.hash)
        return rows

    def run_all(self):
        self.train_classifier()
        self.gen_attacks()
        self.build_detector()
        self.train_rectifier()
        report = self.evaluate()
        if self.config["evaluation"].get("white_box"):
            report = pipeline.EvalReport(list(report.rows)).extend(self.whitebox())
        if self.config["evaluation"].get("toy_erasure"):
            self.toy_erasure()
        if self.config["evaluation"].get("transfer"):
            self.transfer()
        return report
