"""Tri-class sub-detectors over interpretation maps and the forest ensemble.

Each sub-detector is a small CNN that labels its input (the raw image for
``ORG``, otherwise an interpretation map at the classifier's predicted class)
as clean, l2-attacked or l-inf-attacked. Their 3-probability outputs are
concatenated in :data:`SUB_KINDS` order into a 15-feature vector, and a
random forest turns that into the binary verdict ``z``.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import attacks, interpret, nn
from ._validation import ConfigError, NotFittedError, as_batch
from .forest import RandomForest
from .metrics import roc_auc

SUB_KINDS = ("ORG", "VG", "IG", "GBP", "LRP")
INTERPRETER_KINDS = SUB_KINDS[1:]


class TriLabel(IntEnum):
    CLEAN = 0
    L2 = 1
    LINF = 2

    @property
    def one_hot(self):
        v = np.zeros(3)
        v[int(self)] = 1.0
        return v

    @classmethod
    def for_norm(cls, norm):
        if norm == "l2":
            return cls.L2
        if norm == "linf":
            return cls.LINF
        raise ConfigError(f"no detector label for norm {norm!r}; use an l2 or linf attack", "norm")


@dataclass
class DetectionSample:
    image: np.ndarray
    maps: dict
    label: TriLabel
    provenance: str
    predicted_class: int


@dataclass
class DetectionSet:
    """Columnar collection of detection samples.

    ``maps[kind]`` holds one map per image, computed against the same network
    at its predicted class ``predicted[i]``. ``labels`` are :class:`TriLabel`
    integers; ``source_ids`` link back to the clean example an entry derives from.
    """

    images: np.ndarray
    maps: dict
    labels: np.ndarray
    provenance: np.ndarray
    predicted: np.ndarray
    source_ids: np.ndarray
    true_labels: np.ndarray

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return DetectionSample(self.images[i], {k: v[i] for k, v in self.maps.items()}, TriLabel(int(self.labels[i])),
                               str(self.provenance[i]), int(self.predicted[i]))

    @property
    def binary_labels(self):
        return (self.labels != TriLabel.CLEAN).astype(np.int64)

    def counts(self):
        return {t.name.lower(): int(np.sum(self.labels == t)) for t in TriLabel}

    def inputs_for(self, kind):
        if kind == "ORG":
            return self.images
        if kind not in self.maps:
            raise KeyError(f"no {kind} maps in this detection set")
        return self.maps[kind]

    def subset(self, index):
        index = np.asarray(index)
        return DetectionSet(self.images[index], {k: v[index] for k, v in self.maps.items()}, self.labels[index],
                            self.provenance[index], self.predicted[index], self.source_ids[index],
                            self.true_labels[index])

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        keys = parts[0].maps.keys()
        return cls(np.concatenate([p.images for p in parts]),
                   {k: np.concatenate([p.maps[k] for p in parts]) for k in keys},
                   *(np.concatenate([getattr(p, a) for p in parts])
                     for a in ("labels", "provenance", "predicted", "source_ids", "true_labels")))


def compute_maps(net, images, kinds=INTERPRETER_KINDS, ig_config=interpret.IGConfig(), classes=None):
    """Interpretation maps for ``images`` at ``classes`` (default: predicted class)."""
    batch, _ = as_batch(images, net.input_shape)
    if classes is None:
        classes = nn.predict(net, batch)
    return {k: interpret.class_maps(k, net, batch, classes, ig_config) for k in kinds if k != "ORG"}


def make_detection_set(net, images, labels, provenance, true_labels, source_ids=None, kinds=INTERPRETER_KINDS,
                       ig_config=interpret.IGConfig()):
    images, _ = as_batch(images, net.input_shape)
    n = len(images)
    predicted = nn.predict(net, images) if n else np.zeros(0, np.int64)
    maps = compute_maps(net, images, kinds, ig_config, predicted) if n else \
        {k: np.zeros((0,) + net.input_shape) for k in kinds if k != "ORG"}
    return DetectionSet(images, maps, np.asarray(labels, dtype=np.int64).reshape(n),
                        np.asarray(provenance, dtype=object).reshape(n), predicted,
                        np.arange(n) if source_ids is None else np.asarray(source_ids).reshape(n),
                        np.asarray(true_labels, dtype=np.int64).reshape(n))


def balance_classes(labels, seed=0):
    """Indices that subsample every present class to the size of the smallest one."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    present = [c for c in np.unique(labels)]
    if not present:
        return np.zeros(0, dtype=np.int64)
    size = min(int(np.sum(labels == c)) for c in present)
    keep = [np.sort(rng.choice(np.flatnonzero(labels == c), size, replace=False)) for c in present]
    return np.sort(np.concatenate(keep))


def build_detection_dataset(net, images, labels, l2_attacks=(), linf_attacks=(), kinds=INTERPRETER_KINDS,
                            vaccinated=True, balance=True, seed=0, ig_config=interpret.IGConfig(),
                            source_ids=None, assignment="all"):
    """Mix clean images with successful attacks from both norm families.

    Only images the network classifies correctly are used, both as clean
    samples and as attack sources; only successful adversarial examples are
    kept. With ``balance`` the three classes are subsampled to equal size.

    ``assignment="all"`` runs every attack on every image;
    ``"round_robin"`` gives image ``j`` only the ``j``-th attack (cyclically)
    of each norm family, which yields more clean images per attack run.
    Returns ``(DetectionSet, report)`` with per-class counts before and after
    balancing.
    """
    l2_attacks, linf_attacks = list(l2_attacks), list(linf_attacks)
    if vaccinated and (not l2_attacks or not linf_attacks):
        raise ConfigError("vaccinated mode needs at least one attack per norm family",
                          "l2_attacks" if not l2_attacks else "linf_attacks")
    for family, cfgs in (("l2", l2_attacks), ("linf", linf_attacks)):
        for cfg in cfgs:
            if cfg.norm != family:
                raise ConfigError(f"{cfg.name} is an {cfg.norm} attack listed under {family}", f"{family}_attacks")
    images, _ = as_batch(images, net.input_shape)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(images)) if source_ids is None else np.asarray(source_ids)
    correct = np.flatnonzero(nn.predict(net, images) == labels) if len(images) else np.zeros(0, np.int64)
    x0, y0, id0 = images[correct], labels[correct], ids[correct]
    pieces = [(x0, np.full(len(x0), TriLabel.CLEAN), ["clean"] * len(x0), y0, id0)]
    if assignment not in ("all", "round_robin"):
        raise ConfigError(f"unknown attack assignment {assignment!r}", "assignment")
    for family in (l2_attacks, linf_attacks):
        for a, cfg in enumerate(family):
            sel = np.arange(len(x0))
            if assignment == "round_robin":
                sel = sel[sel % len(family) == a]
            batch = attacks.attack_dataset(net, x0[sel], y0[sel], cfg)
            ok = sel[batch.success]
            pieces.append((batch.images[batch.success], np.full(len(ok), TriLabel.for_norm(cfg.norm)),
                           [cfg.name] * len(ok), y0[ok], id0[ok]))
    all_x = np.concatenate([p[0] for p in pieces])
    all_t = np.concatenate([p[1] for p in pieces]).astype(np.int64)
    all_p = np.concatenate([np.asarray(p[2], dtype=object) for p in pieces]) if len(all_x) else np.zeros(0, object)
    all_y = np.concatenate([p[3] for p in pieces])
    all_id = np.concatenate([p[4] for p in pieces])
    before = {t.name.lower(): int(np.sum(all_t == t)) for t in TriLabel}
    keep = balance_classes(all_t, seed) if balance else np.arange(len(all_t))
    det = make_detection_set(net, all_x[keep], all_t[keep], all_p[keep], all_y[keep], all_id[keep], kinds, ig_config)
    return det, {"before_balancing": before, "after_balancing": det.counts()}


# -- sub-detectors ----------------------------------------------------------------

@dataclass
class SubDetector:
    """A 3-class network over one input kind; maps are divided by ``scale`` first."""

    kind: str
    network: nn.Network
    scale: float = 1.0
    history: nn.TrainHistory = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in SUB_KINDS:
            raise ConfigError(f"unknown sub-detector kind {self.kind!r}", "kind")
        if self.network.n_classes != 3:
            raise ConfigError("sub-detector networks need a 3-class head")

    def scores(self, inputs):
        """Class probabilities (clean, l2, linf) for raw images or maps."""
        return nn.predict_proba(self.network, np.asarray(inputs, dtype=np.float64) / self.scale)

    def accuracy(self, det_set):
        return float(np.mean(self.scores(det_set.inputs_for(self.kind)).argmax(axis=1) == det_set.labels))


def fit_map_scale(maps, quantile=0.99):
    """Global divisor that brings the bulk of map magnitudes to about 1."""
    mags = np.abs(np.asarray(maps)).ravel()
    s = float(np.quantile(mags, quantile)) if mags.size else 0.0
    return s if s > 0 else 1.0


def train_sub_detector(kind, det_set, cfg=nn.TrainConfig(learning_rate=2e-3, batch_size=32, epochs=20),
                       architecture="cnn", width=8, seed=0):
    inputs = det_set.inputs_for(kind)
    scale = 1.0 if kind == "ORG" else fit_map_scale(inputs)
    net = nn.build_preset(architecture, inputs.shape[1:], 3, seed=seed, width=width)
    if cfg.epochs == 0:
        return SubDetector(kind, net, scale, nn.TrainHistory())
    net, history = nn.train(net, inputs / scale, det_set.labels, cfg)
    return SubDetector(kind, net, scale, history)


def sub_detector_scores(sub, sample):
    """3-probability vector(s) for a :class:`DetectionSample` or :class:`DetectionSet`."""
    if isinstance(sample, DetectionSample):
        inputs = sample.image if sub.kind == "ORG" else sample.maps[sub.kind]
        return sub.scores(inputs[np.newaxis])[0]
    return sub.scores(sample.inputs_for(sub.kind))


def feature_vectors(sub_detectors, det_set):
    """``(N, 15)`` concatenated sub-detector probabilities in :data:`SUB_KINDS` order."""
    return np.concatenate([sub_detector_scores(sub_detectors[k], det_set) for k in SUB_KINDS], axis=1)


def rf_train(features, labels, n_trees=100, max_depth=8, max_features=4, seed=0):
    return RandomForest(n_trees=n_trees, max_depth=max_depth, max_features=max_features, seed=seed).fit(
        features, labels)


def rf_predict(forest, features):
    """Return ``(z, vote_fraction)``; ``z = 1`` only above a one-half vote."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    frac = forest.vote_fraction(features[np.newaxis] if single else features)
    z = (frac > 0.5).astype(np.int64)
    return (int(z[0]), float(frac[0])) if single else (z, frac)


def detector_scalar_score(probs):
    """``D = p_l2 + p_linf - p_clean``; positive when adversarial mass dominates."""
    probs = np.asarray(probs, dtype=np.float64)
    return probs[..., 1] + probs[..., 2] - probs[..., 0]


def entropy_bits(probs):
    probs = np.asarray(probs, dtype=np.float64)
    terms = np.where(probs > 0, probs * np.log2(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class DetectionOutput:
    z: np.ndarray
    vote_fraction: np.ndarray
    sub_scores: dict
    features: np.ndarray
    predicted: np.ndarray
    maps: dict

    def entropies(self):
        return {k: entropy_bits(v) for k, v in self.sub_scores.items()}


def ensemble_detect(net, sub_detectors, forest, x, ig_config=interpret.IGConfig()):
    """Run every sub-detector on fresh maps of ``x`` and apply the forest.

    Per-sub outputs and maps are kept on the returned :class:`DetectionOutput`
    for interpreter selection during rectification.
    """
    if forest is None or not getattr(forest, "trees_", None):
        raise NotFittedError("the ensemble needs a fitted forest with at least one tree")
    missing = set(SUB_KINDS) - set(sub_detectors)
    if missing:
        raise ConfigError(f"missing sub-detectors {sorted(missing)}", "sub_detectors")
    batch, _ = as_batch(x, net.input_shape)
    predicted = nn.predict(net, batch)
    maps = compute_maps(net, batch, INTERPRETER_KINDS, ig_config, predicted)
    sub_scores = {k: sub_detectors[k].scores(batch if k == "ORG" else maps[k]) for k in SUB_KINDS}
    features = np.concatenate([sub_scores[k] for k in SUB_KINDS], axis=1)
    z, frac = rf_predict(forest, features)
    return DetectionOutput(np.atleast_1d(z), np.atleast_1d(frac), sub_scores, features, predicted, maps)


class EnsembleDetector(ClassifierMixin, BaseEstimator):
    """Five sub-detectors plus a forest, fitted on disjoint detection sets.

    ``fit(X, y)`` takes images with :class:`TriLabel` targets. The forest is
    trained on sub-detector outputs for ``rf_set`` when given; otherwise a
    seeded, per-class half of the data is held out for it.
    """

    def __init__(self, network=None, ig_steps=50, sub_architecture="cnn", sub_width=8, sub_epochs=20,
                 sub_learning_rate=2e-3, sub_batch_size=32, n_trees=100, max_depth=8, max_features=4, seed=0):
        self.network = network
        self.ig_steps = ig_steps
        self.sub_architecture = sub_architecture
        self.sub_width = sub_width
        self.sub_epochs = sub_epochs
        self.sub_learning_rate = sub_learning_rate
        self.sub_batch_size = sub_batch_size
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.max_features = max_features
        self.seed = seed

    @property
    def ig_config(self):
        return interpret.IGConfig(self.ig_steps)

    def _as_set(self, X, y):
        if isinstance(X, DetectionSet):
            return X
        y = np.asarray(y, dtype=np.int64)
        return make_detection_set(self.network, X, y, np.where(y == 0, "clean", "attack"),
                                  np.full(len(y), -1), ig_config=self.ig_config)

    def fit(self, X, y=None, rf_set=None):
        det = self._as_set(X, y)
        if rf_set is None:
            rng = np.random.default_rng([self.seed, 7])
            mask = np.zeros(len(det), bool)
            for c in np.unique(det.labels):
                idx = np.flatnonzero(det.labels == c)
                mask[rng.choice(idx, len(idx) // 2, replace=False)] = True
            det, rf_set = det.subset(np.flatnonzero(~mask)), det.subset(np.flatnonzero(mask))
        elif not isinstance(rf_set, DetectionSet):
            rf_set = self._as_set(*rf_set)
        cfg = nn.TrainConfig(self.sub_learning_rate, self.sub_batch_size, self.sub_epochs, self.seed)
        self.sub_detectors_ = {k: train_sub_detector(k, det, cfg, self.sub_architecture, self.sub_width,
                                                     seed=self.seed + i)
                               for i, k in enumerate(SUB_KINDS)}
        self.forest_ = rf_train(feature_vectors(self.sub_detectors_, rf_set), rf_set.binary_labels,
                                self.n_trees, self.max_depth, self.max_features, self.seed)
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "forest_"):
            raise NotFittedError("EnsembleDetector is not fitted")

    def detect(self, X):
        self._check_fitted()
        return ensemble_detect(self.network, self.sub_detectors_, self.forest_, X, self.ig_config)

    def predict(self, X):
        return self.detect(X).z

    def decision_function(self, X):
        return self.detect(X).vote_fraction

    def features(self, det_set):
        self._check_fitted()
        return feature_vectors(self.sub_detectors_, det_set)

    def sub_detector_auc(self, det_set):
        """Binary AUC of each sub-detector's adversarial mass on ``det_set``."""
        y = det_set.binary_labels
        return {k: roc_auc(1 - sub_detector_scores(s, det_set)[:, 0], y) for k, s in self.sub_detectors_.items()}

    def to_arrays(self):
        self._check_fitted()
        arrays = self.forest_.to_arrays("forest")
        for k, sub in self.sub_detectors_.items():
            arrays.update(nn.network_to_arrays(sub.network, f"sub/{k}/"))
            arrays[f"sub/{k}/scale"] = np.array(sub.scale)
        return arrays

    def load_arrays(self, arrays):
        self.forest_ = RandomForest.from_arrays(arrays, "forest")
        self.sub_detectors_ = {k: SubDetector(k, nn.network_from_arrays(arrays, f"sub/{k}/"),
                                              float(arrays[f"sub/{k}/scale"])) for k in SUB_KINDS}
        self.classes_ = np.array([0, 1])
        return self


def restrict_detection_set(det_set, provenances, balance=True, seed=0):
    """Keep only samples whose provenance is listed (``"clean"`` for clean ones), optionally rebalanced."""
    keep = np.flatnonzero(np.isin(det_set.provenance.astype(str), list(provenances)))
    sub = det_set.subset(keep)
    return sub.subset(balance_classes(sub.labels, seed)) if balance else sub


def save_detection_set(path, det_set, config_hash=""):
    arrays = {"images": det_set.images, "labels": det_set.labels, "provenance": det_set.provenance.astype(str),
              "predicted": det_set.predicted, "source_ids": det_set.source_ids, "true_labels": det_set.true_labels,
              "config_hash": np.array(config_hash)}
    arrays.update({f"map/{k}": v for k, v in det_set.maps.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_detection_set(path, expected_config_hash=None):
    with np.load(path, allow_pickle=False) as data:
        found = str(data["config_hash"])
        if expected_config_hash is not None and found != expected_config_hash:
            raise ConfigError(f"{path} was built with config {found}, expected {expected_config_hash}",
                              "config_hash")
        return DetectionSet(data["images"], {k[4:]: data[k] for k in data.files if k.startswith("map/")},
                            data["labels"], data["provenance"].astype(object), data["predicted"],
                            data["source_ids"], data["true_labels"])
