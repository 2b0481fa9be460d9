"""Defended classification and threat-model evaluation.

A :class:`DefendedModel` returns ``F(x)`` when the ensemble says benign and
otherwise classifies a rectified copy of ``x`` with the fine-tuned classifier.
The runners here attack the classifier under grey-, black- and white-box
assumptions and summarise the outcome as :class:`EvalReport` rows.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import attacks, detect, interpret, nn, rectify
from ._validation import ConfigError, UnsupportedArchitectureError, as_batch, check_labels
from .metrics import false_positive_rate, roc_auc

__all__ = ["ThreatModel", "DefendedModel", "DefendedResult", "classify_defended", "EvalReport", "run_grey_box",
           "run_black_box", "CompositeClassifier", "build_composite", "run_white_box", "SubDetectorTarget",
           "run_transfer_attack", "roc_auc", "toy_erasure_experiment", "balance_black_box"]

COMPOSITE_KINDS = ("ORG", "VG", "IG", "GBP")


class ThreatModel(str, Enum):
    GREY_BOX = "grey_box"
    BLACK_BOX = "black_box"
    WHITE_BOX = "white_box"


@dataclass
class DefendedModel:
    """Target classifier, fitted ensemble detector and the rectified-input classifier."""

    classifier: nn.Network
    detector: detect.EnsembleDetector
    rectified_classifier: nn.Network
    rectify_config: rectify.RectifyConfig = field(default_factory=rectify.RectifyConfig)

    def __post_init__(self):
        if self.classifier.input_shape != self.rectified_classifier.input_shape:
            raise ConfigError("classifier and rectified classifier disagree on the input shape")

    def to_arrays(self):
        arrays = nn.network_to_arrays(self.classifier, "F/")
        arrays.update(nn.network_to_arrays(self.rectified_classifier, "Fr/"))
        arrays.update(self.detector.to_arrays())
        meta = {"rectify": vars(self.rectify_config), "detector": self.detector.get_params()}
        meta["detector"].pop("network")
        arrays["defended/meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        meta = json.loads(bytes(arrays["defended/meta"]).decode())
        f = nn.network_from_arrays(arrays, "F/")
        det = detect.EnsembleDetector(network=f, **meta["detector"]).load_arrays(arrays)
        return cls(f, det, nn.network_from_arrays(arrays, "Fr/"), rectify.RectifyConfig(**meta["rectify"]))

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, **self.to_arrays())

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return cls.from_arrays(dict(data))


@dataclass
class DefendedResult:
    labels: np.ndarray
    probabilities: np.ndarray
    verdicts: np.ndarray
    vote_fraction: np.ndarray
    audit: list


def classify_defended(model, x, image_ids=None):
    """Defended prediction for one image or a batch.

    Images the detector calls benign get ``F``'s probabilities unchanged. The
    rest are rectified (randomness keyed on ``image_ids``) and classified by
    the fine-tuned classifier. ``audit`` holds one dict per image.
    """
    batch, single = as_batch(x, model.classifier.input_shape)
    ids = np.arange(len(batch)) if image_ids is None else np.asarray(image_ids)
    probs = nn.predict_proba(model.classifier, batch)
    out = model.detector.detect(batch)
    z = np.asarray(out.z).astype(bool)
    audit = [{"verdict": int(v), "vote_fraction": float(f), "interpreter": None, "mask_density": 0.0}
             for v, f in zip(z, out.vote_fraction)]
    flagged = np.flatnonzero(z)
    if flagged.size:
        sub_out = detect.DetectionOutput(out.z[flagged], out.vote_fraction[flagged],
                                         {k: v[flagged] for k, v in out.sub_scores.items()},
                                         out.features[flagged], out.predicted[flagged],
                                         {k: v[flagged] for k, v in out.maps.items()})
        rect, records = rectify.rectify(model.classifier, sub_out, batch[flagged], model.rectify_config, ids[flagged])
        probs[flagged] = nn.predict_proba(model.rectified_classifier, rect)
        for i, rec in zip(flagged, records):
            audit[i].update(interpreter=rec.kind, mask_density=rec.mask_density)
    result = DefendedResult(probs.argmax(axis=1), probs, z.astype(np.int64), out.vote_fraction, audit)
    if single:
        return DefendedResult(result.labels[0], probs[0], result.verdicts[0], result.vote_fraction[0], audit[0])
    return result


# -- reports -----------------------------------------------------------------------

REPORT_COLUMNS = ("threat_model", "attack", "n_total", "n_success", "n_failure", "attack_success_rate",
                  "undefended_accuracy", "defended_accuracy", "detection_auc", "detection_rate", "config_hash")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


@dataclass
class EvalReport:
    """Per-attack evaluation rows; serialises to CSV with :data:`REPORT_COLUMNS`."""

    rows: list = field(default_factory=list)

    def add(self, **row):
        missing = set(REPORT_COLUMNS) - set(row)
        if missing:
            raise ValueError(f"report row lacks {sorted(missing)}")
        if row["n_success"] + row["n_failure"] != row["n_total"]:
            raise ValueError("successes and failures must add up to the total")
        auc = row["detection_auc"]
        if not (math.isnan(auc) or 0.0 <= auc <= 1.0):
            raise ValueError("AUC must lie in [0, 1]")
        self.rows.append({k: row[k] for k in REPORT_COLUMNS})

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def row(self, attack, threat_model=None):
        for r in self.rows:
            if r["attack"] == attack and (threat_model is None or r["threat_model"] == threat_model):
                return r
        raise KeyError(attack)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def write_records(self, path):
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v)
                                     for k, v in r.items()}, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ValueError(f"{path} does not have the report header")
            rows = []
            for r in reader:
                for k in ("n_total", "n_success", "n_failure"):
                    r[k] = int(r[k])
                for k in ("attack_success_rate", "undefended_accuracy", "defended_accuracy", "detection_auc",
                          "detection_rate"):
                    r[k] = float(r[k])
                rows.append(r)
        return cls(rows)


def _correct_subset(net, x, y):
    keep = nn.predict(net, x) == y
    return x[keep], y[keep], np.flatnonzero(keep)


def _evaluate_rows(model, threat, name, x_clean, y_clean, x_adv, y, success, config_hash, ids, clean_scores=None):
    """One report row: F accuracy, defended accuracy and detection AUC for an attacked set."""
    undefended = float(np.mean(nn.predict(model.classifier, x_adv) == y)) if len(y) else float("nan")
    defended = classify_defended(model, x_adv, ids) if len(y) else None
    def_acc = float(np.mean(defended.labels == y)) if len(y) else float("nan")
    if clean_scores is None:
        clean_scores = model.detector.decision_function(x_clean) if len(x_clean) else np.zeros(0)
    adv_scores = defended.vote_fraction[success] if len(y) else np.zeros(0)
    auc = roc_auc(np.r_[clean_scores, adv_scores], np.r_[np.zeros(len(clean_scores)), np.ones(len(adv_scores))])
    rate = float(np.mean(defended.verdicts[success])) if success.any() else float("nan")
    return dict(threat_model=threat.value, attack=name, n_total=len(y), n_success=int(success.sum()),
                n_failure=int(len(y) - success.sum()),
                attack_success_rate=float(success.mean()) if len(y) else float("nan"),
                undefended_accuracy=undefended, defended_accuracy=def_acc, detection_auc=auc,
                detection_rate=rate, config_hash=config_hash)


def _clean_row(model, threat, x, y, config_hash, ids):
    res = classify_defended(model, x, ids)
    return dict(threat_model=threat.value, attack="clean", n_total=len(y), n_success=0, n_failure=len(y),
                attack_success_rate=0.0, undefended_accuracy=float(np.mean(nn.predict(model.classifier, x) == y)),
                defended_accuracy=float(np.mean(res.labels == y)), detection_auc=float("nan"),
                detection_rate=false_positive_rate(res.verdicts, np.zeros(len(y))), config_hash=config_hash)


def run_grey_box(model, x, y, attack_cfgs, config_hash="", image_ids=None, include_clean=True):
    """Attack ``F`` alone and measure the defended model on the results.

    Attacks start from every test image. Success and accuracy columns cover
    the whole set; the detection AUC compares clean images that ``F`` gets
    right against successful attacks on those same images.
    """
    x, _ = as_batch(x, model.classifier.input_shape)
    y = check_labels(y, len(x), model.classifier.n_classes)
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids)
    report = EvalReport()
    if include_clean:
        report.add(**_clean_row(model, ThreatModel.GREY_BOX, x, y, config_hash, ids))
    correct = nn.predict(model.classifier, x) == y
    clean_scores = model.detector.decision_function(x[correct])
    for cfg in attack_cfgs:
        batch = attacks.attack_dataset(model.classifier, x, y, cfg)
        report.add(**_evaluate_rows(model, ThreatModel.GREY_BOX, cfg.name, x[correct], y[correct], batch.images, y,
                                    batch.success & correct, config_hash, ids, clean_scores))
    return report


def balance_black_box(f_correct, seed=0):
    """Indices selecting equally many ``F``-correct and ``F``-wrong examples."""
    f_correct = np.asarray(f_correct, dtype=bool)
    rng = np.random.default_rng([int(seed), 11])
    right, wrong = np.flatnonzero(f_correct), np.flatnonzero(~f_correct)
    m = min(len(right), len(wrong))
    return np.sort(np.r_[rng.choice(right, m, replace=False), rng.choice(wrong, m, replace=False)]).astype(np.int64)


def _same_network(a, b):
    if a is b:
        return True
    if a.layers != b.layers:
        return False
    return all((p is None and q is None) or (p is not None and q is not None and
                                             all(np.array_equal(p[k], q[k]) for k in p))
               for p, q in zip(a.params, b.params))


def run_black_box(model, surrogate, x, y, attack_cfgs, config_hash="", image_ids=None, seed=0):
    """Transfer attacks crafted on ``surrogate`` to the defended model.

    Attacks start from images both networks classify correctly. Each
    transferred set is balanced so that ``F`` is right on exactly half of it.
    """
    if _same_network(surrogate, model.classifier):
        raise ConfigError("the black-box surrogate must differ from the target classifier", "surrogate")
    x, _ = as_batch(x, model.classifier.input_shape)
    y = check_labels(y, len(x), model.classifier.n_classes)
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids)
    keep = (nn.predict(model.classifier, x) == y) & (nn.predict(surrogate, x) == y)
    x, y, ids = x[keep], y[keep], ids[keep]
    clean_scores = model.detector.decision_function(x) if len(x) else np.zeros(0)
    report = EvalReport()
    for cfg in attack_cfgs:
        batch = attacks.attack_dataset(surrogate, x, y, cfg)
        f_correct = nn.predict(model.classifier, batch.images) == y
        sel = balance_black_box(f_correct, seed)
        report.add(**_evaluate_rows(model, ThreatModel.BLACK_BOX, cfg.name, x, y, batch.images[sel], y[sel],
                                    ~f_correct[sel], config_hash, ids[sel], clean_scores))
    return report


# -- white box -----------------------------------------------------------------------

class _SubDetectorPath:
    """Differentiable route from an image to one sub-detector's scalar score."""

    def __init__(self, classifier, sub, ig_config):
        if sub.kind == "LRP":
            raise UnsupportedArchitectureError("the LRP sub-detector has no usable input gradient")
        self.classifier, self.sub, self.ig_config = classifier, sub, ig_config

    def forward(self, x, classes):
        if self.sub.kind == "ORG":
            inputs, path_grad = x, None
        elif self.sub.kind == "IG":
            inputs, path_grad = interpret.ig_maps(self.classifier, x, classes, self.ig_config,
                                                  return_path_gradient=True)
        else:
            inputs, path_grad = interpret.class_maps(self.sub.kind, self.classifier, x, classes), None
        probs, trace = nn.forward(self.sub.network, inputs / self.sub.scale)
        return probs, (trace, path_grad)

    def input_gradient(self, ctx, grad_probs):
        trace, path_grad = ctx
        probs = trace.probabilities
        g_logits = probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))
        g_inputs = nn.backward(self.sub.network, trace, g_logits) / self.sub.scale
        if self.sub.kind == "ORG":
            return g_inputs
        if self.sub.kind == "IG":
            return g_inputs * path_grad
        return np.zeros_like(g_inputs)   # VG/GBP maps are locally constant in x


class CompositeClassifier(attacks.AttackTarget):
    """``L + 4`` output model used as the white-box attack target.

    Channels ``0..L-1`` are ``F``'s class probabilities; channel ``L + k`` is
    ``(D_k + 1) * max_j F_j`` for the ORG, VG, IG and GBP sub-detectors, with
    ``D_k`` the scalar detector score. Attacks treat these channels as logits.
    """

    def __init__(self, classifier, sub_detectors, ig_config=interpret.IGConfig()):
        self.classifier = classifier
        self.paths = [_SubDetectorPath(classifier, sub_detectors[k], ig_config) for k in COMPOSITE_KINDS]
        self.input_shape = classifier.input_shape
        self.n_base = classifier.n_classes
        self.n_classes = classifier.n_classes + len(COMPOSITE_KINDS)

    @property
    def n_target_classes(self):
        return self.n_base

    @staticmethod
    def combine(f_probs, scores):
        """Assemble composite outputs from ``F`` probabilities and ``(N, 4)`` scalar scores ``D_k``."""
        f_probs = np.asarray(f_probs, dtype=np.float64)
        return np.concatenate([f_probs, (np.asarray(scores) + 1.0) * f_probs.max(axis=1, keepdims=True)], axis=1)

    def forward(self, x):
        x, _ = as_batch(x, self.input_shape)
        p, f_trace = nn.forward(self.classifier, x)
        classes = p.argmax(axis=1)
        sub_out = [path.forward(x, classes) for path in self.paths]
        d = np.stack([detect.detector_scalar_score(q) for q, _ in sub_out], axis=1)
        return self.combine(p, d), (x, p, f_trace, d, sub_out)

    def detector_scores(self, x):
        return self.forward(x)[1][3]

    def input_gradient(self, ctx, grad_outputs):
        x, p, f_trace, d, sub_out = ctx
        rows = np.arange(len(p))
        winner = p.argmax(axis=1)
        g_det = grad_outputs[:, self.n_base:]
        g_p = grad_outputs[:, :self.n_base].copy()
        g_p[rows, winner] += (g_det * (d + 1.0)).sum(axis=1)
        g_f_logits = p * (g_p - (g_p * p).sum(axis=1, keepdims=True))
        grad = nn.backward(self.classifier, f_trace, g_f_logits)
        m = p[rows, winner]
        for k, (path, (_, ctx_k)) in enumerate(zip(self.paths, sub_out)):
            g_q = np.tile(np.array([-1.0, 1.0, 1.0]), (len(p), 1)) * (g_det[:, k] * m)[:, None]
            grad = grad + path.input_gradient(ctx_k, g_q)
        return grad


def build_composite(model):
    return CompositeClassifier(model.classifier, model.detector.sub_detectors_, model.detector.ig_config)


def run_white_box(model, x, y, attack_cfgs, config_hash="", image_ids=None):
    """Targeted attacks on the composite classifier, evaluated on the defended model.

    A composite success means ``F`` outputs the target while all four
    included detector scores are negative.
    """
    for cfg in attack_cfgs:
        if not cfg.targeted:
            raise ConfigError(f"white-box attacks must be targeted, got {cfg.name}", "targeted")
    x, _ = as_batch(x, model.classifier.input_shape)
    y = check_labels(y, len(x), model.classifier.n_classes)
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids)
    composite = build_composite(model)
    x, y, keep = _correct_subset(model.classifier, x, y)
    ids = ids[keep]
    clean_scores = model.detector.decision_function(x) if len(x) else np.zeros(0)
    report = EvalReport()
    n_base = model.classifier.n_classes
    for cfg in attack_cfgs:
        if cfg.target is not None and cfg.target >= n_base:
            raise ConfigError("white-box targets must be base classes", "target")
        batch = attacks.attack_dataset(composite, x, y, cfg)
        report.add(**_evaluate_rows(model, ThreatModel.WHITE_BOX, cfg.name, x, y, batch.images, y, batch.success,
                                    config_hash, ids, clean_scores))
    return report


# -- transfer attacks on sub-detectors -----------------------------------------------

class SubDetectorTarget(attacks.AttackTarget):
    """One sub-detector, fed by the classifier's maps, as an attack target (3 classes)."""

    def __init__(self, classifier, sub, ig_config=interpret.IGConfig()):
        self.path = _SubDetectorPath(classifier, sub, ig_config)
        self.classifier = classifier
        self.input_shape = classifier.input_shape
        self.n_classes = 3

    def forward(self, x):
        x, _ = as_batch(x, self.input_shape)
        probs, ctx = self.path.forward(x, nn.predict(self.classifier, x))
        return ctx[0].logits, ctx

    def input_gradient(self, ctx, grad_logits):
        trace, path_grad = ctx
        g_inputs = nn.backward(self.path.sub.network, trace, grad_logits) / self.path.sub.scale
        if self.path.sub.kind == "ORG":
            return g_inputs
        if self.path.sub.kind == "IG":
            return g_inputs * path_grad
        return np.zeros_like(g_inputs)


def run_transfer_attack(model, kind, x_adv, y, attack_cfgs):
    """Push ``F``-adversarial images toward the benign class of sub-detector ``kind``.

    Each returned row reports, for the crafted images, the fooled rate of
    every sub-detector (fraction judged clean), the ensemble's fooled rate and
    the fraction of ensemble-escaped images that ``F`` still misclassifies.
    """
    if kind == "LRP":
        raise UnsupportedArchitectureError("transferable examples cannot be crafted against the LRP sub-detector")
    if kind not in detect.SUB_KINDS:
        raise ConfigError(f"unknown sub-detector kind {kind!r}", "kind")
    x_adv, _ = as_batch(x_adv, model.classifier.input_shape)
    y = np.asarray(y, dtype=np.int64)
    target = SubDetectorTarget(model.classifier, model.detector.sub_detectors_[kind], model.detector.ig_config)
    rows = []
    for cfg in attack_cfgs:
        cfg_t = attacks.AttackConfig(**{**cfg.to_dict(), "targeted": True, "target": int(detect.TriLabel.CLEAN)})
        crafted = attacks.attack_dataset(target, x_adv, np.full(len(x_adv), int(detect.TriLabel.L2)), cfg_t).images
        out = model.detector.detect(crafted)
        row = {"source": f"to{kind}", "attack": cfg.name, "n": len(crafted)}
        for k in detect.SUB_KINDS:
            row[f"fooled_{k}"] = float(np.mean(out.sub_scores[k].argmax(axis=1) == detect.TriLabel.CLEAN))
        escaped = out.z == 0
        row["fooled_ensemble"] = float(np.mean(escaped)) if len(crafted) else float("nan")
        wrong = nn.predict(model.classifier, crafted) != y
        row["escaped_success_rate"] = float(np.mean(wrong[escaped])) if escaped.any() else float("nan")
        rows.append(row)
    return rows


# -- toy erasure ----------------------------------------------------------------------

def toy_erasure_experiment(net, x, y, attack_cfgs, fractions=(0.0, 0.05), signed=False):
    """Attack success before and after zeroing the top VG pixels of successful examples.

    Returns one dict per attack with the number of successful examples and the
    success rate at every erased fraction.
    """
    x, _ = as_batch(x, net.input_shape)
    y = check_labels(y, len(x), net.n_classes)
    x, y, _ = _correct_subset(net, x, y)
    rows = []
    for cfg in attack_cfgs:
        batch = attacks.attack_dataset(net, x, y, cfg)
        adv, yy = batch.images[batch.success], y[batch.success]
        row = {"attack": cfg.name, "n": int(len(adv))}
        for frac in fractions:
            erased = rectify.erase_top_fraction(net, adv, frac, signed=signed) if len(adv) else adv
            row[f"top_{frac:g}"] = float(np.mean(nn.predict(net, erased) != yy)) if len(adv) else float("nan")
        rows.append(row)
    return rows
