"""Interpretation-guided randomized rectification.

Suspect pixels are those whose interpretation score clears a fraction
``alpha`` of the map's range. Each suspect pixel is, with probability ``p``,
perturbed by Gaussian noise whose scale is the image's pixel standard
deviation, and the result is clipped back to [0, 1].
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import detect, interpret, nn
from ._validation import ConfigError, InputShapeError, as_batch, check_finite

INTERPRETER_ORDER = detect.INTERPRETER_KINDS  # tie-break order


@dataclass(frozen=True)
class RectifyConfig:
    alpha: float = 0.6
    p: float = 0.5
    duplicates: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie strictly between 0 and 1", "alpha")
        if not 0 <= self.p <= 1:
            raise ConfigError("p must lie in [0, 1]", "p")
        if self.duplicates < 1:
            raise ConfigError("duplicates must be >= 1", "duplicates")


@dataclass
class SuspectMask:
    mask: np.ndarray

    @property
    def shape(self):
        return self.mask.shape

    @property
    def density(self):
        return float(self.mask.mean()) if self.mask.size else 0.0


def pixel_scores(g):
    """Collapse a ``(rows, cols, channels)`` map to per-pixel scores by summing channels."""
    g = np.asarray(g, dtype=np.float64)
    return g.sum(axis=-1) if g.ndim == 3 else g


def suspect_mask(g, alpha):
    """Pixels with ``g > alpha * (g_max - g_min) + g_min``.

    A constant map gives an empty mask, as does ``alpha = 1``.
    """
    g = check_finite(pixel_scores(g), "interpretation map")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if g.size == 0:
        return SuspectMask(np.zeros(g.shape, bool))
    lo, hi = g.min(), g.max()
    return SuspectMask(g > alpha * (hi - lo) + lo)


def random_erase(x_adv, mask, p, rng, return_selection=False):
    """Add ``N(0, std(x_adv))`` noise to each masked pixel with probability ``p``.

    ``rng`` is a seed or a ``numpy.random.Generator``. Pixels outside the
    selection are returned bit-exactly.
    """
    x = check_finite(x_adv, "image")
    if x.ndim != 3:
        raise InputShapeError(f"expected one (rows, cols, channels) image, got shape {x.shape}")
    mask = mask.mask if isinstance(mask, SuspectMask) else np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise InputShapeError(f"mask shape {mask.shape} does not match image {x.shape[:2]}")
    rng = np.random.default_rng(rng)
    chosen = mask & (rng.random(mask.shape) < p)
    noise = rng.normal(0.0, x.std(), size=x.shape)
    out = np.where(chosen[..., None], np.clip(x + noise, 0.0, 1.0), x)
    return (out, chosen) if return_selection else out


def entropy(z):
    """Shannon entropy in bits of a probability vector (``0 log 0 = 0``)."""
    return float(detect.entropy_bits(z))


def select_interpreter(sub_scores):
    """Pick the interpreter sub-detector to source the rectification map.

    Candidates are interpreter sub-detectors whose argmax is an adversarial
    class; the lowest-entropy candidate wins with ties going to the earlier of
    VG, IG, GBP, LRP. With no candidate, the lowest-entropy interpreter overall
    is used. Returns ``(kind, entropy, had_candidates)``.
    """
    ent = {k: entropy(sub_scores[k]) for k in INTERPRETER_ORDER}
    candidates = [k for k in INTERPRETER_ORDER if int(np.argmax(sub_scores[k])) != detect.TriLabel.CLEAN]
    pool = candidates or list(INTERPRETER_ORDER)
    best = min(pool, key=lambda k: (ent[k], INTERPRETER_ORDER.index(k)))
    return best, ent[best], bool(candidates)


@dataclass
class RectifyRecord:
    kind: str
    entropy: float
    had_candidates: bool
    mask_density: float
    erased: int


def _rng_for(seed, image_id, duplicate=0):
    return np.random.default_rng([int(seed), int(image_id), int(duplicate)])


def rectify_one(image, maps, sub_scores, cfg, rng):
    """Rectify one image given its interpreter maps and sub-detector scores."""
    kind, ent, had = select_interpreter(sub_scores)
    mask = suspect_mask(maps[kind], cfg.alpha)
    out, chosen = random_erase(image, mask, cfg.p, rng, return_selection=True)
    return out, RectifyRecord(kind, ent, had, mask.density, int(chosen.sum()))


def rectify(net, detection, x, cfg=RectifyConfig(), image_ids=None, duplicate=0):
    """Rectify every image in ``x`` using its :class:`detect.DetectionOutput`.

    Randomness for image ``i`` comes from ``(cfg.seed, image_ids[i], duplicate)``.
    Returns ``(images, records)``.
    """
    batch, single = as_batch(x, net.input_shape)
    ids = np.arange(len(batch)) if image_ids is None else np.asarray(image_ids)
    out = np.empty_like(batch)
    records = []
    for i in range(len(batch)):
        maps = {k: v[i] for k, v in detection.maps.items()}
        scores = {k: v[i] for k, v in detection.sub_scores.items()}
        out[i], rec = rectify_one(batch[i], maps, scores, cfg, _rng_for(cfg.seed, ids[i], duplicate))
        records.append(rec)
    return (out[0], records[0]) if single else (out, records)


def finetune_on_rectified(net, detector, adv_images, adv_labels, clean_images, clean_labels, cfg=RectifyConfig(),
                          train_cfg=nn.TrainConfig(learning_rate=5e-4, batch_size=32, epochs=5), image_ids=None):
    """Fine-tune ``net`` on ``cfg.duplicates`` rectified copies of each adversarial image plus clean data.

    ``detector`` is a fitted :class:`detect.EnsembleDetector` used to pick the
    interpreter for each image. Returns ``(fine_tuned_net, report)``.
    """
    adv, _ = as_batch(adv_images, net.input_shape)
    clean, _ = as_batch(clean_images, net.input_shape)
    ids = np.arange(len(adv)) if image_ids is None else np.asarray(image_ids)
    if len(adv):
        det = detector.detect(adv)
        copies = [rectify(net, det, adv, cfg, ids, duplicate=d)[0] for d in range(cfg.duplicates)]
        rect = np.concatenate(copies)
        rect_labels = np.tile(np.asarray(adv_labels, dtype=np.int64), cfg.duplicates)
    else:
        rect, rect_labels = np.zeros((0,) + net.input_shape), np.zeros(0, np.int64)
    x = np.concatenate([rect, clean])
    y = np.concatenate([rect_labels, np.asarray(clean_labels, dtype=np.int64)])
    tuned, history = nn.fine_tune(net, x, y, train_cfg)
    return tuned, {"rectified": len(rect), "clean": len(clean), "final_loss": history.losses[-1] if history.losses
                   else float("nan")}


def erase_top_fraction(net, x, fraction, signed=False):
    """Zero the ``ceil(fraction * rows * cols)`` pixels with the largest VG scores.

    Scores are the absolute channel-summed vanilla gradient at the predicted
    class (``signed=True`` ranks the raw signed value instead). Ties are
    broken by raster position.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    batch, single = as_batch(x, net.input_shape)
    rows, cols = batch.shape[1:3]
    k = math.ceil(round(fraction * rows * cols, 9))
    out = batch.copy()
    if k and len(batch):
        scores = pixel_scores(interpret.vg_maps(net, batch)).reshape(len(batch), -1)
        if not signed:
            scores = np.abs(scores)
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        flat = out.reshape(len(batch), rows * cols, -1)
        flat[np.arange(len(batch))[:, None], top] = 0.0
    return out[0] if single else out


class Rectifier(TransformerMixin, BaseEstimator):
    """Transformer that rectifies images as if the ensemble had flagged them."""

    def __init__(self, network=None, detector=None, alpha=0.6, p=0.5, duplicates=4, seed=0):
        self.network = network
        self.detector = detector
        self.alpha = alpha
        self.p = p
        self.duplicates = duplicates
        self.seed = seed

    @property
    def config(self):
        return RectifyConfig(self.alpha, self.p, self.duplicates, self.seed)

    def fit(self, X=None, y=None):
        self.config  # validates parameters
        return self

    def transform(self, X):
        return rectify(self.network, self.detector.detect(X), X, self.config)[0]
