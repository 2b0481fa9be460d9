"""Adversarial example generators.

l-inf: FGSM, PGD.  l2: DeepFool, Carlini-Wagner style, DDN (plus an l2 PGD
variant).  l0: OnePixel (differential evolution).

All generators are batch-native: they take ``(N, rows, cols, channels)``
images with integer labels and return an :class:`AdversarialBatch`. Passing a
single image returns a single :class:`AdversarialResult`. Success flags are
always recomputed with a fresh forward pass before returning. Random draws
use one generator per example, seeded from ``(seed, example index)``, so
results do not depend on how a dataset is batched.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from ._validation import ClassIndexError, ConfigError, InputShapeError, as_batch, check_labels, check_unit_range

METHODS = ("FGSM", "PGD", "DeepFool", "CW", "DDN", "OnePixel")
NORMS = ("l0", "l2", "linf")
DEFAULT_NORM = {"FGSM": "linf", "PGD": "linf", "DeepFool": "l2", "CW": "l2", "DDN": "l2", "OnePixel": "l0"}
DEFAULT_ITERATIONS = {"FGSM": 1, "PGD": 100, "DeepFool": 50, "CW": 100, "DDN": 100, "OnePixel": 30}
UNTARGETED_ONLY = ("FGSM", "DeepFool")


@dataclass(frozen=True)
class AttackConfig:
    """Settings for one attacker.

    ``iterations`` and ``norm`` default per method. Targeted attacks use
    ``target`` when set, otherwise a per-example random class different from
    the true label.
    """

    method: str
    norm: str = None
    epsilon: float = 0.031
    step_size: float = 0.0078
    iterations: int = None
    targeted: bool = False
    target: int = None
    seed: int = 0
    random_start: bool = True
    # CW
    confidence: float = 0.0
    learning_rate: float = 0.01
    initial_const: float = 1.0
    binary_search_steps: int = 5
    # DDN
    init_norm: float = 1.0
    gamma: float = 0.05
    # DeepFool
    overshoot: float = 0.02
    # OnePixel
    pixels: int = 3
    population: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}", "method")
        if self.norm is None:
            object.__setattr__(self, "norm", DEFAULT_NORM[self.method])
        if self.iterations is None:
            object.__setattr__(self, "iterations", DEFAULT_ITERATIONS[self.method])
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}", "norm")
        if self.method == "PGD" and self.norm not in ("l2", "linf"):
            raise ConfigError("PGD supports the l2 and linf norms", "norm")
        if self.method != "PGD" and self.norm != DEFAULT_NORM[self.method]:
            raise ConfigError(f"{self.method} is an {DEFAULT_NORM[self.method]} attack", "norm")
        if self.epsilon < 0 or self.step_size < 0:
            raise ConfigError("epsilon and step_size must be non-negative")
        if self.iterations < 1 and self.method != "OnePixel":
            raise ConfigError("iterations must be >= 1", "iterations")
        if self.targeted and self.method in UNTARGETED_ONLY:
            raise ConfigError(f"{self.method} has no targeted version", "targeted")
        if self.pixels < 0 or self.population < 4:
            raise ConfigError("OnePixel needs pixels >= 0 and population >= 4")

    @property
    def name(self):
        return f"{self.method}-{'T' if self.targeted else 'U'}"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown attack field(s) {sorted(unknown)}", sorted(unknown)[0])
        if "method" not in data:
            raise ConfigError("missing required key", "method")
        return cls(**data)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AdversarialResult:
    image: np.ndarray
    success: bool
    distance: float
    iterations: int
    target: int = -1


@dataclass
class AdversarialBatch:
    """Batched attack output; ``targets`` is -1 for untargeted attacks."""

    images: np.ndarray
    success: np.ndarray
    distances: np.ndarray
    iterations: np.ndarray
    targets: np.ndarray
    norm: str
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return AdversarialResult(self.images[i], bool(self.success[i]), float(self.distances[i]),
                                 int(self.iterations[i]), int(self.targets[i]))

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self) else float("nan")


def distance(x_adv, x_orig, norm):
    """Per-example distance between batches under ``norm``."""
    d = (np.asarray(x_adv) - np.asarray(x_orig)).reshape(len(x_adv), -1)
    if norm == "linf":
        return np.abs(d).max(axis=1) if d.shape[1] else np.zeros(len(d))
    if norm == "l2":
        return np.sqrt((d ** 2).sum(axis=1))
    if norm == "l0":
        # count differing pixel positions (any channel)
        d = (np.asarray(x_adv) != np.asarray(x_orig)).reshape(len(x_adv), -1, np.shape(x_adv)[-1])
        return d.any(axis=2).sum(axis=1).astype(np.float64)
    raise ValueError(f"unknown norm {norm!r}")


def project(x_adv, x_orig, norm, epsilon):
    """Project into the ``epsilon`` ball around ``x_orig`` and then into [0, 1]."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise InputShapeError("x_adv and x_orig must have the same shape")
    if norm == "linf":
        out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    elif norm == "l2":
        batched = x_adv.reshape(-1, *x_orig.shape[-3:]) if x_adv.ndim >= 3 else x_adv[None]
        orig = x_orig.reshape(batched.shape)
        delta = batched - orig
        norms = np.sqrt((delta.reshape(len(delta), -1) ** 2).sum(axis=1))
        scale = np.where(norms > epsilon, epsilon / np.maximum(norms, 1e-300), 1.0)
        out = (orig + delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))).reshape(x_adv.shape)
    else:
        raise ValueError(f"projection is defined for l2 and linf, not {norm!r}")
    return np.clip(out, 0.0, 1.0)


class AttackTarget:
    """Differentiable model interface the attacks operate on.

    Subclasses provide ``input_shape``, ``n_classes``, ``forward(x) ->
    (logits, trace)`` and ``input_gradient(trace, grad_logits)``. Softmax
    over the logits defines the class probabilities. Labels and random
    targets are drawn from the first ``n_target_classes`` outputs.
    """

    input_shape = None
    n_classes = None

    @property
    def n_target_classes(self):
        """Outputs eligible as random attack targets (the leading ones)."""
        return self.n_classes

    def forward(self, x):
        raise NotImplementedError

    def input_gradient(self, trace, grad_logits):
        raise NotImplementedError

    def predict_proba(self, x, batch_size=512):
        out = [nn._softmax(self.forward(x[s:s + batch_size])[0]) for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def predict(self, x, batch_size=512):
        out = [self.forward(x[s:s + batch_size])[0].argmax(axis=1) for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class NetworkTarget(AttackTarget):
    def __init__(self, net):
        self.net = net
        self.input_shape = net.input_shape
        self.n_classes = net.n_classes

    def forward(self, x):
        _, trace = nn.forward(self.net, x)
        return trace.logits, trace

    def input_gradient(self, trace, grad_logits):
        return nn.backward(self.net, trace, grad_logits)

    def predict(self, x, batch_size=512):
        return nn.predict(self.net, x, batch_size)

    def predict_proba(self, x, batch_size=512):
        return nn.predict_proba(self.net, x, batch_size)


def as_target(model):
    return model if isinstance(model, AttackTarget) else NetworkTarget(model)


def _rngs(seed, indices, stream=0):
    return [np.random.default_rng([int(seed), int(i), stream]) for i in indices]


def _prepare(net, x, y, cfg, indices):
    net = as_target(net)
    batch, single = as_batch(x, net.input_shape)
    check_unit_range(batch)
    y = check_labels(np.atleast_1d(y), len(batch), net.n_classes)
    indices = np.arange(len(batch)) if indices is None else np.asarray(indices)
    if cfg.targeted:
        if cfg.target is not None:
            if not 0 <= cfg.target < net.n_classes:
                raise ClassIndexError(f"target class must lie in [0, {net.n_classes})")
            targets = np.full(len(batch), cfg.target)
        else:
            k = net.n_target_classes
            targets = np.array([(yi + 1 + rng.integers(k - 1)) % k
                                for yi, rng in zip(y, _rngs(cfg.seed, indices, stream=1))], dtype=np.int64)
    else:
        targets = np.full(len(batch), -1)
    return batch, single, y, targets, indices


def is_successful(net, x_adv, y, targets, targeted):
    pred = as_target(net).predict(x_adv)
    return pred == targets if targeted else pred != y


def _finish(net, x0, x_adv, y, targets, cfg, iterations, single, extras=None):
    success = is_successful(net, x_adv, y, targets, cfg.targeted) if len(x0) else np.zeros(0, bool)
    out = AdversarialBatch(x_adv, success, distance(x_adv, x0, cfg.norm), np.asarray(iterations),
                           targets, cfg.norm, extras or {})
    return out[0] if single else out


def attack_direction(net, x, y, targets, targeted):
    """Gradient whose ascent serves the attack: +dCE(y) or -dCE(target)."""
    net = as_target(net)
    z, trace = net.forward(x)
    labels = targets if targeted else y
    g = net.input_gradient(trace, nn._softmax(z) - nn.one_hot(labels, net.n_classes))
    return -g if targeted else g


def _l2_normalize(g):
    n = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (g.ndim - 1))
    return np.divide(g, n, out=np.zeros_like(g), where=n > 0)


def fgsm(net, x, y, cfg, indices=None):
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    if cfg.method != "FGSM":
        raise ConfigError("fgsm() needs an FGSM config", "method")
    x0, single, y, targets, _ = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    g = attack_direction(net, x0, y, targets, False)
    x_adv = np.clip(x0 + cfg.epsilon * np.sign(g), 0.0, 1.0)
    return _finish(net, x0, x_adv, y, targets, cfg, np.ones(len(x0), int), single)


def pgd(net, x, y, cfg, indices=None, callback=None):
    """Projected gradient descent in the l-inf (signed steps) or l2 ball.

    ``callback(iteration, x_adv)`` is invoked after every projected step.
    """
    if cfg.method != "PGD":
        raise ConfigError("pgd() needs a PGD config", "method")
    x0, single, y, targets, indices = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    x_adv = x0.copy()
    if cfg.random_start and len(x0):
        noise = []
        for rng in _rngs(cfg.seed, indices):
            if cfg.norm == "linf":
                noise.append(rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape[1:]))
            else:
                d = rng.normal(size=x0.shape[1:])
                d *= cfg.epsilon * rng.uniform() / max(np.linalg.norm(d), 1e-12)
                noise.append(d)
        x_adv = project(x0 + np.stack(noise), x0, cfg.norm, cfg.epsilon)
    for it in range(cfg.iterations):
        g = attack_direction(net, x_adv, y, targets, cfg.targeted)
        step = np.sign(g) if cfg.norm == "linf" else _l2_normalize(g)
        x_adv = project(x_adv + cfg.step_size * step, x0, cfg.norm, cfg.epsilon)
        if callback is not None:
            callback(it, x_adv)
    return _finish(net, x0, x_adv, y, targets, cfg, np.full(len(x0), cfg.iterations), single)


def deepfool(net, x, y, cfg, indices=None):
    """Iterative linearisation toward the nearest decision boundary (untargeted).

    Examples the network already misclassifies are returned unchanged.
    """
    if cfg.method != "DeepFool":
        raise ConfigError("deepfool() needs a DeepFool config", "method")
    x0, single, y, targets, _ = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    n, n_classes = len(x0), net.n_classes
    r_tot = np.zeros_like(x0)
    iters = np.zeros(n, int)
    active = np.ones(n, bool)
    for _ in range(cfg.iterations):
        x_adv = np.clip(x0 + (1 + cfg.overshoot) * r_tot, 0.0, 1.0)
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        z, trace = net.forward(x_adv[idx])
        still = z.argmax(axis=1) == y[idx]
        active[idx[~still]] = False
        idx, z = idx[still], z[still]
        if not idx.size:
            break
        sub_trace = trace if still.all() else net.forward(x_adv[idx])[1]
        grads = np.stack([net.input_gradient(sub_trace, nn.one_hot(np.full(len(idx), k), n_classes))
                          for k in range(n_classes)], axis=1)
        rows = np.arange(len(idx))
        w = grads - grads[rows, y[idx]][:, None]
        f = z - z[rows, y[idx]][:, None]
        wnorm = np.sqrt((w.reshape(len(idx), n_classes, -1) ** 2).sum(axis=2))
        ratio = np.abs(f) / (wnorm + 1e-12)
        ratio[rows, y[idx]] = np.inf
        k = ratio.argmin(axis=1)
        wk, fk, nk = w[rows, k], np.abs(f[rows, k]), wnorm[rows, k]
        step = ((fk + 1e-4) / (nk ** 2 + 1e-12)).reshape((-1,) + (1,) * (x0.ndim - 1)) * wk
        r_tot[idx] += step
        iters[idx] += 1
    x_adv = np.clip(x0 + (1 + cfg.overshoot) * r_tot, 0.0, 1.0)
    return _finish(net, x0, x_adv, y, targets, cfg, iters, single)


class _Adam:
    def __init__(self, shape, lr):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr

    def step(self, param, grad):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad ** 2
        mhat = self.m / (1 - 0.9 ** self.t)
        vhat = self.v / (1 - 0.999 ** self.t)
        return param - self.lr * mhat / (np.sqrt(vhat) + 1e-8)


def _cw_margin(z, y, targets, targeted):
    """Return ``(margin, grad_logits)`` with margin <= 0 meaning the goal is met."""
    rows = np.arange(len(z))
    goal = targets if targeted else y
    others = z.copy()
    others[rows, goal] = -np.inf
    best_other = others.argmax(axis=1)
    if targeted:
        margin = z[rows, best_other] - z[rows, goal]
        sign = np.ones(len(z))
    else:
        margin = z[rows, goal] - z[rows, best_other]
        sign = -np.ones(len(z))
    g = np.zeros_like(z)
    g[rows, best_other] += sign
    g[rows, goal] -= sign
    return margin, g


def cw(net, x, y, cfg, indices=None):
    """Carlini-Wagner style l2 attack.

    Minimises ``||delta||^2 + c * max(margin, -confidence)`` with Adam in pixel
    space (box constraint by clipping) and a binary search over ``c``. Returns
    the smallest successful perturbation found, or the input on failure.
    """
    if cfg.method != "CW":
        raise ConfigError("cw() needs a CW config", "method")
    x0, single, y, targets, _ = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    n = len(x0)
    lower, upper = np.zeros(n), np.full(n, np.inf)
    const = np.full(n, cfg.initial_const)
    best_l2 = np.full(n, np.inf)
    best = x0.copy()
    iters = np.zeros(n, int)
    for _ in range(cfg.binary_search_steps):
        delta = np.zeros_like(x0)
        opt = _Adam(x0.shape, cfg.learning_rate)
        found = np.zeros(n, bool)
        for it in range(cfg.iterations + 1):
            x_adv = x0 + delta
            z, trace = net.forward(x_adv)
            margin, g_logits = _cw_margin(z, y, targets, cfg.targeted)
            l2sq = (delta.reshape(n, -1) ** 2).sum(axis=1)
            pred = z.argmax(axis=1)
            ok = (pred == targets) if cfg.targeted else (pred != y)
            ok &= margin <= -cfg.confidence
            improved = ok & (l2sq < best_l2)
            best_l2[improved] = l2sq[improved]
            best[improved] = x_adv[improved]
            iters[improved] = it
            found |= ok
            if it == cfg.iterations:
                break
            active = (margin > -cfg.confidence).astype(float)
            g_x = net.input_gradient(trace, g_logits * (const * active)[:, None])
            delta = opt.step(delta, 2 * delta + g_x)
            delta = np.clip(x0 + delta, 0.0, 1.0) - x0
        upper = np.where(found, np.minimum(upper, const), upper)
        lower = np.where(found, lower, np.maximum(lower, const))
        const = np.where(np.isfinite(upper), (lower + upper) / 2, const * 10)
    return _finish(net, x0, best, y, targets, cfg, iters, single)


def ddn(net, x, y, cfg, indices=None):
    """Decoupled direction and norm l2 attack.

    Takes normalised gradient steps (cosine-annealed step size from 1 to 0.01),
    then rescales the perturbation to a norm that shrinks by ``gamma`` while the
    iterate is adversarial and grows by ``gamma`` otherwise. Returns the
    smallest successful iterate; ``extras['norm_history']`` holds the norm
    schedule, one row per iteration.
    """
    if cfg.method != "DDN":
        raise ConfigError("ddn() needs a DDN config", "method")
    x0, single, y, targets, indices = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    n = len(x0)
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    delta = np.zeros_like(x0)
    norm = np.full(n, float(cfg.init_norm))
    best_l2 = np.full(n, np.inf)
    best = x0.copy()
    iters = np.zeros(n, int)
    history = [norm.copy()]
    noise_rngs = _rngs(cfg.seed, indices, stream=2)
    for it in range(cfg.iterations):
        alpha = 0.01 + (1.0 - 0.01) * (1 + np.cos(np.pi * (it + 1) / cfg.iterations)) / 2
        x_adv = x0 + delta
        g = attack_direction(net, x_adv, y, targets, cfg.targeted)
        pred = net.predict(x_adv)
        is_adv = (pred == targets) if cfg.targeted else (pred != y)
        l2 = np.sqrt((delta.reshape(n, -1) ** 2).sum(axis=1))
        improved = is_adv & (l2 < best_l2)
        best_l2[improved] = l2[improved]
        best[improved] = x_adv[improved]
        iters[improved] = it
        gnorm = np.sqrt((g.reshape(n, -1) ** 2).sum(axis=1))
        for i in np.flatnonzero(gnorm == 0):
            g[i] = noise_rngs[i].normal(size=g.shape[1:])
        delta = delta + alpha * _l2_normalize(g)
        norm = norm * np.where(is_adv, 1 - cfg.gamma, 1 + cfg.gamma)
        dnorm = np.sqrt((delta.reshape(n, -1) ** 2).sum(axis=1))
        delta = delta * (norm / np.maximum(dnorm, 1e-12)).reshape(bshape)
        delta = np.clip(x0 + delta, 0.0, 1.0) - x0
        history.append(norm.copy())
    x_adv = x0 + delta
    pred = net.predict(x_adv)
    is_adv = (pred == targets) if cfg.targeted else (pred != y)
    l2 = np.sqrt((delta.reshape(n, -1) ** 2).sum(axis=1))
    improved = is_adv & (l2 < best_l2)
    best[improved] = x_adv[improved]
    iters[improved] = cfg.iterations
    return _finish(net, x0, best, y, targets, cfg, iters, single, {"norm_history": np.stack(history, axis=1)})


def _apply_pixels(x, candidates, n_pixels):
    """Write candidate (row, col, value...) tuples into copies of ``x``."""
    rows_, cols_, ch = x.shape
    out = np.repeat(x[np.newaxis], len(candidates), axis=0)
    cand = candidates.reshape(len(candidates), n_pixels, 2 + ch)
    r = np.clip(cand[:, :, 0].astype(int), 0, rows_ - 1)
    c = np.clip(cand[:, :, 1].astype(int), 0, cols_ - 1)
    pop = np.repeat(np.arange(len(candidates)), n_pixels)
    out[pop, r.ravel(), c.ravel(), :] = cand[:, :, 2:].reshape(-1, ch)
    return out


def one_pixel(net, x, y, cfg, indices=None):
    """Differential evolution over ``cfg.pixels`` (row, col, value) triples.

    DE/rand/1 with scale 0.5 and no crossover; the population is
    ``cfg.population`` and ``cfg.iterations`` generations run at most.
    Fitness is the true-class probability (untargeted) or the negated target
    probability (targeted).
    """
    if cfg.method != "OnePixel":
        raise ConfigError("one_pixel() needs a OnePixel config", "method")
    x0, single, y, targets, indices = _prepare(net, x, y, cfg, indices)
    net = as_target(net)
    n = len(x0)
    rows_, cols_, ch = net.input_shape
    x_adv = x0.copy()
    iters = np.zeros(n, int)
    if cfg.pixels == 0:
        return _finish(net, x0, x_adv, y, targets, cfg, iters, single)
    dim = cfg.pixels * (2 + ch)
    low = np.tile(np.r_[0.0, 0.0, np.zeros(ch)], cfg.pixels)
    high = np.tile(np.r_[rows_ - 1e-9, cols_ - 1e-9, np.ones(ch)], cfg.pixels)

    def fitness(i, pop):
        probs = net.predict_proba(_apply_pixels(x0[i], pop, cfg.pixels))
        return -probs[:, targets[i]] if cfg.targeted else probs[:, y[i]]

    for i, rng in enumerate(_rngs(cfg.seed, indices)):
        pop = low + rng.uniform(size=(cfg.population, dim)) * (high - low)
        fit = fitness(i, pop)
        for gen in range(cfg.iterations):
            best = pop[fit.argmin()]
            if is_successful(net, _apply_pixels(x0[i], best[None], cfg.pixels), y[i:i + 1],
                             targets[i:i + 1], cfg.targeted)[0]:
                break
            picks = np.array([rng.choice(cfg.population, 3, replace=False) for _ in range(cfg.population)])
            trial = np.clip(pop[picks[:, 0]] + 0.5 * (pop[picks[:, 1]] - pop[picks[:, 2]]), low, high)
            trial_fit = fitness(i, trial)
            better = trial_fit < fit
            pop[better], fit[better] = trial[better], trial_fit[better]
            iters[i] = gen + 1
        x_adv[i] = _apply_pixels(x0[i], pop[fit.argmin()][None], cfg.pixels)[0]
    return _finish(net, x0, x_adv, y, targets, cfg, iters, single)


_DISPATCH = {"FGSM": fgsm, "PGD": pgd, "DeepFool": deepfool, "CW": cw, "DDN": ddn, "OnePixel": one_pixel}


def run_attack(net, x, y, cfg, indices=None):
    return _DISPATCH[cfg.method](net, x, y, cfg, indices=indices)


def attack_batch(net, x, y, cfg, batch_size=256):
    """Attack every example of a dataset.

    Returns ``(results, summary)``: a list of :class:`AdversarialResult` and a
    dict with ``n``, ``successes`` and ``success_rate``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if not len(x):
        return [], {"n": 0, "successes": 0, "success_rate": float("nan")}
    batch = attack_dataset(net, x, y, cfg, batch_size)
    results = [batch[i] for i in range(len(batch))]
    return results, {"n": len(results), "successes": int(batch.success.sum()), "success_rate": batch.success_rate}


def attack_dataset(net, x, y, cfg, batch_size=256):
    """Attack a dataset in chunks and concatenate into one :class:`AdversarialBatch`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    parts = [run_attack(net, x[s:s + batch_size], y[s:s + batch_size], cfg,
                        indices=np.arange(s, min(s + batch_size, len(x))))
             for s in range(0, len(x), batch_size)]
    if not parts:
        empty = np.zeros((0,) + x.shape[1:])
        return AdversarialBatch(empty, np.zeros(0, bool), np.zeros(0), np.zeros(0, int), np.zeros(0, int), cfg.norm)
    return AdversarialBatch(np.concatenate([p.images for p in parts]), np.concatenate([p.success for p in parts]),
                            np.concatenate([p.distances for p in parts]),
                            np.concatenate([p.iterations for p in parts]),
                            np.concatenate([p.targets for p in parts]), cfg.norm)


# -- persistence ----------------------------------------------------------------

def save_adversarial_set(path, batch, cfg, labels, source_ids=None, config_hash=None):
    """Store an attacked set as ``.npz`` with a JSON metadata entry."""
    meta = {"method": cfg.method, "name": cfg.name, "attack_config": cfg.to_dict(),
            "attack_hash": cfg.config_hash(), "config_hash": config_hash, "norm": batch.norm,
            "n": len(batch), "success_rate": batch.success_rate}
    source_ids = np.arange(len(batch)) if source_ids is None else np.asarray(source_ids)
    with open(path, "wb") as fh:
        np.savez(fh, images=batch.images, success=batch.success, distances=batch.distances,
                 iterations=batch.iterations, targets=batch.targets, labels=np.asarray(labels),
                 source_ids=source_ids,
                 meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_adversarial_set(path, expected_config_hash=None):
    """Load a set saved by :func:`save_adversarial_set`.

    Returns ``(batch, labels, source_ids, metadata)``. A mismatching
    ``expected_config_hash`` raises :class:`ConfigError`.
    """
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
            raise ConfigError(f"adversarial set {path} was built with config {meta.get('config_hash')}, "
                              f"expected {expected_config_hash}", "config_hash")
        batch = AdversarialBatch(data["images"], data["success"], data["distances"], data["iterations"],
                                 data["targets"], meta["norm"])
        return batch, data["labels"], data["source_ids"], meta
