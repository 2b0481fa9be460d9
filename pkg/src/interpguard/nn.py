"""Small differentiable classifier engine built on numpy.

Images are channel-last: one image is ``(rows, cols, channels)`` and a batch is
``(N, rows, cols, channels)``. A forward pass records every layer's input,
output and cache in a :class:`ForwardTrace`; :func:`backward` walks that trace
in reverse and lets callers override the gradient rule of ReLU layers, which is
what the guided-backpropagation interpreter needs.

Gradients used for interpretation are taken with respect to the pre-softmax
logits. Loss gradients (training, attacks) use cross-entropy over the softmax.
"""

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import (
    ClassIndexError,
    InputShapeError,
    ModelFormatError,
    ModelVersionError,
    NotFittedError,
    TrainingDivergedError,
    as_batch,
    check_labels,
    one_hot,
)

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool", "flatten", "softmax")
PARAMETRIC_KINDS = ("dense", "conv2d")
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a :class:`Network`.

    ``fan_in``/``fan_out`` are feature counts for dense layers and channel
    counts for conv2d. ``kernel``/``stride`` apply to conv2d and maxpool;
    ``padding`` (zeros, both sides) to conv2d only.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC_KINDS and (self.fan_in < 1 or self.fan_out < 1):
            raise ValueError(f"{self.kind} needs positive fan_in and fan_out")
        if self.kind in ("conv2d", "maxpool") and self.kernel < 1:
            raise ValueError(f"{self.kind} needs a positive kernel size")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    def to_dict(self):
        return {k: getattr(self, k) for k in ("kind", "fan_in", "fan_out", "kernel", "stride", "padding")}


def dense(fan_in, fan_out):
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out)


def conv2d(in_channels, out_channels, kernel, stride=1, padding=0):
    return LayerSpec("conv2d", in_channels, out_channels, kernel, stride, padding)


def relu():
    return LayerSpec("relu")


def maxpool(kernel=2, stride=None):
    return LayerSpec("maxpool", kernel=kernel, stride=stride or kernel)


def flatten():
    return LayerSpec("flatten")


def softmax():
    return LayerSpec("softmax")


def _output_shape(spec, shape):
    kind = spec.kind
    if kind == "dense":
        if shape != (spec.fan_in,):
            raise InputShapeError(f"dense layer expects ({spec.fan_in},), got {shape}")
        return (spec.fan_out,)
    if kind in ("conv2d", "maxpool"):
        if len(shape) != 3:
            raise InputShapeError(f"{kind} expects a (rows, cols, channels) input, got {shape}")
        if kind == "conv2d" and shape[2] != spec.fan_in:
            raise InputShapeError(f"conv2d expects {spec.fan_in} channels, got {shape[2]}")
        pad = spec.padding if kind == "conv2d" else 0
        rows = (shape[0] + 2 * pad - spec.kernel) // spec.stride + 1
        cols = (shape[1] + 2 * pad - spec.kernel) // spec.stride + 1
        if rows < 1 or cols < 1:
            raise InputShapeError(f"{kind} kernel {spec.kernel} does not fit input {shape}")
        return (rows, cols, spec.fan_out if kind == "conv2d" else shape[2])
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "softmax" and len(shape) != 1:
        raise InputShapeError("softmax expects a flat logit vector")
    return shape


def _windows(x, kernel, stride):
    # (N, Ho, Wo, C, k, k) view; no copy
    return sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(spec, params, x):
    """Return ``(output, cache)`` for one layer."""
    kind = spec.kind
    if kind == "dense":
        return x @ params["W"] + params["b"], None
    if kind == "conv2d":
        if spec.padding:
            p = spec.padding
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = _windows(x, spec.kernel, spec.stride)
        n, ho, wo = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
        w = params["W"].reshape(-1, spec.fan_out)
        return (cols @ w + params["b"]).reshape(n, ho, wo, spec.fan_out), cols
    if kind == "relu":
        return np.maximum(x, 0.0), None
    if kind == "maxpool":
        k, s = spec.kernel, spec.stride
        n, h, w, c = x.shape
        if k == s and h % k == 0 and w % k == 0:
            # non-overlapping tiles: same (di, dj) window order as the strided view
            flat = x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(
                n, h // k, w // k, c, k * k)
        else:
            win = _windows(x, k, s)
            flat = win.reshape(win.shape[:4] + (-1,))
        idx = flat.argmax(axis=-1)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    return _softmax(x), None


def _conv_input_grad(spec, params, in_shape, g):
    n, ho, wo, cout = g.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    gcols = (g.reshape(-1, cout) @ params["W"].reshape(-1, cout).T).reshape(n, ho, wo, k, k, spec.fan_in)
    dx = np.zeros((n, in_shape[1] + 2 * p, in_shape[2] + 2 * p, spec.fan_in))
    for di in range(k):
        for dj in range(k):
            dx[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s, :] += gcols[:, :, :, di, dj, :]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx


def _pool_input_grad(spec, in_shape, idx, g):
    _, ho, wo, _ = g.shape
    k, s = spec.kernel, spec.stride
    dx = np.zeros(in_shape)
    for di in range(k):
        for dj in range(k):
            routed = np.where(idx == di * k + dj, g, 0.0)
            dx[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s, :] += routed
    return dx


def layer_input_grad(spec, params, x_in, cache, g):
    """Plain backward step: gradient w.r.t. the layer input given ``g``."""
    kind = spec.kind
    if kind == "dense":
        return g @ params["W"].T
    if kind == "conv2d":
        return _conv_input_grad(spec, params, x_in.shape, g)
    if kind == "relu":
        return g * (x_in > 0)
    if kind == "maxpool":
        return _pool_input_grad(spec, x_in.shape, cache, g)
    if kind == "flatten":
        return g.reshape(x_in.shape)
    raise ValueError("softmax has no standalone input gradient; seed backward at the logits")


def _param_grads(spec, x_in, cache, g):
    if spec.kind == "dense":
        return {"W": x_in.T @ g, "b": g.sum(axis=0)}
    g2 = g.reshape(-1, spec.fan_out)
    dw = (cache.T @ g2).reshape(spec.kernel, spec.kernel, spec.fan_in, spec.fan_out)
    return {"W": dw, "b": g2.sum(axis=0)}


@dataclass
class ForwardTrace:
    """Per-layer inputs, outputs and caches recorded by one forward pass."""

    inputs: list
    outputs: list
    caches: list
    single: bool = False

    def __len__(self):
        return len(self.inputs)

    @property
    def logits(self):
        return self.inputs[-1]

    @property
    def probabilities(self):
        return self.outputs[-1]


class Network:
    """Layered classifier ending in a softmax head.

    Parameters are initialised uniformly in ``±sqrt(6 / fan_in)`` from ``seed``
    with zero biases, unless ``params`` is given.
    """

    def __init__(self, input_shape, layers, params=None, seed=0):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = tuple(layers)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("a network must end with a softmax layer")
        if any(spec.kind == "softmax" for spec in self.layers[:-1]):
            raise ValueError("softmax may only appear as the final layer")
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(_output_shape(spec, shapes[-1]))
        self.shapes = tuple(shapes)
        if params is None:
            params = self._init_params(seed)
        self.params = [None if p is None else {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}
                       for p in params]
        self._check_params()

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = []
        for spec in self.layers:
            if spec.kind == "dense":
                shape, fan = (spec.fan_in, spec.fan_out), spec.fan_in
            elif spec.kind == "conv2d":
                shape = (spec.kernel, spec.kernel, spec.fan_in, spec.fan_out)
                fan = spec.kernel * spec.kernel * spec.fan_in
            else:
                params.append(None)
                continue
            limit = np.sqrt(6.0 / fan)
            params.append({"W": rng.uniform(-limit, limit, size=shape), "b": np.zeros(spec.fan_out)})
        return params

    def _check_params(self):
        if len(self.params) != len(self.layers):
            raise ValueError("one parameter entry per layer is required")
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "dense":
                expected = (spec.fan_in, spec.fan_out)
            elif spec.kind == "conv2d":
                expected = (spec.kernel, spec.kernel, spec.fan_in, spec.fan_out)
            else:
                if p is not None:
                    raise ValueError(f"{spec.kind} layers carry no parameters")
                continue
            if p is None or p["W"].shape != expected or p["b"].shape != (spec.fan_out,):
                raise ValueError(f"parameter shapes for {spec.kind} layer must be {expected} and ({spec.fan_out},)")

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    def copy(self):
        return Network(self.input_shape, self.layers,
                       [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.params])

    def __repr__(self):
        kinds = ",".join(spec.kind for spec in self.layers)
        return f"Network(input_shape={self.input_shape}, layers=[{kinds}])"


def forward(net, x):
    """Run ``net`` on one image or a batch.

    Returns ``(probabilities, trace)``; probabilities have shape ``(L,)`` for a
    single image and ``(N, L)`` for a batch.
    """
    batch, single = as_batch(x, net.input_shape)
    inputs, outputs, caches = [], [], []
    h = batch
    for spec, params in zip(net.layers, net.params):
        inputs.append(h)
        h, cache = _layer_forward(spec, params, h)
        outputs.append(h)
        caches.append(cache)
    trace = ForwardTrace(inputs, outputs, caches, single)
    return (h[0] if single else h), trace


def logits(net, x):
    _, trace = forward(net, x)
    z = trace.logits
    return z[0] if trace.single else z


def predict(net, x, batch_size=512):
    """Predicted class indices (ties go to the lowest index)."""
    batch, single = as_batch(x, net.input_shape)
    out = np.concatenate([forward(net, batch[i:i + batch_size])[0].argmax(axis=1)
                          for i in range(0, len(batch), batch_size)]) if len(batch) else np.zeros(0, int)
    return int(out[0]) if single else out


def predict_proba(net, x, batch_size=512):
    batch, single = as_batch(x, net.input_shape)
    if not len(batch):
        return np.zeros((0, net.n_classes))
    out = np.concatenate([forward(net, batch[i:i + batch_size])[0] for i in range(0, len(batch), batch_size)])
    return out[0] if single else out


def backward(net, trace, grad_logits, relu_rule=None, with_params=False):
    """Propagate ``grad_logits`` from the logits back to the input.

    ``relu_rule(layer_index, relu_input, upstream)`` replaces the ReLU backward
    step when given. Returns the input gradient (batch-shaped) and, when
    ``with_params`` is set, a list of per-layer parameter gradients.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[np.newaxis]
    param_grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 2, -1, -1):
        spec = net.layers[i]
        if with_params and spec.kind in PARAMETRIC_KINDS:
            param_grads[i] = _param_grads(spec, trace.inputs[i], trace.caches[i], g)
        if spec.kind == "relu" and relu_rule is not None:
            g = relu_rule(i, trace.inputs[i], g)
        else:
            g = layer_input_grad(spec, net.params[i], trace.inputs[i], trace.caches[i], g)
    return (g, param_grads) if with_params else g


def _class_seed(n_classes, n_rows, class_index):
    ci = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (n_rows,))
    if ci.size and (ci.min() < 0 or ci.max() >= n_classes):
        raise ClassIndexError(f"class index must lie in [0, {n_classes})")
    return one_hot(ci, n_classes)


def backward_input(net, trace, class_index):
    """Gradient of logit ``class_index`` w.r.t. every input pixel.

    ``class_index`` may be an int or one index per batch row.
    """
    seed = _class_seed(net.n_classes, len(trace.logits), class_index)
    g = backward(net, trace, seed)
    return g[0] if trace.single else g


def cross_entropy(probabilities, y):
    """Per-example cross-entropy for integer labels ``y``."""
    p = np.atleast_2d(probabilities)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return -np.log(np.maximum(p[np.arange(len(y)), y], np.finfo(float).tiny))


def backward_loss(net, trace, y):
    """Input gradient of the cross-entropy loss at label(s) ``y``.

    ``y`` is a class index, one index per row, or one-hot rows.
    """
    n = len(trace.logits)
    y = np.asarray(y)
    if y.ndim == 2 or (trace.single and y.ndim == 1 and y.size == net.n_classes > 1):
        y = check_labels(y.reshape(n, -1), n, net.n_classes)
    seed = trace.probabilities - _class_seed(net.n_classes, n, y)
    g = backward(net, trace, seed)
    return g[0] if trace.single else g


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss != "cross_entropy":
            raise ValueError("only the cross_entropy loss is supported")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    train_accuracy: float = float("nan")


def train(net, x, y, cfg=TrainConfig(), sample_weight=None):
    """Optimise a copy of ``net`` with Adam on cross-entropy.

    The input network is left untouched. Returns ``(trained_network, history)``.
    Minibatch order is drawn from ``cfg.seed`` so runs are reproducible.
    """
    x, _ = as_batch(x, net.input_shape)
    if not len(x):
        raise ValueError("cannot train on an empty dataset")
    y = check_labels(y, len(x), net.n_classes)
    w = np.ones(len(x)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    out = net.copy()
    history = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    moments = [None if p is None else {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in p.items()}
               for p in out.params]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs, trace = forward(out, x[idx])
            bw = w[idx] / w[idx].sum()
            losses = cross_entropy(probs, y[idx])
            total += float(np.sum(losses * w[idx]))
            seed = (probs - one_hot(y[idx], out.n_classes)) * bw[:, None]
            _, grads = backward(out, trace, seed, with_params=True)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
            for p, m, g in zip(out.params, moments, grads):
                if p is None:
                    continue
                for k in p:
                    m1, m2 = m[k]
                    m1 *= beta1
                    m1 += (1 - beta1) * g[k]
                    m2 *= beta2
                    m2 += (1 - beta2) * g[k] ** 2
                    p[k] -= lr_t * m1 / (np.sqrt(m2) + eps)
        mean_loss = total / w.sum()
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(v)) for p in out.params if p for v in p.values()):
            raise TrainingDivergedError(epoch)
        history.losses.append(mean_loss)
    history.train_accuracy = float(np.mean(predict(out, x) == y))
    return out, history


def fine_tune(net, x, y, cfg=TrainConfig(), sample_weight=None):
    """Continue training from ``net``'s current parameters (alias of :func:`train`)."""
    return train(net, x, y, cfg, sample_weight)


def accuracy(net, x, y):
    x, _ = as_batch(x, net.input_shape)
    if not len(x):
        return float("nan")
    return float(np.mean(predict(net, x) == np.asarray(y)))


# -- presets ------------------------------------------------------------------

def build_preset(name, input_shape, n_classes, seed=0, width=8):
    """Architectures used across the toolkit.

    ``cnn``: two 3x3 conv/ReLU/2x2-maxpool stages then a 64-unit hidden layer.
    ``cnn_wide``: the same with twice the filters (used as a black-box surrogate).
    ``mlp``: one 64-unit hidden layer. ``linear``: a single dense layer.
    """
    rows, cols, ch = input_shape
    if name in ("cnn", "cnn_wide"):
        c1 = width if name == "cnn" else 2 * width
        c2 = 2 * c1
        r, c = rows // 2 // 2, cols // 2 // 2
        layers = [conv2d(ch, c1, 3, padding=1), relu(), maxpool(2),
                  conv2d(c1, c2, 3, padding=1), relu(), maxpool(2),
                  flatten(), dense(r * c * c2, 64), relu(), dense(64, n_classes), softmax()]
    elif name == "mlp":
        layers = [flatten(), dense(rows * cols * ch, 64), relu(), dense(64, n_classes), softmax()]
    elif name == "linear":
        layers = [flatten(), dense(rows * cols * ch, n_classes), softmax()]
    else:
        raise ValueError(f"unknown architecture preset {name!r}")
    return Network(input_shape, layers, seed=seed)


# -- persistence ----------------------------------------------------------------

def network_to_arrays(net, prefix=""):
    """Flatten a network into a dict of arrays plus a JSON header entry."""
    header = {"format_version": MODEL_FORMAT_VERSION, "input_shape": list(net.input_shape),
              "layers": [spec.to_dict() for spec in net.layers]}
    arrays = {prefix + "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for i, p in enumerate(net.params):
        if p is not None:
            arrays[f"{prefix}p{i}_W"] = p["W"]
            arrays[f"{prefix}p{i}_b"] = p["b"]
    return arrays


def network_from_arrays(arrays, prefix=""):
    try:
        header = json.loads(bytes(np.asarray(arrays[prefix + "header"], dtype=np.uint8)).decode())
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"missing or unreadable model header: {exc}") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise ModelFormatError("model header lacks a format_version field")
    if header["format_version"] != MODEL_FORMAT_VERSION:
        raise ModelVersionError(f"model format version {header['format_version']} is not supported "
                                f"(expected {MODEL_FORMAT_VERSION})")
    try:
        layers = [LayerSpec(**d) for d in header["layers"]]
        params = []
        for i, spec in enumerate(layers):
            if spec.kind in PARAMETRIC_KINDS:
                params.append({"W": np.asarray(arrays[f"{prefix}p{i}_W"]), "b": np.asarray(arrays[f"{prefix}p{i}_b"])})
            else:
                params.append(None)
        return Network(header["input_shape"], layers, params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model arrays are inconsistent with the header: {exc}") from exc


def save_model(net, path):
    with open(path, "wb") as fh:
        np.savez(fh, **network_to_arrays(net))


def load_model(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
        with np.load(io.BytesIO(data), allow_pickle=False) as arrays:
            return network_from_arrays(dict(arrays))
    except (zipfile.BadZipFile, OSError, EOFError) as exc:
        raise ModelFormatError(f"{path} is not a readable model file: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, (ModelFormatError, ModelVersionError)):
            raise
        raise ModelFormatError(f"{path} is not a readable model file: {exc}") from exc


# -- estimator face -------------------------------------------------------------

class NetworkClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn style wrapper around :class:`Network` and :func:`train`.

    ``X`` is a stack of images ``(N, rows, cols, channels)``; ``y`` holds class
    indices ``0..n_classes-1``.
    """

    def __init__(self, architecture="cnn", n_classes=None, learning_rate=1e-3, batch_size=64,
                 epochs=10, seed=0, width=8):
        self.architecture = architecture
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.width = width

    def _train_config(self):
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed)

    def fit(self, X, y, sample_weight=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise InputShapeError("X must have shape (N, rows, cols, channels)")
        y = np.asarray(y, dtype=np.int64)
        n_classes = self.n_classes or int(y.max()) + 1
        net = build_preset(self.architecture, X.shape[1:], n_classes, seed=self.seed, width=self.width)
        self.network_, self.history_ = train(net, X, y, self._train_config(), sample_weight)
        self.classes_ = np.arange(n_classes)
        return self

    @classmethod
    def from_network(cls, net, **params):
        est = cls(n_classes=net.n_classes, **params)
        est.network_ = net
        est.classes_ = np.arange(net.n_classes)
        return est

    def _net(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("call fit() first")
        return self.network_

    def predict_proba(self, X):
        return predict_proba(self._net(), X)

    def predict(self, X):
        return predict(self._net(), X)
