"""Gradient-based interpreters: vanilla gradient, integrated gradients, guided
backpropagation and layer-wise relevance propagation.

Every interpreter explains the pre-softmax logits. The batched ``*_maps``
functions return one ``(rows, cols, channels)`` map per image for a chosen
class; the single-image functions return a full :class:`SensitivityTensor`
holding one map per class.
"""

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nn
from ._validation import InputShapeError, InvalidInputError, UnsupportedArchitectureError, as_batch

METHODS = ("VG", "IG", "GBP", "LRP")
LRP_EPSILON = 1e-9


@dataclass
class SensitivityTensor:
    """Per-pixel, per-class attribution scores, shape ``(rows, cols, channels, L)``."""

    scores: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown interpretation method {self.method!r}")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError(f"{self.method} produced non-finite scores")

    @property
    def n_classes(self):
        return self.scores.shape[-1]

    def slice(self, class_index):
        """Map for one class, shaped like the image."""
        return self.scores[..., class_index]


@dataclass(frozen=True)
class IGConfig:
    """Integrated-gradient settings; ``baseline=None`` means an all-zero image."""

    steps: int = 50
    baseline: object = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def baseline_for(self, batch):
        if self.baseline is None:
            return np.zeros_like(batch)
        base = np.asarray(self.baseline, dtype=np.float64)
        if base.shape == batch.shape[1:]:
            return np.broadcast_to(base, batch.shape)
        if base.shape == batch.shape:
            return base
        raise InputShapeError(f"baseline shape {base.shape} does not match input {batch.shape[1:]}")


def _classes(net, batch, classes):
    if classes is None:
        return nn.predict(net, batch)
    return np.broadcast_to(np.asarray(classes, dtype=np.int64), (len(batch),))


def gbp_relu_rule(layer_index, relu_input, upstream):
    """Guided-backprop ReLU step: pass ``upstream`` only where both the forward
    input and the incoming gradient are positive."""
    return (relu_input > 0) * (upstream > 0) * upstream


def vg_maps(net, x, classes=None):
    """Vanilla gradient of logit ``classes`` (default: predicted class)."""
    batch, _ = as_batch(x, net.input_shape)
    classes = _classes(net, batch, classes)
    _, trace = nn.forward(net, batch)
    return nn.backward(net, trace, nn.one_hot(classes, net.n_classes))


def gbp_maps(net, x, classes=None):
    batch, _ = as_batch(x, net.input_shape)
    classes = _classes(net, batch, classes)
    _, trace = nn.forward(net, batch)
    return nn.backward(net, trace, nn.one_hot(classes, net.n_classes), relu_rule=gbp_relu_rule)


def ig_maps(net, x, classes=None, config=IGConfig(), return_path_gradient=False):
    """Integrated gradients by the midpoint rule over ``config.steps`` intervals.

    With ``return_path_gradient`` the averaged path gradient is returned as well;
    it is the Jacobian factor needed to differentiate the map w.r.t. the input.
    """
    batch, _ = as_batch(x, net.input_shape)
    classes = _classes(net, batch, classes)
    base = config.baseline_for(batch)
    diff = batch - base
    seed = nn.one_hot(classes, net.n_classes)
    total = np.zeros_like(batch)
    for k in range(config.steps):
        alpha = (k + 0.5) / config.steps
        _, trace = nn.forward(net, base + alpha * diff)
        total += nn.backward(net, trace, seed)
    avg = total / config.steps
    maps = diff * avg
    return (maps, avg) if return_path_gradient else maps


def _bias_free_preactivation(spec, params, x_in, cache):
    if spec.kind == "dense":
        return x_in @ params["W"]
    n = x_in.shape[0]
    rows = (x_in.shape[1] + 2 * spec.padding - spec.kernel) // spec.stride + 1
    cols = (x_in.shape[2] + 2 * spec.padding - spec.kernel) // spec.stride + 1
    return (cache @ params["W"].reshape(-1, spec.fan_out)).reshape(n, rows, cols, spec.fan_out)


def lrp_maps(net, x, classes=None, epsilon=LRP_EPSILON):
    """Relevance propagation with the epsilon rule on dense/conv layers.

    Relevance starts as the chosen logit's value. Denominators exclude biases
    and are stabilised as ``z + epsilon * sign(z)`` with ``sign(0) = +1``.
    ReLU passes relevance through; max-pooling routes it to the forward winner.
    """
    batch, _ = as_batch(x, net.input_shape)
    classes = _classes(net, batch, classes)
    _, trace = nn.forward(net, batch)
    r = nn.one_hot(classes, net.n_classes) * trace.logits
    for i in range(len(net.layers) - 2, -1, -1):
        spec, params = net.layers[i], net.params[i]
        a, cache = trace.inputs[i], trace.caches[i]
        if spec.kind in nn.PARAMETRIC_KINDS:
            z = _bias_free_preactivation(spec, params, a, cache)
            s = r / (z + epsilon * np.where(z >= 0, 1.0, -1.0))
            r = a * nn.layer_input_grad(spec, params, a, cache, s)
        elif spec.kind == "relu":
            continue
        elif spec.kind in ("maxpool", "flatten"):
            r = nn.layer_input_grad(spec, params, a, cache, r)
        else:
            raise UnsupportedArchitectureError(f"no relevance rule for layer kind {spec.kind!r}")
    return r


def class_maps(method, net, x, classes=None, ig_config=IGConfig()):
    """Dispatch to the batched map function for ``method``."""
    if method == "VG":
        return vg_maps(net, x, classes)
    if method == "IG":
        return ig_maps(net, x, classes, ig_config)
    if method == "GBP":
        return gbp_maps(net, x, classes)
    if method == "LRP":
        return lrp_maps(net, x, classes)
    raise ValueError(f"unknown interpretation method {method!r}")


def _full_tensor(method, net, x, ig_config=IGConfig()):
    batch, single = as_batch(x, net.input_shape)
    if not single:
        raise InputShapeError("full sensitivity tensors are computed one image at a time")
    per_class = [class_maps(method, net, batch, np.array([l]), ig_config)[0] for l in range(net.n_classes)]
    return SensitivityTensor(np.stack(per_class, axis=-1), method)


def vanilla_gradient(net, x):
    return _full_tensor("VG", net, x)


def integrated_gradient(net, x, config=IGConfig()):
    return _full_tensor("IG", net, x, config)


def guided_backprop(net, x):
    return _full_tensor("GBP", net, x)


def lrp(net, x):
    return _full_tensor("LRP", net, x)


def slice_for_prediction(tensor, net, x):
    """Per-pixel ``(rows, cols)`` map at the class ``net`` predicts for ``x``.

    Channels are summed; ties in the prediction go to the lowest class index.
    """
    l = nn.predict(net, x)
    return tensor.slice(l).sum(axis=-1)


def map_input_vjp(method, net, x, classes, upstream, ig_config=IGConfig()):
    """Vector-Jacobian product of a class map w.r.t. the input image.

    The engine's networks are piecewise linear (dense, conv, ReLU, max-pool), so
    the vanilla and guided gradients are locally constant in the input and
    their Jacobian is zero almost everywhere. The integrated-gradient map is
    ``(x - baseline) * path_gradient`` whose Jacobian reduces to
    ``diag(path_gradient)``. LRP is excluded, as it has no usable second-order
    derivative.
    """
    batch, _ = as_batch(x, net.input_shape)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(batch.shape)
    if method in ("VG", "GBP"):
        return np.zeros_like(batch)
    if method == "IG":
        _, avg = ig_maps(net, batch, classes, ig_config, return_path_gradient=True)
        return upstream * avg
    raise UnsupportedArchitectureError(f"{method} maps cannot be differentiated w.r.t. the input")


# -- export -------------------------------------------------------------------

def export_map(path, values, method, class_index):
    """Write a map as one JSON header line followed by little-endian float64 data."""
    values = np.ascontiguousarray(values, dtype="<f8")
    header = {"method": method, "shape": list(values.shape), "class": int(class_index), "dtype": "<f8"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(values.tobytes())


def read_map(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    return data.reshape(header["shape"]), header


class Interpreter(TransformerMixin, BaseEstimator):
    """Transformer mapping images to interpretation maps at the predicted class.

    ``fit`` is a no-op apart from recording the input shape; the wrapped network
    must already be trained.
    """

    def __init__(self, network=None, method="VG", ig_steps=50):
        self.network = network
        self.method = method
        self.ig_steps = ig_steps

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        return class_maps(self.method, self.network, X, ig_config=IGConfig(self.ig_steps))
