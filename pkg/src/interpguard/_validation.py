"""Input validation helpers and the package's exception types."""

import numpy as np


class InterpGuardError(Exception):
    """Base class for errors raised by this package."""


class InputShapeError(InterpGuardError, ValueError):
    """An array does not have the shape an operation expects."""


class InvalidInputError(InterpGuardError, ValueError):
    """An array contains values outside the accepted domain (NaN, range)."""


class ClassIndexError(InterpGuardError, IndexError):
    pass


class TrainingDivergedError(InterpGuardError, FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"loss became non-finite during epoch {epoch}")
        self.epoch = epoch


class ModelFormatError(InterpGuardError):
    pass


class ModelVersionError(InterpGuardError):
    pass


class UnsupportedArchitectureError(InterpGuardError, NotImplementedError):
    pass


class ConfigError(InterpGuardError, ValueError):
    """Configuration failed validation; ``path`` names the offending key."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DegenerateForestError(InterpGuardError, ValueError):
    pass


class NotFittedError(InterpGuardError, AttributeError):
    pass


def as_batch(x, image_shape):
    """Return ``(batch, was_single)`` for one image or a stack of images.

    ``image_shape`` is ``(rows, cols, channels)``.
    """
    x = np.asarray(x, dtype=np.float64)
    image_shape = tuple(image_shape)
    if x.shape == image_shape:
        return x[np.newaxis], True
    if x.ndim == len(image_shape) + 1 and x.shape[1:] == image_shape:
        return x, False
    raise InputShapeError(f"expected shape {image_shape} or (N, *{image_shape}), got {x.shape}")


def check_finite(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains NaN or infinite values")
    return x


def check_unit_range(x, name="image"):
    x = check_finite(x, name)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InvalidInputError(f"{name} pixels must lie in [0, 1]")
    return x


def check_labels(y, n_samples, n_classes):
    """Accept integer class indices or one-hot rows; return int indices."""
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape != (n_samples, n_classes):
            raise InputShapeError(f"one-hot labels must be ({n_samples}, {n_classes}), got {y.shape}")
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise InvalidInputError("one-hot labels must contain exactly one 1 per row")
        return y.argmax(axis=1).astype(np.int64)
    y = np.atleast_1d(y)
    if y.shape != (n_samples,):
        raise InputShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidInputError("class labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ClassIndexError(f"class labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def one_hot(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out

