"""Target posteriors expressed as potential energies ``U(theta) = -log p(theta | D)``.

Every model exposes ``dim``, ``potential``, ``grad_potential``,
``stochastic_grad`` and ``log_prior``; the harness additionally calls
``minibatch_grad(theta, rng)``, which draws a minibatch (or synthetic noise)
from ``rng`` and returns the stochastic gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import kernels
from .errors import ContractError


class TargetModel(Protocol):
    dim: int

    def potential(self, theta: np.ndarray) -> float: ...

    def grad_potential(self, theta: np.ndarray) -> np.ndarray: ...

    def stochastic_grad(self, theta: np.ndarray, batch_indices=None, rng=None) -> np.ndarray: ...

    def log_prior(self, theta: np.ndarray) -> float: ...

    def minibatch_grad(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


def _as_theta(model, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != model.dim:
        raise ContractError(f"theta has shape {theta.shape}, model expects ({model.dim},)")
    return theta


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSet:
    """Observations ``x`` (N, d) with optional integer labels ``y`` (N,)."""

    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractError("dataset needs at least one observation and 2-D features")
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.asarray(self.y)
            if y.shape != (x.shape[0],):
                raise ContractError("labels must have one entry per observation")
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(np.mod(y, 1) == 0):
                    raise ContractError("labels must be integers")
            object.__setattr__(self, "y", np.ascontiguousarray(y, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.size

    def subset(self, indices) -> "DataSet":
        indices = np.asarray(indices)
        return DataSet(self.x[indices], None if self.y is None else self.y[indices])


def make_blobs(n_points: int, n_features: int = 2, n_classes: int = 2, separation: float = 2.0,
               seed: int = 0, split: int = 0) -> DataSet:
    """Gaussian blobs, one per class, with unit within-class variance.

    Class centres are drawn on a sphere of radius ``separation / 2``; labels
    alternate so every class is represented for ``n_points >= n_classes``.
    Different ``split`` values share the centres of ``seed`` but draw fresh
    points, which is how held-out sets are made.
    """
    if n_points < 1 or n_features < 1 or n_classes < 2:
        raise ContractError("need n_points >= 1, n_features >= 1, n_classes >= 2")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB10B,)))
    centres = rng.standard_normal((n_classes, n_features))
    centres *= (separation / 2.0) / np.linalg.norm(centres, axis=1, keepdims=True)
    y = np.arange(n_points) % n_classes
    if split:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB10B, split)))
    x = centres[y] + rng.standard_normal((n_points, n_features))
    return DataSet(x, y)


def load_csv(path) -> DataSet:
    """Load a header-first CSV; the last column holds the integer class label."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if len(header) < 2:
        raise ContractError(f"{path}: need at least one feature column and a label column")
    if not rows:
        raise ContractError(f"{path}: no observations")
    try:
        values = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ContractError(f"{path}: non-numeric entry ({exc})") from None
    if values.shape[1] != len(header):
        raise ContractError(f"{path}: ragged rows")
    return DataSet(values[:, :-1], values[:, -1])


def save_csv(dataset: DataSet, path) -> None:
    if dataset.y is None:
        raise ContractError("save_csv needs labels")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.n_features)] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MinibatchSpec:
    batch_size: int
    replace: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


def draw_minibatch(spec: MinibatchSpec, dataset_size: int, rng: np.random.Generator) -> np.ndarray:
    if dataset_size < 1:
        raise ContractError("dataset_size must be positive")
    if spec.replace:
        return rng.integers(0, dataset_size, size=spec.batch_size)
    if spec.batch_size > dataset_size:
        raise ContractError(
            f"batch_size {spec.batch_size} exceeds dataset size {dataset_size} without replacement"
        )
    return rng.choice(dataset_size, size=spec.batch_size, replace=False)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class GaussianTarget:
    """Multivariate normal target, ``U = 0.5 (theta - mu)^T Sigma^-1 (theta - mu)``.

    There is no dataset, so the stochastic gradient is the exact gradient plus
    synthetic Gaussian noise with diagonal variance ``grad_noise``.
    """

    def __init__(self, mean, cov, grad_noise=0.0):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.shape[0])
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ContractError("mean must be (n,) and cov (n, n)")
        if not np.array_equal(cov, cov.T):
            raise ContractError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ContractError("covariance must be positive definite") from None
        self.dim = mean.shape[0]
        self.mean = mean
        self.cov = cov
        self.precision = np.linalg.inv(cov)
        self.precision = 0.5 * (self.precision + self.precision.T)
        self._chol = chol
        noise = np.broadcast_to(np.asarray(grad_noise, dtype=float), (self.dim,)).copy()
        if np.any(noise < 0):
            raise ContractError("grad_noise must be non-negative")
        self.grad_noise = noise
        self._noise_std = np.sqrt(noise)
        self._noisy = bool(np.any(noise > 0))

    def __repr__(self):
        return f"GaussianTarget(dim={self.dim})"

    def potential(self, theta):
        d = _as_theta(self, theta) - self.mean
        return float(0.5 * d @ self.precision @ d)

    def grad_potential(self, theta):
        return self.precision @ (_as_theta(self, theta) - self.mean)

    def log_prior(self, theta):
        _as_theta(self, theta)
        return 0.0

    def stochastic_grad(self, theta, batch_indices=None, rng=None):
        grad = self.grad_potential(theta)
        if self._noisy and rng is not None:
            grad = grad + self._noise_std * rng.standard_normal(self.dim)
        return grad

    def minibatch_grad(self, theta, rng):
        return self.stochastic_grad(theta, rng=rng)

    def mahalanobis(self, theta):
        d = np.asarray(theta, dtype=float) - self.mean
        return np.sqrt(np.einsum("...i,ij,...j->...", d, self.precision, d))

    def sample(self, size, rng):
        return self.mean + rng.standard_normal((size, self.dim)) @ self._chol.T


@dataclass(frozen=True)
class _Layer:
    n_in: int
    n_out: int
    w_slice: slice
    b_slice: slice


class ClassifierPosterior:
    """Posterior over the weights of a small feed-forward softmax classifier.

    ``U(theta) = -sum_j log p(y_j | x_j, theta) + prior_precision * ||theta||^2``.

    ``layers`` lists the widths ``(n_features, hidden..., n_classes)``; with two
    entries the model is multinomial logistic regression. Parameters are a flat
    vector, layer by layer; each layer stores its weight matrix of shape
    ``(n_in, n_out)`` in row-major order followed by its ``n_out`` biases.
    """

    def __init__(self, dataset: DataSet, layers: Sequence[int], prior_precision: float = 1e-5,
                 minibatch: MinibatchSpec | None = None, activation: str = "relu"):
        if dataset.y is None:
            raise ContractError("classifier needs a labelled dataset")
        layers = tuple(int(w) for w in layers)
        if len(layers) < 2 or any(w < 1 for w in layers):
            raise ContractError("layers needs at least input and output widths")
        if layers[0] != dataset.n_features:
            raise ContractError(
                f"first layer width {layers[0]} != dataset features {dataset.n_features}"
            )
        if layers[-1] < 2:
            raise ContractError("need at least two classes")
        if dataset.y.min() < 0 or dataset.y.max() >= layers[-1]:
            raise ContractError("labels out of range for the output layer")
        if prior_precision <= 0:
            raise ContractError("prior_precision must be positive")
        if activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {activation!r}")
        self.dataset = dataset
        self.layers = layers
        self.prior_precision = float(prior_precision)
        self.minibatch = minibatch or MinibatchSpec(min(100, dataset.size))
        if not self.minibatch.replace and self.minibatch.batch_size > dataset.size:
            raise ContractError("batch_size exceeds dataset size")
        self.activation = activation
        offset = 0
        shapes = []
        for n_in, n_out in zip(layers[:-1], layers[1:]):
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            shapes.append(_Layer(n_in, n_out, w, b))
        self._layers = tuple(shapes)
        self._sizes = np.array(layers, dtype=np.int64)
        self.dim = offset

    def __repr__(self):
        return f"ClassifierPosterior(layers={self.layers}, N={self.dataset.size}, dim={self.dim})"

    @property
    def n_data(self) -> int:
        return self.dataset.size

    def unpack(self, theta):
        theta = _as_theta(self, theta)
        return [
            (theta[l.w_slice].reshape(l.n_in, l.n_out), theta[l.b_slice]) for l in self._layers
        ]

    def init_theta(self, rng) -> np.ndarray:
        """Scaled-Gaussian initial weights (zero biases)."""
        theta = np.zeros(self.dim)
        for l in self._layers:
            theta[l.w_slice] = rng.standard_normal(l.n_in * l.n_out) / np.sqrt(l.n_in)
        return theta

    def logits(self, theta, x):
        h = np.asarray(x, dtype=float)
        params = self.unpack(theta)
        for i, (w, b) in enumerate(params):
            a = h @ w + b
            if i < len(params) - 1:
                a = np.maximum(a, 0.0) if self.activation == "relu" else np.tanh(a)
            h = a
        return h

    def predict_proba(self, theta, x):
        z = self.logits(theta, x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def _nll_sum_and_grad(self, theta, x, y, need_grad=True):
        nll, grad = kernels.mlp_nll_grad(
            theta, x, y, self._sizes, self.activation == "relu", need_grad
        )
        return float(nll), (grad if need_grad else None)

    def log_prior(self, theta):
        theta = _as_theta(self, theta)
        return -self.prior_precision * float(theta @ theta)

    def potential(self, theta):
        theta = _as_theta(self, theta)
        nll, _ = self._nll_sum_and_grad(theta, self.dataset.x, self.dataset.y, need_grad=False)
        return nll - self.log_prior(theta)

    def grad_potential(self, theta):
        theta = _as_theta(self, theta)
        _, grad = self._nll_sum_and_grad(theta, self.dataset.x, self.dataset.y)
        return grad + 2.0 * self.prior_precision * theta

    def stochastic_grad(self, theta, batch_indices=None, rng=None):
        """Minibatch gradient: likelihood scaled by ``N / |B|``, prior unscaled."""
        theta = _as_theta(self, theta)
        if batch_indices is None:
            if rng is None:
                return self.grad_potential(theta)
            batch_indices = draw_minibatch(self.minibatch, self.n_data, rng)
        idx = np.asarray(batch_indices)
        if idx.ndim != 1 or idx.size == 0:
            raise ContractError("batch must be a non-empty 1-D index list")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ContractError("batch indices must be integers")
        if idx.min() < 0 or idx.max() >= self.n_data:
            raise ContractError("batch index out of range")
        _, grad = self._nll_sum_and_grad(theta, self.dataset.x[idx], self.dataset.y[idx])
        return (self.n_data / idx.size) * grad + 2.0 * self.prior_precision * theta

    def minibatch_grad(self, theta, rng):
        return self.stochastic_grad(theta, draw_minibatch(self.minibatch, self.n_data, rng))

    def mean_nll(self, theta, dataset: DataSet | None = None) -> float:
        """Mean per-example negative log likelihood (no prior)."""
        data = dataset or self.dataset
        if data.y is None or data.n_features != self.layers[0]:
            raise ContractError("evaluation set does not match the network input")
        nll, _ = self._nll_sum_and_grad(_as_theta(self, theta), data.x, data.y, need_grad=False)
        return nll / data.size


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def potential(model: TargetModel, theta) -> float:
    return model.potential(_as_theta(model, theta))


def grad_potential(model: TargetModel, theta) -> np.ndarray:
    return model.grad_potential(_as_theta(model, theta))


def stochastic_grad(model: TargetModel, theta, batch_indices=None, rng=None) -> np.ndarray:
    return model.stochastic_grad(_as_theta(model, theta), batch_indices, rng)


@dataclass
class GradientCheck:
    max_rel_error: float
    points: int
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-5


def check_gradient(model: TargetModel, points: int = 10, seed: int = 0, step: float = 1e-5,
                   scale: float = 1.0) -> GradientCheck:
    """Central finite differences against ``grad_potential`` at random points.

    The step for coordinate ``i`` is ``step * max(1, |theta_i|)``; the error at a
    point is ``||g_fd - g|| / max(||g||, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(points):
        theta = scale * rng.standard_normal(model.dim)
        g = model.grad_potential(theta)
        fd = np.empty(model.dim)
        for i in range(model.dim):
            h = step * max(1.0, abs(theta[i]))
            up = theta.copy()
            dn = theta.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (model.potential(up) - model.potential(dn)) / (up[i] - dn[i])
        errors.append(float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8)))
    return GradientCheck(max(errors), points, errors)
