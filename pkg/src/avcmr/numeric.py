"""Dense layers with hand-derived gradients, optimizers and a gradient checker.

Everything is float64. Matrices are plain ``numpy`` arrays, row-major,
one sample per row.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DeterminismError, DimensionError, PoisonedGradientError

NORM_EPS = 1e-12


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation, rng):
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)


def _check_input(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match layer weight shape "
            f"{layer.weight.shape} (expected (batch, {layer.in_dim}))"
        )
    return x


def dense_forward(layer, x):
    """Return ``activation(x @ W.T + b)`` for a batch ``x`` of shape (batch, in)."""
    x = _check_input(layer, x)
    z = x @ layer.weight.T + layer.bias
    if layer.activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def dense_backward(layer, cached_input, upstream_grad):
    """Backpropagate ``upstream_grad`` (d loss / d output) through ``layer``.

    Returns ``((grad_weight, grad_bias), grad_input)``. The ReLU subgradient
    at zero is taken as zero.
    """
    x = _check_input(layer, cached_input)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (x.shape[0], layer.out_dim):
        raise DimensionError(
            f"upstream gradient shape {g.shape} does not match output shape "
            f"{(x.shape[0], layer.out_dim)}"
        )
    if layer.activation is Activation.RELU:
        z = x @ layer.weight.T + layer.bias
        g = np.where(z > 0.0, g, 0.0)
    grad_w = g.T @ x
    grad_b = g.sum(axis=0)
    grad_x = g @ layer.weight
    return (grad_w, grad_b), grad_x


def l2_normalize(v, eps=NORM_EPS):
    """Scale ``v`` to unit L2 norm.

    Returns ``(vector, degenerate)``; when the norm is at most ``eps`` the
    input is returned unchanged and ``degenerate`` is True.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= eps:
        return v.copy(), True
    return v / n, False


def l2_normalize_rows(x, eps=NORM_EPS):
    """Row-wise :func:`l2_normalize`. Returns ``(normalized, degenerate_mask, norms)``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms <= eps
    safe = np.where(degenerate, 1.0, norms)
    return x / safe[:, None], degenerate, norms


def l2_normalize_rows_backward(normalized, norms, degenerate, upstream):
    """Gradient of row normalization: ``(g - u (u.g)) / |x|``; identity on degenerate rows."""
    u = normalized
    proj = np.sum(u * upstream, axis=1, keepdims=True)
    safe = np.where(degenerate, 1.0, norms)[:, None]
    grad = (upstream - u * proj) / safe
    return np.where(degenerate[:, None], upstream, grad)


@dataclass
class Optimizer:
    """SGD or Adam over a fixed list of parameter tensors, updated in place."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def reset(self):
        self.step_count = 0
        self.m = []
        self.v = []

    def step(self, params, grads, names=None):
        if len(params) != len(grads):
            raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
        names = names or [f"param[{i}]" for i in range(len(params))]
        for p, g, name in zip(params, grads, names):
            if p.shape != g.shape:
                raise DimensionError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
            if not np.all(np.isfinite(g)):
                raise PoisonedGradientError(name)

        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return params

        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
        return params


def relative_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor
    )


def finite_diff_check(network, loss_fn, input_batch, h=1e-4, value_fn=None):
    """Compare analytic gradients against central differences.

    ``network.parameters()`` must return the list of parameter arrays (mutated
    in place during the check and restored afterwards). ``loss_fn(network,
    input_batch)`` returns ``(loss, grads)`` with ``grads`` aligned to
    ``parameters()``. ``value_fn``, if given, returns the loss alone and is
    used for the perturbed evaluations. Returns the maximum relative error
    over every entry.
    """
    if value_fn is None:
        def value_fn(net, batch):
            return loss_fn(net, batch)[0]

    if not h > 0:
        raise ValueError("h must be positive")
    loss0, grads = loss_fn(network, input_batch)
    loss0_again, _ = loss_fn(network, input_batch)
    if loss0 != loss0_again:
        raise DeterminismError(
            f"loss_fn returned {loss0!r} then {loss0_again!r} for identical inputs"
        )

    worst = 0.0
    for p, g in zip(network.parameters(), grads):
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("parameter arrays must be contiguous to be perturbed in place")
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = value_fn(network, input_batch)
            flat[i] = orig - h
            lm = value_fn(network, input_batch)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, float(relative_error(gflat[i], numeric)))
    return worst
