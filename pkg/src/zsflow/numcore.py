"""Dense numerical kernel: small fully connected networks with analytic
forward/backward passes, per-network gradient buffers, and Adam.

All arrays are float64. A network is mutated by at most one trainer at a
time; once training is done it can be shared read-only across threads.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, StateError

LEAKY_SLOPE = 0.01

ACTIVATIONS = ("identity", "relu", "leaky_relu", "sigmoid")


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        # Split by sign to avoid overflow in exp.
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ConfigurationError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its pre-activation ``z``."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ConfigurationError(f"unknown activation {name!r}")


class Layer:
    """One dense layer: ``y = act(x @ w + b)``."""

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str = "identity"):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.ndim != 2:
            raise ConfigurationError(f"weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[1],):
            raise ConfigurationError(
                f"bias shape {b.shape} does not match weight output dim {w.shape[1]}"
            )
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.w = w
        self.b = b
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]


class GradTape:
    """Gradient buffers mirroring one Mlp's parameters.

    ``gw``/``gb`` accumulate parameter gradients across backward calls when
    accumulation is requested; ``gx`` always holds the input gradient of the
    most recent backward pass.
    """

    def __init__(self, net: "Mlp"):
        self.gw = [np.zeros_like(layer.w) for layer in net.layers]
        self.gb = [np.zeros_like(layer.b) for layer in net.layers]
        self.gx: np.ndarray | None = None

    def zero(self) -> None:
        for g in self.gw:
            g[...] = 0.0
        for g in self.gb:
            g[...] = 0.0
        self.gx = None


class Mlp:
    """A fixed stack of dense layers with cached-forward analytic backward."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ConfigurationError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.layers = layers
        self.tape = GradTape(self)
        self._cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
    ) -> "Mlp":
        """Create a net with weights and biases uniform in +-1/sqrt(fan_in)."""
        if len(activations) != len(dims) - 1:
            raise ConfigurationError(
                f"need {len(dims) - 1} activations for dims {list(dims)}, got {len(activations)}"
            )
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the net on a batch (rows are samples), caching for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input shape {x.shape} incompatible with first-layer dim {self.in_dim}"
            )
        cache = []
        out = x
        for layer in self.layers:
            z = out @ layer.w + layer.b
            a = _act_forward(layer.activation, z)
            cache.append((out, z, a))
            out = a
        self._cache = cache
        return out

    def backward(self, grad_out: np.ndarray, accumulate: bool = False) -> np.ndarray:
        """Backpropagate ``d loss / d output`` through the cached forward.

        Parameter gradients land in ``self.tape`` (added when ``accumulate``,
        overwritten otherwise); the input gradient is returned and kept in
        ``tape.gx``.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != self._cache[-1][2].shape:
            raise ConfigurationError(
                f"upstream gradient shape {grad.shape} does not match output "
                f"shape {self._cache[-1][2].shape}"
            )
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x_in, z, a = self._cache[i]
            g_pre = grad * _act_grad(layer.activation, z, a)
            gw = x_in.T @ g_pre
            gb = g_pre.sum(axis=0)
            if accumulate:
                self.tape.gw[i] += gw
                self.tape.gb[i] += gb
            else:
                self.tape.gw[i] = gw
                self.tape.gb[i] = gb
            grad = g_pre @ layer.w.T
        self.tape.gx = grad
        return grad

    def zero_grad(self) -> None:
        self.tape.zero()

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.tape.gw, self.tape.gb):
            out.append(gw)
            out.append(gb)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(
        self,
        params: Iterable[np.ndarray],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigurationError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ConfigurationError(
                    f"gradient shape {g.shape} does not mirror parameter shape {p.shape}"
                )
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def parameter_hash(params: Iterable[np.ndarray]) -> str:
    """SHA-256 over the raw bytes of a parameter list, in order."""
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()
