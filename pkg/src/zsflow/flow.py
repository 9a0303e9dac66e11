"""Conditional generative flow built from affine coupling layers.

Each layer splits its input into two halves and applies an invertible
scale-and-shift to each half in turn, where the scale and shift come from
small nets fed with the other half concatenated with the per-class condition
vector. The log-determinant of the Jacobian is the sum of the (clamped)
scale-net outputs, so exact maximum-likelihood training is tractable, and
the algebraic inverse gives the generator for free.
"""

from __future__ import annotations

import json
import math
import os
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError
from .numcore import Mlp

LOG_2PI = math.log(2.0 * math.pi)

FORMAT_VERSION = 1

DEFAULT_S_CAP = 5.0


def soft_clamp(s: np.ndarray, cap: float) -> np.ndarray:
    """Bound raw scale outputs to (-cap, cap) before exponentiation.

    Identity-like near zero (unit slope), saturating smoothly at +-cap, so a
    freshly initialized layer stays well-conditioned and exp never overflows.
    The log-determinant is computed from the clamped value, so exactness of
    the density is unaffected.
    """
    return cap * np.tanh(s / cap)


def soft_clamp_grad(s: np.ndarray, cap: float) -> np.ndarray:
    t = np.tanh(s / cap)
    return 1.0 - t * t


def _check_scale(s: np.ndarray, layer_name: str) -> None:
    if not np.all(np.isfinite(s)) or np.abs(s).max(initial=0.0) > 80.0:
        raise TrainingDivergenceError(
            f"scale output diverged in layer {layer_name} (non-finite or |s| > 80)"
        )


class CouplingLayer:
    """One conditional affine coupling transform.

    The first ceil(d_v/2) coordinates form half 1, the rest half 2. Nets
    ``s1``/``t1`` map [half2, condition] to half 1, ``s2``/``t2`` map
    [half1, condition] to half 2.
    """

    def __init__(
        self,
        s1: Mlp,
        s2: Mlp,
        t1: Mlp,
        t2: Mlp,
        d_v: int,
        d_g: int,
        s_cap: float = DEFAULT_S_CAP,
        name: str = "coupling",
    ):
        h1 = (d_v + 1) // 2
        h2 = d_v - h1
        if d_v < 2:
            raise ConfigurationError("coupling layers need at least 2 feature dims")
        for net, in_dim, out_dim, label in (
            (s1, h2 + d_g, h1, "s1"),
            (t1, h2 + d_g, h1, "t1"),
            (s2, h1 + d_g, h2, "s2"),
            (t2, h1 + d_g, h2, "t2"),
        ):
            if net.in_dim != in_dim or net.out_dim != out_dim:
                raise ConfigurationError(
                    f"{label} net maps {net.in_dim}->{net.out_dim}, "
                    f"expected {in_dim}->{out_dim}"
                )
        self.s1, self.s2, self.t1, self.t2 = s1, s2, t1, t2
        self.d_v = d_v
        self.d_g = d_g
        self.h1 = h1
        self.h2 = h2
        self.s_cap = float(s_cap)
        self.name = name
        self._fwd = None
        self._inv = None

    @classmethod
    def build(
        cls,
        d_v: int,
        d_g: int,
        hidden_dim: int,
        rng: np.random.Generator,
        s_cap: float = DEFAULT_S_CAP,
        name: str = "coupling",
    ) -> "CouplingLayer":
        h1 = (d_v + 1) // 2
        h2 = d_v - h1
        acts = ("leaky_relu", "identity")
        s1 = Mlp.build([h2 + d_g, hidden_dim, h1], acts, rng)
        t1 = Mlp.build([h2 + d_g, hidden_dim, h1], acts, rng)
        s2 = Mlp.build([h1 + d_g, hidden_dim, h2], acts, rng)
        t2 = Mlp.build([h1 + d_g, hidden_dim, h2], acts, rng)
        return cls(s1, s2, t1, t2, d_v, d_g, s_cap=s_cap, name=name)

    def nets(self) -> tuple[Mlp, Mlp, Mlp, Mlp]:
        return (self.s1, self.s2, self.t1, self.t2)

    def _check_inputs(self, u: np.ndarray, a: np.ndarray) -> None:
        if u.ndim != 2 or u.shape[1] != self.d_v:
            raise ConfigurationError(
                f"layer {self.name}: input has shape {u.shape}, expected (*, {self.d_v})"
            )
        if a.ndim != 2 or a.shape[1] != self.d_g:
            raise ConfigurationError(
                f"layer {self.name}: condition has shape {a.shape}, expected (*, {self.d_g})"
            )
        if u.shape[0] != a.shape[0]:
            raise ConfigurationError(
                f"layer {self.name}: {u.shape[0]} inputs but {a.shape[0]} condition rows"
            )

    def forward(self, u: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (v, per-row logdet) and cache intermediates for backward."""
        u = np.asarray(u, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        self._check_inputs(u, a)
        u1, u2 = u[:, : self.h1], u[:, self.h1 :]

        c1 = np.concatenate([u2, a], axis=1)
        s1_raw = self.s1.forward(c1)
        s1 = soft_clamp(s1_raw, self.s_cap)
        _check_scale(s1, self.name)
        e1 = np.exp(s1)
        v1 = u1 * e1 + self.t1.forward(c1)

        c2 = np.concatenate([v1, a], axis=1)
        s2_raw = self.s2.forward(c2)
        s2 = soft_clamp(s2_raw, self.s_cap)
        _check_scale(s2, self.name)
        e2 = np.exp(s2)
        v2 = u2 * e2 + self.t2.forward(c2)

        logdet = s1.sum(axis=1) + s2.sum(axis=1)
        self._fwd = (u1, u2, s1_raw, e1, s2_raw, e2)
        return np.concatenate([v1, v2], axis=1), logdet

    def inverse(self, v: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Exact algebraic inverse of :meth:`forward`; caches for backward."""
        v = np.asarray(v, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        self._check_inputs(v, a)
        v1, v2 = v[:, : self.h1], v[:, self.h1 :]

        c2 = np.concatenate([v1, a], axis=1)
        s2_raw = self.s2.forward(c2)
        s2 = soft_clamp(s2_raw, self.s_cap)
        _check_scale(s2, self.name)
        e2n = np.exp(-s2)
        u2 = (v2 - self.t2.forward(c2)) * e2n

        c1 = np.concatenate([u2, a], axis=1)
        s1_raw = self.s1.forward(c1)
        s1 = soft_clamp(s1_raw, self.s_cap)
        _check_scale(s1, self.name)
        e1n = np.exp(-s1)
        u1 = (v1 - self.t1.forward(c1)) * e1n

        self._inv = (v1, u1, u2, s1_raw, e1n, s2_raw, e2n)
        return np.concatenate([u1, u2], axis=1)

    def backward(
        self,
        g_v: np.ndarray,
        g_logdet: np.ndarray,
        accumulate: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop through the cached forward pass.

        ``g_v`` is d(loss)/d(output), ``g_logdet`` d(loss)/d(logdet) per row.
        Returns (d(loss)/d(input), d(loss)/d(condition)); parameter gradients
        land in the four nets' tapes.
        """
        if self._fwd is None:
            raise ConfigurationError(f"layer {self.name}: backward before forward")
        u1, u2, s1_raw, e1, s2_raw, e2 = self._fwd
        g_v1 = np.array(g_v[:, : self.h1], dtype=np.float64)
        g_v2 = g_v[:, self.h1 :]
        g_ld = np.asarray(g_logdet, dtype=np.float64)[:, None]

        g_s2 = g_v2 * u2 * e2 + g_ld
        g_c2 = self.s2.backward(g_s2 * soft_clamp_grad(s2_raw, self.s_cap), accumulate)
        g_c2 = g_c2 + self.t2.backward(g_v2, accumulate)
        g_u2 = g_v2 * e2
        g_v1 += g_c2[:, : self.h1]
        g_a = np.array(g_c2[:, self.h1 :])

        g_s1 = g_v1 * u1 * e1 + g_ld
        g_c1 = self.s1.backward(g_s1 * soft_clamp_grad(s1_raw, self.s_cap), accumulate)
        g_c1 = g_c1 + self.t1.backward(g_v1, accumulate)
        g_u1 = g_v1 * e1
        g_u2 = g_u2 + g_c1[:, : self.h2]
        g_a += g_c1[:, self.h2 :]

        return np.concatenate([g_u1, g_u2], axis=1), g_a

    def backward_inverse(
        self, g_u: np.ndarray, accumulate: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop through the cached inverse pass.

        ``g_u`` is d(loss)/d(inverse output). Returns
        (d(loss)/d(v), d(loss)/d(condition)).
        """
        if self._inv is None:
            raise ConfigurationError(f"layer {self.name}: backward before inverse")
        v1, u1, u2, s1_raw, e1n, s2_raw, e2n = self._inv
        g_u1 = g_u[:, : self.h1]
        g_u2 = np.array(g_u[:, self.h1 :], dtype=np.float64)

        g_s1 = -g_u1 * u1
        g_c1 = self.s1.backward(g_s1 * soft_clamp_grad(s1_raw, self.s_cap), accumulate)
        g_c1 = g_c1 + self.t1.backward(-g_u1 * e1n, accumulate)
        g_v1 = g_u1 * e1n
        g_u2 += g_c1[:, : self.h2]
        g_a = np.array(g_c1[:, self.h2 :])

        g_s2 = -g_u2 * u2
        g_c2 = self.s2.backward(g_s2 * soft_clamp_grad(s2_raw, self.s_cap), accumulate)
        g_c2 = g_c2 + self.t2.backward(-g_u2 * e2n, accumulate)
        g_v2 = g_u2 * e2n
        g_v1 = g_v1 + g_c2[:, : self.h1]
        g_a += g_c2[:, self.h1 :]

        return np.concatenate([g_v1, g_v2], axis=1), g_a


class FlowModel:
    """Composition of coupling layers with a standard normal prior."""

    def __init__(self, layers: Sequence[CouplingLayer], hidden_dim: int | None = None):
        layers = list(layers)
        if not layers:
            raise ConfigurationError("flow needs at least one coupling layer")
        d_v, d_g = layers[0].d_v, layers[0].d_g
        for layer in layers:
            if layer.d_v != d_v or layer.d_g != d_g:
                raise ConfigurationError("all coupling layers must share d_v and d_g")
        self.layers = layers
        self.d_v = d_v
        self.d_g = d_g
        self.s_cap = layers[0].s_cap
        self.hidden_dim = (
            hidden_dim if hidden_dim is not None else layers[0].s1.layers[0].out_dim
        )

    @classmethod
    def build(
        cls,
        d_v: int,
        d_g: int,
        n_layers: int,
        hidden_dim: int,
        rng: np.random.Generator,
        s_cap: float = DEFAULT_S_CAP,
    ) -> "FlowModel":
        if n_layers < 1:
            raise ConfigurationError("need at least one coupling layer")
        layers = [
            CouplingLayer.build(d_v, d_g, hidden_dim, rng, s_cap=s_cap, name=f"coupling{i}")
            for i in range(n_layers)
        ]
        return cls(layers, hidden_dim=hidden_dim)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, x: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map features to latents; returns (z, per-row total logdet)."""
        out = np.asarray(x, dtype=np.float64)
        total = np.zeros(out.shape[0], dtype=np.float64)
        for layer in self.layers:
            out, ld = layer.forward(out, a)
            total += ld
        return out, total

    def generate(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Map latents back to feature space (layers inverted in reverse order)."""
        out = np.asarray(z, dtype=np.float64)
        for layer in reversed(self.layers):
            out = layer.inverse(out, a)
        return out

    def backward(
        self,
        g_z: np.ndarray,
        g_logdet: np.ndarray,
        accumulate: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop through the most recent :meth:`forward`."""
        grad = g_z
        g_a_total = None
        for layer in reversed(self.layers):
            grad, g_a = layer.backward(grad, g_logdet, accumulate)
            g_a_total = g_a if g_a_total is None else g_a_total + g_a
        return grad, g_a_total

    def backward_generate(
        self, g_x: np.ndarray, accumulate: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop through the most recent :meth:`generate`."""
        grad = g_x
        g_a_total = None
        for layer in self.layers:
            grad, g_a = layer.backward_inverse(grad, accumulate)
            g_a_total = g_a if g_a_total is None else g_a_total + g_a
        return grad, g_a_total

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for net in layer.nets():
                out.extend(net.parameters())
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for net in layer.nets():
                out.extend(net.gradients())
        return out

    def zero_grad(self) -> None:
        for layer in self.layers:
            for net in layer.nets():
                net.zero_grad()

    # -- persistence ------------------------------------------------------

    def to_doc(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "d_v": self.d_v,
            "d_g": self.d_g,
            "L": self.n_layers,
            "hidden_dim": self.hidden_dim,
            "s_cap": self.s_cap,
            "layers": [
                {
                    "s1": net_doc(layer.s1),
                    "s2": net_doc(layer.s2),
                    "t1": net_doc(layer.t1),
                    "t2": net_doc(layer.t2),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FlowModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported flow format_version {doc.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}"
            )
        d_v, d_g, s_cap = doc["d_v"], doc["d_g"], doc["s_cap"]
        layers = []
        for i, entry in enumerate(doc["layers"]):
            nets = {
                key: net_from_doc(entry[key], hidden_activation="leaky_relu")
                for key in ("s1", "s2", "t1", "t2")
            }
            layers.append(
                CouplingLayer(
                    nets["s1"], nets["s2"], nets["t1"], nets["t2"],
                    d_v, d_g, s_cap=s_cap, name=f"coupling{i}",
                )
            )
        model = cls(layers, hidden_dim=doc.get("hidden_dim"))
        if model.n_layers != doc["L"]:
            raise ConfigurationError("layer count does not match the L field")
        return model

    def save(self, path: str) -> None:
        write_json(path, self.to_doc())

    @classmethod
    def load(cls, path: str) -> "FlowModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def net_doc(net: Mlp) -> dict:
    return {
        "weights": [layer.w.tolist() for layer in net.layers],
        "biases": [layer.b.tolist() for layer in net.layers],
    }


def net_from_doc(doc: dict, hidden_activation: str, final_activation: str = "identity") -> Mlp:
    from .numcore import Layer

    weights, biases = doc["weights"], doc["biases"]
    n = len(weights)
    layers = []
    for i, (w, b) in enumerate(zip(weights, biases)):
        act = final_activation if i == n - 1 else hidden_activation
        layers.append(Layer(np.asarray(w), np.asarray(b), act))
    return Mlp(layers)


def write_json(path: str, doc: dict) -> None:
    """Write a JSON document atomically with round-trip float encoding."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


# -- losses ---------------------------------------------------------------


def log_density(model: FlowModel, x: np.ndarray, a_g: np.ndarray) -> np.ndarray:
    """Per-row log density of x under the flow with a standard normal prior."""
    z, logdet = model.forward(x, a_g)
    return -0.5 * (z * z).sum(axis=1) - 0.5 * model.d_v * LOG_2PI + logdet


def nll_loss(model: FlowModel, x: np.ndarray, a_g: np.ndarray) -> float:
    """Mean negative log-likelihood of a batch."""
    if x.shape[0] == 0:
        raise ConfigurationError("nll_loss needs a nonempty batch")
    value = float(-np.mean(log_density(model, x, a_g)))
    if not math.isfinite(value):
        raise TrainingDivergenceError("negative log-likelihood is not finite")
    return value


def nll_loss_grad(
    model: FlowModel, x: np.ndarray, a_g: np.ndarray, accumulate: bool = False
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL plus its gradients w.r.t. the inputs and the condition.

    Parameter gradients are written into the coupling nets' tapes.
    """
    if x.shape[0] == 0:
        raise ConfigurationError("nll_loss_grad needs a nonempty batch")
    n = x.shape[0]
    z, logdet = model.forward(x, a_g)
    value = float(
        np.mean(0.5 * (z * z).sum(axis=1) + 0.5 * model.d_v * LOG_2PI - logdet)
    )
    if not math.isfinite(value):
        raise TrainingDivergenceError("negative log-likelihood is not finite")
    g_z = z / n
    g_logdet = np.full(n, -1.0 / n)
    g_x, g_a = model.backward(g_z, g_logdet, accumulate)
    return value, g_x, g_a


def prior_penalty(model: FlowModel, weight_decay: float) -> float:
    """Gaussian prior on the flow parameters: weight_decay * 0.5 * sum(theta^2)."""
    if weight_decay < 0:
        raise ConfigurationError("weight_decay must be >= 0")
    if weight_decay == 0:
        return 0.0
    return float(weight_decay * 0.5 * sum(float((p * p).sum()) for p in model.parameters()))


def add_prior_gradients(model: FlowModel, weight_decay: float) -> None:
    """Accumulate d(prior_penalty)/d(theta) = weight_decay * theta into the tapes."""
    if weight_decay == 0:
        return
    for p, g in zip(model.parameters(), model.gradients()):
        g += weight_decay * p


def prototype_loss(
    model: FlowModel, prototypes: np.ndarray, a_g_seen: np.ndarray
) -> float:
    """Mean squared distance between f^-1(0, a_g_c) and each class prototype."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.shape[0] != a_g_seen.shape[0]:
        raise ConfigurationError("prototypes and conditions must align class-wise")
    zeros = np.zeros_like(prototypes)
    xbar = model.generate(zeros, a_g_seen)
    return float(np.mean(((xbar - prototypes) ** 2).sum(axis=1)))


def prototype_loss_grad(
    model: FlowModel,
    prototypes: np.ndarray,
    a_g_seen: np.ndarray,
    weight: float = 1.0,
    accumulate: bool = False,
) -> tuple[float, np.ndarray]:
    """Prototype loss plus its gradient w.r.t. the condition rows.

    Parameter gradients (scaled by ``weight``) accumulate in the nets' tapes.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.shape[0] != a_g_seen.shape[0]:
        raise ConfigurationError("prototypes and conditions must align class-wise")
    n_classes = prototypes.shape[0]
    zeros = np.zeros_like(prototypes)
    xbar = model.generate(zeros, a_g_seen)
    loss = float(np.mean(((xbar - prototypes) ** 2).sum(axis=1)))
    g_x = weight * 2.0 * (xbar - prototypes) / n_classes
    _, g_a = model.backward_generate(g_x, accumulate)
    return loss, g_a
