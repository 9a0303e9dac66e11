"""Visual-space enrichment: boundary-sample mining and feature perturbation.

A contrastive net scores visual-attribute pairs; freezing it and taking
gradient steps on the inputs pushes training samples toward inter-class
decision boundaries. Additive masked Gaussian noise further diversifies the
features the generative flow is trained on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, MiningError, TrainingDivergenceError
from .flow import net_doc, net_from_doc
from .numcore import Adam, Mlp

SIGN_MODES = ("intent", "paper_literal")

SCORE_FLOOR = 1e-12


@dataclass
class MiningConfig:
    """Boundary-mining settings: step size, step count, entropy weight."""

    eta: float
    steps: int
    lambda_ent: float = 1.0
    sign_mode: str = "intent"

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigurationError(f"mining step size must be > 0, got {self.eta}")
        if self.steps < 1:
            raise ConfigurationError(f"mining needs at least 1 step, got {self.steps}")
        if self.lambda_ent < 0:
            raise ConfigurationError(f"entropy weight must be >= 0, got {self.lambda_ent}")
        if self.sign_mode not in SIGN_MODES:
            raise ConfigurationError(
                f"sign_mode must be one of {SIGN_MODES}, got {self.sign_mode!r}"
            )


@dataclass
class PerturbConfig:
    """Additive-noise settings; p_drop is the keep probability per dimension."""

    lambda_perturb: float
    p_drop: float = 1.0

    def __post_init__(self):
        if self.lambda_perturb < 0:
            raise ConfigurationError(
                f"perturbation coefficient must be >= 0, got {self.lambda_perturb}"
            )
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigurationError(f"p_drop must be in [0, 1], got {self.p_drop}")


class ContrastiveNet:
    """Scores a visual-attribute pair with a matching probability in (0, 1)."""

    def __init__(self, net: Mlp, d_v: int, d_a: int):
        if net.in_dim != d_v + d_a or net.out_dim != 1:
            raise ConfigurationError(
                f"contrastive net maps {net.in_dim}->{net.out_dim}, "
                f"expected {d_v + d_a}->1"
            )
        if net.layers[-1].activation != "sigmoid":
            raise ConfigurationError("contrastive net must end in a sigmoid")
        self.net = net
        self.d_v = d_v
        self.d_a = d_a

    @classmethod
    def build(
        cls, d_v: int, d_a: int, hidden_dim: int, rng: np.random.Generator
    ) -> "ContrastiveNet":
        net = Mlp.build([d_v + d_a, hidden_dim, 1], ("relu", "sigmoid"), rng)
        return cls(net, d_v, d_a)

    def to_doc(self) -> dict:
        return {"d_v": self.d_v, "d_a": self.d_a, "net": net_doc(self.net)}

    @classmethod
    def from_doc(cls, doc: dict) -> "ContrastiveNet":
        net = net_from_doc(doc["net"], hidden_activation="relu", final_activation="sigmoid")
        return cls(net, doc["d_v"], doc["d_a"])


def _pair_matrix(x: np.ndarray, attributes: np.ndarray) -> np.ndarray:
    """Stack every (sample, class-attribute) pair, sample-major."""
    n, c = x.shape[0], attributes.shape[0]
    xs = np.repeat(x, c, axis=0)
    ats = np.tile(attributes, (n, 1))
    return np.concatenate([xs, ats], axis=1)


def contrastive_scores(
    cn: ContrastiveNet, x: np.ndarray, seen_attributes: np.ndarray
) -> np.ndarray:
    """Matching probabilities, one row per sample, one column per seen class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    attrs = np.asarray(seen_attributes, dtype=np.float64)
    out = cn.net.forward(_pair_matrix(x, attrs))
    return out.reshape(x.shape[0], attrs.shape[0])


def contrastive_loss(scores: np.ndarray, true_class: int | np.ndarray) -> np.ndarray:
    """Squared error between the score vector and the one-hot label.

    Accepts a single score row or a batch; returns a scalar or a per-row
    vector accordingly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    rows = np.atleast_2d(scores)
    labels = np.atleast_1d(np.asarray(true_class, dtype=np.intp))
    if labels.shape[0] == 1 and rows.shape[0] > 1:
        labels = np.full(rows.shape[0], labels[0], dtype=np.intp)
    if np.any(labels < 0) or np.any(labels >= rows.shape[1]):
        raise ConfigurationError("true_class index out of range")
    onehot = np.zeros_like(rows)
    onehot[np.arange(rows.shape[0]), labels] = 1.0
    loss = ((rows - onehot) ** 2).sum(axis=1)
    return float(loss[0]) if single else loss


def prediction_entropy(scores: np.ndarray) -> np.ndarray:
    """sum_i p_i * log p_i of a score vector (batch rows supported).

    Note this quantity is the negative of Shannon entropy; the mining update
    handles the sign. Scores at exactly 0 or 1 are clamped away from the
    singularity.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    p = np.clip(np.atleast_2d(scores), SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    h = (p * np.log(p)).sum(axis=1)
    return float(h[0]) if single else h


def shannon_entropy(scores: np.ndarray) -> np.ndarray:
    """-sum_i p_i log p_i; the conventional uncertainty measure."""
    return -prediction_entropy(scores)


def train_contrastive(
    cn: ContrastiveNet,
    features: np.ndarray,
    labels: np.ndarray,
    seen_attributes: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> list[float]:
    """Adam-minimize the mean pair loss; returns the per-epoch loss history."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    attrs = np.asarray(seen_attributes, dtype=np.float64)
    if features.shape[0] == 0:
        raise ConfigurationError("contrastive training needs a nonempty seen set")
    n, c = features.shape[0], attrs.shape[0]
    opt = Adam(cn.net.parameters(), lr=lr)
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = features[idx], labels[idx]
            scores = contrastive_scores(cn, xb, attrs)
            onehot = np.zeros_like(scores)
            onehot[np.arange(len(idx)), yb] = 1.0
            loss = float(((scores - onehot) ** 2).sum(axis=1).mean())
            if not math.isfinite(loss):
                raise TrainingDivergenceError(
                    f"contrastive loss diverged at epoch {epoch}"
                )
            g_scores = 2.0 * (scores - onehot) / len(idx)
            cn.net.zero_grad()
            cn.net.backward(g_scores.reshape(-1, 1))
            opt.step(cn.net.gradients())
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    return history


def mining_gradient(
    cn: ContrastiveNet,
    x: np.ndarray,
    labels: np.ndarray,
    seen_attributes: np.ndarray,
    lambda_ent: float,
    entropy_sign: float,
) -> np.ndarray:
    """d/dx of [loss + entropy_sign * lambda_ent * sum p log p], per sample."""
    attrs = np.asarray(seen_attributes, dtype=np.float64)
    n, c = x.shape[0], attrs.shape[0]
    scores = contrastive_scores(cn, x, attrs)
    onehot = np.zeros_like(scores)
    onehot[np.arange(n), labels] = 1.0
    g_scores = 2.0 * (scores - onehot)
    if lambda_ent > 0:
        p = np.clip(scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
        g_scores = g_scores + entropy_sign * lambda_ent * (np.log(p) + 1.0)
    g_pairs = cn.net.backward(g_scores.reshape(-1, 1))
    return g_pairs.reshape(n, c, -1)[:, :, : cn.d_v].sum(axis=1)


def mine_boundary(
    cn: ContrastiveNet,
    x: np.ndarray,
    labels: np.ndarray,
    seen_attributes: np.ndarray,
    mcfg: MiningConfig,
) -> np.ndarray:
    """Push samples toward decision boundaries with the net's weights frozen.

    ``intent`` mode descends (loss + lambda_ent * p·log p), which lowers the
    pair loss while raising Shannon entropy. ``paper_literal`` mode ascends
    (loss - lambda_ent * p·log p) instead, the update exactly as printed in
    the source formulation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape[0] != x.shape[0]:
        raise ConfigurationError("labels must align with samples")
    for step in range(mcfg.steps):
        if mcfg.sign_mode == "intent":
            grad = mining_gradient(cn, x, labels, seen_attributes, mcfg.lambda_ent, +1.0)
            x -= mcfg.eta * grad
        else:
            grad = mining_gradient(cn, x, labels, seen_attributes, mcfg.lambda_ent, -1.0)
            x += mcfg.eta * grad
        if not np.all(np.isfinite(x)):
            raise MiningError(f"mined samples became non-finite at step {step}")
    return x


def perturb(
    x: np.ndarray, pcfg: PerturbConfig, rng: np.random.Generator
) -> np.ndarray:
    """Add masked Gaussian noise: x + lambda * (e ⊙ m), m_j ~ Bernoulli(p_drop)."""
    x = np.asarray(x, dtype=np.float64)
    if pcfg.lambda_perturb == 0.0:
        return x.copy()
    noise = rng.standard_normal(x.shape)
    if pcfg.p_drop >= 1.0:
        mask = 1.0
    elif pcfg.p_drop <= 0.0:
        mask = 0.0
    else:
        mask = (rng.random(x.shape) < pcfg.p_drop).astype(np.float64)
    return x + pcfg.lambda_perturb * noise * mask
