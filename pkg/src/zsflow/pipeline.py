"""End-to-end orchestration: generator training, unseen-feature synthesis,
softmax classification, and the GZSL/ZSL evaluation protocol.

The run is two-staged. Stage one (optional) trains the contrastive pair
scorer and mines boundary samples, which are appended to the real seen
features. Stage two trains the conditional flow on the augmented set with
fresh per-batch perturbation, minimizing mean NLL plus a Gaussian parameter
prior plus the prototype-anchoring term. A linear softmax classifier over
all classes is then fit on real seen features plus synthesized unseen ones,
and accuracies are reported class-balanced.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_streams
from .augment import (
    ContrastiveNet,
    MiningConfig,
    PerturbConfig,
    mine_boundary,
    perturb,
    train_contrastive,
)
from .data import Dataset, class_prototypes
from .errors import ConfigurationError, InputDataError, TrainingDivergenceError
from .flow import (
    FlowModel,
    add_prior_gradients,
    nll_loss_grad,
    prior_penalty,
    prototype_loss_grad,
)
from .numcore import Adam, Mlp
from .semantics import RawEmbedder, RelativeEmbedder

# Hyper-parameter ranges explored in the source experiments, kept as metadata
# for sweep tooling; defaults below reflect the full-scale settings.
HYPERPARAMETER_SWEEPS = {
    "lambda_ent": [0.1, 1.0, 10.0, 20.0],
    "lambda_perturb": [0.02, 0.05, 0.15, 0.3, 0.5],
    "lambda_proto": [1.0, 3.0, 10.0, 20.0, 30.0],
    "embed_dim": [128, 256, 512, 1024, 2048],
    "n_coupling_layers": [1, 3, 5, 10, 20],
    "mining_steps": [20, 30],
}

ABLATION_VARIANTS = ("w/o constraints", "w/o EM", "w/o VP", "w/o RP")
_EXTRA_VARIANTS = ("w/o EM&VP", "w/o EM&RP")


@dataclass
class MiningSettings:
    """Mining sub-config carried inside :class:`TrainConfig`."""

    eta: float = 0.1
    steps: int = 20
    sign_mode: str = "intent"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainConfig:
    """All pipeline hyper-parameters with full-scale defaults."""

    epochs: int = 100
    batch_size: int = 256
    lr: float = 3e-4
    n_coupling_layers: int = 3
    hidden_dim: int = 2048
    embed_dim: int = 1024
    lambda_ent: float = 10.0
    lambda_perturb: float = 0.15
    lambda_proto: float = 10.0
    weight_decay: float = 1e-5
    mining: MiningSettings | None = field(default_factory=MiningSettings)
    p_drop: float = 1.0
    n_syn_per_unseen: int = 300
    seed: int = 0
    contrastive_epochs: int = 50
    contrastive_hidden: int = 256
    classifier_epochs: int = 50
    classifier_lr: float = 1e-2
    relative_positioning: bool = True
    mining_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.mining, dict):
            self.mining = MiningSettings(**self.mining)
        for name in ("batch_size", "n_coupling_layers", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in (
            "epochs",
            "lambda_ent",
            "lambda_perturb",
            "lambda_proto",
            "weight_decay",
            "n_syn_per_unseen",
            "contrastive_epochs",
            "classifier_epochs",
        ):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.lr <= 0 or self.classifier_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigurationError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if not 0.0 <= self.mining_fraction <= 1.0:
            raise ConfigurationError(
                f"mining_fraction must be in [0, 1], got {self.mining_fraction}"
            )
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset for the synthetic benchmark."""
        base = dict(
            epochs=150,
            batch_size=256,
            lr=1e-3,
            n_coupling_layers=3,
            hidden_dim=64,
            embed_dim=32,
            lambda_ent=1.0,
            lambda_perturb=0.25,
            lambda_proto=1.0,
            weight_decay=1e-5,
            mining=MiningSettings(eta=0.05, steps=10),
            contrastive_epochs=40,
            contrastive_hidden=64,
            classifier_epochs=50,
            classifier_lr=1e-2,
            n_syn_per_unseen=300,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        doc = dict(self.__dict__)
        doc["mining"] = self.mining.to_dict() if self.mining is not None else None
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config field {sorted(unknown)[0]!r}")
        if doc.get("mining") is not None:
            mdoc = doc["mining"]
            mknown = {f.name for f in dataclasses.fields(MiningSettings)}
            munknown = set(mdoc) - mknown
            if munknown:
                raise ConfigurationError(
                    f"unknown config field 'mining.{sorted(munknown)[0]}'"
                )
            doc["mining"] = MiningSettings(**mdoc)
        return cls(**doc)


@dataclass
class TrainResult:
    flow: FlowModel
    embedder: object
    contrastive: ContrastiveNet | None
    history: list[dict]
    prototypes: np.ndarray
    mined: np.ndarray | None = None


def _make_embedder(ds: Dataset, cfg: TrainConfig):
    if cfg.relative_positioning:
        return RelativeEmbedder.fit(
            ds.seen_attributes(), cfg.embed_dim, rng_streams.stream(cfg.seed, rng_streams.EMBED_INIT)
        )
    return RawEmbedder(ds.attribute_dim)


def train_pipeline(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Run both training stages and return the fitted components."""
    train_idx = ds.split["train_seen"]
    if train_idx.size == 0:
        raise InputDataError("training requires a nonempty train_seen split")
    x_train = ds.features[train_idx]
    y_train = ds.labels[train_idx]
    seen_attrs = ds.seen_attributes()
    # Labels are remapped to seen-class positions for the contrastive stage.
    seen_pos = {int(c): i for i, c in enumerate(ds.seen_classes)}
    y_pos = np.asarray([seen_pos[int(y)] for y in y_train], dtype=np.intp)

    embedder = _make_embedder(ds, cfg)
    flow = FlowModel.build(
        ds.feature_dim,
        embedder.out_dim,
        cfg.n_coupling_layers,
        cfg.hidden_dim,
        rng_streams.stream(cfg.seed, rng_streams.FLOW_INIT),
    )

    contrastive = None
    mined = None
    if cfg.mining is not None:
        contrastive = ContrastiveNet.build(
            ds.feature_dim,
            ds.attribute_dim,
            cfg.contrastive_hidden,
            rng_streams.stream(cfg.seed, rng_streams.CONTRASTIVE_INIT),
        )
        train_contrastive(
            contrastive,
            x_train,
            y_pos,
            seen_attrs,
            cfg.contrastive_epochs,
            cfg.batch_size,
            cfg.lr,
            rng_streams.stream(cfg.seed, rng_streams.CONTRASTIVE_SHUFFLE),
        )
        n_mine = int(round(cfg.mining_fraction * x_train.shape[0]))
        if n_mine > 0:
            mcfg = MiningConfig(
                eta=cfg.mining.eta,
                steps=cfg.mining.steps,
                lambda_ent=cfg.lambda_ent,
                sign_mode=cfg.mining.sign_mode,
            )
            mined = mine_boundary(
                contrastive, x_train[:n_mine], y_pos[:n_mine], seen_attrs, mcfg
            )

    if mined is not None:
        x_aug = np.vstack([x_train, mined])
        y_aug = np.concatenate([y_train, y_train[: mined.shape[0]]])
    else:
        x_aug, y_aug = x_train, y_train

    prototypes = class_prototypes(ds, train_idx)
    pcfg = PerturbConfig(cfg.lambda_perturb, cfg.p_drop)
    perturb_rng = rng_streams.stream(cfg.seed, rng_streams.PERTURB)
    shuffle_rng = rng_streams.stream(cfg.seed, rng_streams.FLOW_SHUFFLE)
    params = flow.parameters() + embedder.parameters()
    opt = Adam(params, lr=cfg.lr)
    attrs_by_label = ds.attributes

    history: list[dict] = []
    n_aug = x_aug.shape[0]
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n_aug)
        sums = {"nll": 0.0, "prior": 0.0, "proto": 0.0}
        for start in range(0, n_aug, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_aug[idx]
            if cfg.lambda_perturb > 0:
                xb = perturb(xb, pcfg, perturb_rng)
            ab = attrs_by_label[y_aug[idx]]

            flow.zero_grad()
            embedder.zero_grad()
            a_g = embedder.embed(ab)
            nll, _, g_ag = nll_loss_grad(flow, xb, a_g, accumulate=True)
            embedder.backward(g_ag, accumulate=True)
            prior = prior_penalty(flow, cfg.weight_decay)
            add_prior_gradients(flow, cfg.weight_decay)
            proto = 0.0
            if cfg.lambda_proto > 0:
                a_g_seen = embedder.embed(seen_attrs)
                proto, g_ag_seen = prototype_loss_grad(
                    flow, prototypes, a_g_seen, weight=cfg.lambda_proto, accumulate=True
                )
                embedder.backward(g_ag_seen, accumulate=True)
            total = nll + prior + cfg.lambda_proto * proto
            if not math.isfinite(total):
                raise TrainingDivergenceError(
                    f"flow training diverged at epoch {epoch}"
                )
            opt.step(flow.gradients() + embedder.gradients())
            w = len(idx)
            sums["nll"] += nll * w
            sums["prior"] += prior * w
            sums["proto"] += proto * w
        entry = {
            "epoch": epoch,
            "nll": sums["nll"] / n_aug,
            "prior": sums["prior"] / n_aug,
            "proto": sums["proto"] / n_aug,
        }
        entry["total"] = entry["nll"] + entry["prior"] + cfg.lambda_proto * entry["proto"]
        history.append(entry)

    return TrainResult(
        flow=flow,
        embedder=embedder,
        contrastive=contrastive,
        history=history,
        prototypes=prototypes,
        mined=mined,
    )


def generate_unseen(
    flow: FlowModel,
    embedder,
    attributes: np.ndarray,
    class_ids: np.ndarray,
    n_per_class: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample labeled features for each class from the prior through the flow.

    Each class draws from its own RNG stream, so the output is independent
    of class processing order.
    """
    if n_per_class < 0:
        raise ConfigurationError("n_per_class must be >= 0")
    class_ids = np.asarray(class_ids, dtype=np.intp)
    if n_per_class == 0 or class_ids.size == 0:
        return np.empty((0, flow.d_v)), np.empty(0, dtype=np.intp)
    feats, labels = [], []
    for c in class_ids:
        g = rng_streams.stream(seed, rng_streams.GENERATE_BASE + int(c))
        z = g.standard_normal((n_per_class, flow.d_v))
        a_g = embedder.embed(attributes[int(c)][None, :])
        feats.append(flow.generate(z, np.repeat(a_g, n_per_class, axis=0)))
        labels.append(np.full(n_per_class, int(c), dtype=np.intp))
    return np.vstack(feats), np.concatenate(labels)


# -- softmax classifier ------------------------------------------------------


class SoftmaxClassifier:
    """Single linear layer over all classes, trained with cross-entropy."""

    def __init__(self, net: Mlp):
        self.net = net
        self.train_history: list[float] = []

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward(np.atleast_2d(np.asarray(features, dtype=np.float64)))

    def predict(
        self, features: np.ndarray, restrict_to: np.ndarray | None = None
    ) -> np.ndarray:
        """Argmax class ids, optionally restricted to a subset of classes."""
        scores = self.logits(features)
        if restrict_to is None:
            return scores.argmax(axis=1)
        restrict_to = np.asarray(restrict_to, dtype=np.intp)
        sub = scores[:, restrict_to]
        return restrict_to[sub.argmax(axis=1)]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> SoftmaxClassifier:
    """Adam cross-entropy training of the linear classifier."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if features.shape[0] == 0:
        raise ConfigurationError("classifier training needs at least one sample")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigurationError("classifier labels out of range")
    net = Mlp.build(
        [features.shape[1], n_classes],
        ("identity",),
        rng_streams.stream(seed, rng_streams.CLASSIFIER_INIT),
    )
    opt = Adam(net.parameters(), lr=lr)
    shuffle = rng_streams.stream(seed, rng_streams.CLASSIFIER_SHUFFLE)
    n = features.shape[0]
    history = []
    for epoch in range(epochs):
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = features[idx], labels[idx]
            probs = _softmax(net.forward(xb))
            loss = -float(
                np.mean(np.log(np.clip(probs[np.arange(len(idx)), yb], 1e-300, None)))
            )
            if not math.isfinite(loss):
                raise TrainingDivergenceError(
                    f"classifier training diverged at epoch {epoch}"
                )
            grad = probs
            grad[np.arange(len(idx)), yb] -= 1.0
            net.zero_grad()
            net.backward(grad / len(idx))
            opt.step(net.gradients())
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    clf = SoftmaxClassifier(net)
    clf.train_history = history
    return clf


def train_classifier(
    real: tuple[np.ndarray, np.ndarray],
    synth: tuple[np.ndarray, np.ndarray],
    n_classes: int,
    cfg: TrainConfig,
) -> SoftmaxClassifier:
    """Fit the GZSL classifier on real seen + synthesized unseen features."""
    real_x, real_y = real
    synth_x, synth_y = synth
    if real_x.shape[0] == 0 or synth_x.shape[0] == 0:
        raise ConfigurationError(
            "classifier needs both real seen and synthesized unseen samples"
        )
    features = np.vstack([real_x, synth_x])
    labels = np.concatenate([real_y, synth_y])
    return fit_softmax(
        features,
        labels,
        n_classes,
        cfg.classifier_epochs,
        cfg.batch_size,
        cfg.classifier_lr,
        cfg.seed,
    )


# -- metrics -----------------------------------------------------------------


def per_class_accuracy(
    clf: SoftmaxClassifier,
    features: np.ndarray,
    labels: np.ndarray,
    class_set: np.ndarray,
    restrict_to: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Top-1 accuracy per class and the class-balanced mean over class_set."""
    labels = np.asarray(labels, dtype=np.intp)
    class_set = np.asarray(class_set, dtype=np.intp)
    preds = clf.predict(features, restrict_to=restrict_to)
    accs = np.empty(class_set.shape[0])
    for i, c in enumerate(class_set):
        mask = labels == c
        if not mask.any():
            raise InputDataError(f"class {int(c)} has no test samples")
        accs[i] = float(np.mean(preds[mask] == c))
    return accs, float(accs.mean())


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    """2*s*u/(s+u), defined as 0 when both accuracies are 0."""
    for v in (acc_s, acc_u):
        if not 0.0 <= v <= 1.0:
            raise ConfigurationError(f"accuracy {v} outside [0, 1]")
    if acc_s + acc_u == 0.0:
        return 0.0
    return 2.0 * acc_s * acc_u / (acc_s + acc_u)


@dataclass
class EvalReport:
    """Headline metrics plus the per-class accuracy table."""

    zsl_t1: float
    per_class: list[tuple[int, float]]
    config_echo: dict
    seed: int
    acc_seen: float | None = None
    acc_unseen: float | None = None
    harmonic_mean: float | None = None

    def __post_init__(self):
        for v in (self.zsl_t1, self.acc_seen, self.acc_unseen, self.harmonic_mean):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"accuracy {v} outside [0, 1]")

    def to_json_dict(self) -> dict:
        doc = {
            "zsl_t1": self.zsl_t1,
            "per_class": [
                {"class_id": int(c), "accuracy": float(a)} for c, a in self.per_class
            ],
            "config_echo": self.config_echo,
            "seed": self.seed,
        }
        if self.acc_seen is not None:
            doc["acc_seen"] = self.acc_seen
        if self.acc_unseen is not None:
            doc["acc_unseen"] = self.acc_unseen
        if self.harmonic_mean is not None:
            doc["harmonic_mean"] = self.harmonic_mean
        return doc


def _evaluate(ds: Dataset, cfg: TrainConfig, result: TrainResult) -> EvalReport:
    synth = generate_unseen(
        result.flow,
        result.embedder,
        ds.attributes,
        ds.unseen_classes,
        cfg.n_syn_per_unseen,
        cfg.seed,
    )
    train_idx = ds.split["train_seen"]
    real = (ds.features[train_idx], ds.labels[train_idx])
    if synth[0].shape[0] > 0:
        clf = train_classifier(real, synth, ds.n_classes, cfg)
    else:
        # Seen-only baseline: no synthesized material for unseen classes.
        clf = fit_softmax(
            real[0],
            real[1],
            ds.n_classes,
            cfg.classifier_epochs,
            cfg.batch_size,
            cfg.classifier_lr,
            cfg.seed,
        )

    seen_idx = ds.split["test_seen"]
    unseen_idx = ds.split["test_unseen"]
    seen_accs, acc_seen = per_class_accuracy(
        clf, ds.features[seen_idx], ds.labels[seen_idx], ds.seen_classes
    )
    unseen_accs, acc_unseen = per_class_accuracy(
        clf, ds.features[unseen_idx], ds.labels[unseen_idx], ds.unseen_classes
    )
    _, t1 = per_class_accuracy(
        clf,
        ds.features[unseen_idx],
        ds.labels[unseen_idx],
        ds.unseen_classes,
        restrict_to=ds.unseen_classes,
    )
    per_class = [(int(c), float(a)) for c, a in zip(ds.seen_classes, seen_accs)]
    per_class += [(int(c), float(a)) for c, a in zip(ds.unseen_classes, unseen_accs)]
    return EvalReport(
        zsl_t1=t1,
        per_class=per_class,
        config_echo=cfg.to_dict(),
        seed=cfg.seed,
        acc_seen=acc_seen,
        acc_unseen=acc_unseen,
        harmonic_mean=harmonic_mean(acc_seen, acc_unseen),
    )


def run_gzsl(ds: Dataset, cfg: TrainConfig) -> EvalReport:
    """Train everything and evaluate over seen ∪ unseen test samples."""
    result = train_pipeline(ds, cfg)
    return _evaluate(ds, cfg, result)


def run_zsl(ds: Dataset, cfg: TrainConfig) -> EvalReport:
    """Conventional zero-shot evaluation: unseen test samples, restricted argmax."""
    report = run_gzsl(ds, cfg)
    unseen = set(int(c) for c in ds.unseen_classes)
    return EvalReport(
        zsl_t1=report.zsl_t1,
        per_class=[(c, a) for c, a in report.per_class if c in unseen],
        config_echo=report.config_echo,
        seed=report.seed,
    )


def ablation_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Return a copy of ``cfg`` with the named component(s) disabled."""
    if variant == "full":
        return dataclasses.replace(cfg)
    changes: dict = {}
    if variant == "w/o EM":
        changes = {"mining": None}
    elif variant == "w/o VP":
        changes = {"lambda_perturb": 0.0}
    elif variant == "w/o RP":
        changes = {"relative_positioning": False}
    elif variant == "w/o EM&VP":
        changes = {"mining": None, "lambda_perturb": 0.0}
    elif variant == "w/o EM&RP":
        changes = {"mining": None, "relative_positioning": False}
    elif variant == "w/o constraints":
        changes = {
            "mining": None,
            "lambda_perturb": 0.0,
            "relative_positioning": False,
            "lambda_proto": 0.0,
        }
    else:
        raise ConfigurationError(f"unknown ablation variant {variant!r}")
    return dataclasses.replace(cfg, **changes)


def run_ablation(ds: Dataset, cfg: TrainConfig) -> dict[str, EvalReport]:
    """The full pipeline plus each ablation variant, keyed by variant name."""
    reports = {"full": run_gzsl(ds, cfg)}
    for variant in ABLATION_VARIANTS:
        reports[variant] = run_gzsl(ds, ablation_config(cfg, variant))
    return reports
