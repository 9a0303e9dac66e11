"""Dataset model, deterministic synthetic benchmark generation, and file I/O.

A dataset bundles a visual feature matrix, integer class labels, per-class
attribute vectors, the seen/unseen class partition, and train/test splits.
The synthetic generator links attributes to features through a shared random
linear map so that attribute-conditioned generation of unseen classes is
actually learnable, which is the premise the whole pipeline rests on.

On-disk layout (see README for the full grammar):
  features.csv    header ``label,f0,...,f{d_v-1}``; shortest round-trip floats
  attributes.csv  header ``class_id,a0,...,a{d_a-1}``; one row per class
  split.json      {"seen": [...], "unseen": [...], "train_seen": [...],
                   "test_seen": [...], "test_unseen": [...]}
  *.zsf1          optional binary features: magic ``ZSF1``, u64 rows, u64
                  cols, rows*cols little-endian f64 (row-major), rows i64
                  labels — for large imported real features
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_streams
from .errors import ConfigurationError, InputDataError
from .flow import write_json

ZSF1_MAGIC = b"ZSF1"

SPLIT_KEYS = ("seen", "unseen", "train_seen", "test_seen", "test_unseen")


@dataclass
class SynthConfig:
    """Settings for the synthetic benchmark generator."""

    n_seen_classes: int
    n_unseen_classes: int
    feature_dim: int
    attribute_dim: int
    samples_per_class: int
    attr_scale: float = 1.0
    map_noise: float = 0.4
    within_class_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in (
            "n_seen_classes",
            "n_unseen_classes",
            "feature_dim",
            "attribute_dim",
            "samples_per_class",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.n_seen_classes < 3:
            raise ConfigurationError(
                "need at least 3 seen classes (anchor selection requires it)"
            )
        if self.attr_scale <= 0 or self.map_noise < 0 or self.within_class_std < 0:
            raise ConfigurationError("scale parameters must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        import dataclasses

        doc = dict(doc)
        fields = dataclasses.fields(cls)
        known = {f.name for f in fields}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config field {sorted(unknown)[0]!r}")
        for f in fields:
            if f.default is dataclasses.MISSING and f.name not in doc:
                raise ConfigurationError(f"missing required field {f.name!r}")
        return cls(**doc)


@dataclass
class Dataset:
    """Features, labels, attributes, and the seen/unseen split."""

    features: np.ndarray          # (N, d_v)
    labels: np.ndarray            # (N,) int class ids
    attributes: np.ndarray        # (C_s + C_u, d_a)
    seen_classes: np.ndarray      # ordered class ids
    unseen_classes: np.ndarray
    split: dict = field(default_factory=dict)  # name -> index array

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.seen_classes = np.asarray(self.seen_classes, dtype=np.intp)
        self.unseen_classes = np.asarray(self.unseen_classes, dtype=np.intp)
        self.split = {k: np.asarray(v, dtype=np.intp) for k, v in self.split.items()}
        self.validate()

    def validate(self) -> None:
        n = self.features.shape[0]
        n_classes = self.attributes.shape[0]
        if self.labels.shape != (n,):
            raise InputDataError(
                f"{n} feature rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise InputDataError("features contain non-finite values")
        if not np.all(np.isfinite(self.attributes)):
            raise InputDataError("attributes contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            bad = int(self.labels.max())
            raise InputDataError(
                f"label references class {bad} but only {n_classes} attribute rows exist"
            )
        seen = set(self.seen_classes.tolist())
        unseen = set(self.unseen_classes.tolist())
        if seen & unseen:
            raise InputDataError(
                f"seen and unseen classes overlap: {sorted(seen & unseen)}"
            )
        if seen | unseen != set(range(n_classes)):
            raise InputDataError("seen/unseen classes must cover every attribute row")
        for key in SPLIT_KEYS[2:]:
            if key not in self.split:
                raise InputDataError(f"split is missing the {key!r} list")
            part = self.split[key]
            if part.size and (part.min() < 0 or part.max() >= n):
                raise InputDataError(f"split {key!r} references a sample out of range")
        counts = np.zeros(n, dtype=np.intp)
        for key in SPLIT_KEYS[2:]:
            counts[self.split[key]] += 1
        dup = np.nonzero(counts > 1)[0]
        if dup.size:
            raise InputDataError(
                f"sample index {int(dup[0])} appears in more than one split list"
            )
        missing = np.nonzero(counts == 0)[0]
        if missing.size:
            raise InputDataError(
                f"sample index {int(missing[0])} appears in no split list"
            )
        if self.split["train_seen"].size:
            bad = ~np.isin(self.labels[self.split["train_seen"]], self.seen_classes)
            if bad.any():
                raise InputDataError("train_seen contains a sample of an unseen class")
        if self.split["test_seen"].size:
            bad = ~np.isin(self.labels[self.split["test_seen"]], self.seen_classes)
            if bad.any():
                raise InputDataError("test_seen contains a sample of an unseen class")
        if self.split["test_unseen"].size:
            bad = ~np.isin(self.labels[self.split["test_unseen"]], self.unseen_classes)
            if bad.any():
                raise InputDataError("test_unseen contains a sample of a seen class")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attribute_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    def seen_attributes(self) -> np.ndarray:
        return self.attributes[self.seen_classes]

    def unseen_attributes(self) -> np.ndarray:
        return self.attributes[self.unseen_classes]

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
            and np.array_equal(self.seen_classes, other.seen_classes)
            and np.array_equal(self.unseen_classes, other.unseen_classes)
            and all(
                np.array_equal(self.split[k], other.split[k]) for k in SPLIT_KEYS[2:]
            )
        )


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic benchmark; identical seeds give identical bytes.

    Per-class attributes are uniform in [0, attr_scale]; class means are a
    shared random linear map of the attributes plus map_noise deviation;
    samples are isotropic Gaussians around their class mean. The first 80%
    of each seen class goes to train_seen, the rest to test_seen; all unseen
    samples are test material.
    """
    g = rng_streams.stream(cfg.seed, rng_streams.DATA)
    c_total = cfg.n_seen_classes + cfg.n_unseen_classes
    attrs = g.uniform(0.0, cfg.attr_scale, size=(c_total, cfg.attribute_dim))
    lin_map = g.standard_normal((cfg.attribute_dim, cfg.feature_dim)) / np.sqrt(
        cfg.attribute_dim
    )
    means = attrs @ lin_map + cfg.map_noise * g.standard_normal(
        (c_total, cfg.feature_dim)
    )
    spc = cfg.samples_per_class
    features = np.empty((c_total * spc, cfg.feature_dim))
    labels = np.empty(c_total * spc, dtype=np.intp)
    for c in range(c_total):
        block = slice(c * spc, (c + 1) * spc)
        features[block] = means[c] + cfg.within_class_std * g.standard_normal(
            (spc, cfg.feature_dim)
        )
        labels[block] = c

    n_train = max(1, (4 * spc) // 5)
    train_seen, test_seen, test_unseen = [], [], []
    for c in range(cfg.n_seen_classes):
        idx = np.arange(c * spc, (c + 1) * spc)
        train_seen.append(idx[:n_train])
        test_seen.append(idx[n_train:])
    for c in range(cfg.n_seen_classes, c_total):
        test_unseen.append(np.arange(c * spc, (c + 1) * spc))

    return Dataset(
        features=features,
        labels=labels,
        attributes=attrs,
        seen_classes=np.arange(cfg.n_seen_classes),
        unseen_classes=np.arange(cfg.n_seen_classes, c_total),
        split={
            "train_seen": np.concatenate(train_seen),
            "test_seen": np.concatenate(test_seen) if test_seen[0].size else np.empty(0, np.intp),
            "test_unseen": np.concatenate(test_unseen),
        },
    )


def class_prototypes(ds: Dataset, over: np.ndarray | None = None) -> np.ndarray:
    """Per-seen-class mean feature vectors, rows in seen_classes order."""
    if over is None:
        over = ds.split["train_seen"]
    over = np.asarray(over, dtype=np.intp)
    feats, labs = ds.features[over], ds.labels[over]
    protos = np.empty((len(ds.seen_classes), ds.feature_dim))
    for i, c in enumerate(ds.seen_classes):
        mask = labs == c
        if not mask.any():
            raise InputDataError(f"class {int(c)} has no samples to average")
        protos[i] = feats[mask].mean(axis=0)
    return protos


# -- delimited text I/O -----------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_features_csv(path: str, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    header = "label," + ",".join(f"f{j}" for j in range(features.shape[1]))
    lines = [header]
    for y, row in zip(labels, features):
        lines.append(str(int(y)) + "," + ",".join(_fmt(v) for v in row))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_features_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if lineno == 1 and parts[0] == "label":
                width = len(parts) - 1
                continue
            try:
                label = int(parts[0])
                values = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise InputDataError(f"{path}:{lineno}: unparsable value ({exc})")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise InputDataError(
                    f"{path}:{lineno}: expected {width} feature values, got {len(values)}"
                )
            if not all(np.isfinite(values)):
                raise InputDataError(f"{path}:{lineno}: non-finite feature value")
            labels.append(label)
            rows.append(values)
    if not rows:
        return np.empty((0, width or 0)), np.empty(0, dtype=np.intp)
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.intp)


def save_attributes_csv(path: str, attributes: np.ndarray) -> None:
    attributes = np.asarray(attributes, dtype=np.float64)
    header = "class_id," + ",".join(f"a{j}" for j in range(attributes.shape[1]))
    lines = [header]
    for c, row in enumerate(attributes):
        lines.append(str(c) + "," + ",".join(_fmt(v) for v in row))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_attributes_csv(path: str) -> np.ndarray:
    entries = {}
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if lineno == 1 and parts[0] == "class_id":
                width = len(parts) - 1
                continue
            try:
                class_id = int(parts[0])
                values = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise InputDataError(f"{path}:{lineno}: unparsable value ({exc})")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise InputDataError(
                    f"{path}:{lineno}: expected {width} attribute values, got {len(values)}"
                )
            if not all(np.isfinite(values)):
                raise InputDataError(f"{path}:{lineno}: non-finite attribute value")
            if class_id in entries:
                raise InputDataError(f"{path}:{lineno}: duplicate class id {class_id}")
            entries[class_id] = values
    if not entries:
        raise InputDataError(f"{path}: no attribute rows")
    n = len(entries)
    if sorted(entries) != list(range(n)):
        raise InputDataError(f"{path}: class ids must be exactly 0..{n - 1}")
    return np.asarray([entries[c] for c in range(n)], dtype=np.float64)


def save_split_json(path: str, ds: Dataset) -> None:
    doc = {
        "seen": ds.seen_classes.tolist(),
        "unseen": ds.unseen_classes.tolist(),
        "train_seen": ds.split["train_seen"].tolist(),
        "test_seen": ds.split["test_seen"].tolist(),
        "test_unseen": ds.split["test_unseen"].tolist(),
    }
    write_json(path, doc)


def load_split_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputDataError(f"{path}: invalid JSON ({exc})")
    for key in SPLIT_KEYS:
        if key not in doc:
            raise InputDataError(f"{path}: split is missing the {key!r} list")
        if not isinstance(doc[key], list):
            raise InputDataError(f"{path}: {key!r} must be a list of indices")
    return doc


def save_dataset(ds: Dataset, out_dir: str) -> dict[str, str]:
    """Write features.csv, attributes.csv, and split.json under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "features": os.path.join(out_dir, "features.csv"),
        "attributes": os.path.join(out_dir, "attributes.csv"),
        "split": os.path.join(out_dir, "split.json"),
    }
    save_features_csv(paths["features"], ds.features, ds.labels)
    save_attributes_csv(paths["attributes"], ds.attributes)
    save_split_json(paths["split"], ds)
    return paths


def load_dataset(features_path: str, attributes_path: str, split_path: str) -> Dataset:
    """Load and cross-validate the three dataset files."""
    features, labels = load_features_csv(features_path)
    attributes = load_attributes_csv(attributes_path)
    split_doc = load_split_json(split_path)
    return Dataset(
        features=features,
        labels=labels,
        attributes=attributes,
        seen_classes=np.asarray(split_doc["seen"], dtype=np.intp),
        unseen_classes=np.asarray(split_doc["unseen"], dtype=np.intp),
        split={k: np.asarray(split_doc[k], dtype=np.intp) for k in SPLIT_KEYS[2:]},
    )


def load_dataset_dir(data_dir: str) -> Dataset:
    return load_dataset(
        os.path.join(data_dir, "features.csv"),
        os.path.join(data_dir, "attributes.csv"),
        os.path.join(data_dir, "split.json"),
    )


# -- binary feature I/O ------------------------------------------------------


def save_features_zsf1(path: str, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    labels = np.ascontiguousarray(labels, dtype="<i8")
    if features.shape[0] != labels.shape[0]:
        raise ConfigurationError("features and labels must have equal row counts")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(ZSF1_MAGIC)
        fh.write(struct.pack("<QQ", features.shape[0], features.shape[1]))
        fh.write(features.tobytes())
        fh.write(labels.tobytes())
    os.replace(tmp, path)


def load_features_zsf1(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ZSF1_MAGIC:
            raise InputDataError(f"{path}: bad magic {magic!r}, expected {ZSF1_MAGIC!r}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        feat = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
        if feat.size != rows * cols:
            raise InputDataError(f"{path}: truncated feature block")
        labels = np.frombuffer(fh.read(rows * 8), dtype="<i8")
        if labels.size != rows:
            raise InputDataError(f"{path}: truncated label block")
    features = feat.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(features)):
        raise InputDataError(f"{path}: non-finite feature value")
    return features, labels.astype(np.intp)
