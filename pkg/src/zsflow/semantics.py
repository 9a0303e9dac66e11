"""Relative positioning of class attribute vectors.

Seen-class attributes form a cosine-similarity graph; the classes with the
highest, lowest, and median similarity sums become anchors. Any class (seen
or unseen) is then re-expressed through its offsets to the three anchors,
each mapped by a learned single-layer ReLU net and summed into a global
semantic vector that conditions the flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputDataError
from .flow import net_doc, net_from_doc
from .numcore import Mlp


@dataclass
class SemanticGraph:
    """Cosine-similarity graph over the seen-class attribute rows."""

    attributes: np.ndarray  # (C_s, d_a)
    edges: np.ndarray       # (C_s, C_s) cosine similarities
    sums: np.ndarray        # (C_s,) row sums, self-edge included


def build_graph(seen_attributes: np.ndarray) -> SemanticGraph:
    """Build the similarity graph. Rejects all-zero attribute rows."""
    attrs = np.asarray(seen_attributes, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[0] < 3:
        raise ConfigurationError(
            f"need at least 3 seen-class attribute rows, got shape {attrs.shape}"
        )
    norms = np.linalg.norm(attrs, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise InputDataError(f"attribute row for class {int(zero[0])} has zero norm")
    edges = (attrs @ attrs.T) / np.outer(norms, norms)
    return SemanticGraph(attributes=attrs, edges=edges, sums=edges.sum(axis=1))


def select_anchors(graph: SemanticGraph) -> tuple[int, int, int]:
    """Indices of the max-, min-, and median-similarity-sum classes.

    Ties go to the lowest class index; the median of an even count is the
    lower median.
    """
    sums = graph.sums
    idx_max = int(np.argmax(sums))
    idx_min = int(np.argmin(sums))
    order = np.argsort(sums, kind="stable")
    med_value = sums[order[(len(sums) - 1) // 2]]
    idx_med = int(np.nonzero(sums == med_value)[0][0])
    return idx_max, idx_min, idx_med


class RelativeEmbedder:
    """Maps raw attribute vectors to global semantic vectors via anchors."""

    def __init__(
        self,
        anchor_max: np.ndarray,
        anchor_min: np.ndarray,
        anchor_med: np.ndarray,
        h_max: Mlp,
        h_min: Mlp,
        h_med: Mlp,
    ):
        d_a = anchor_max.shape[0]
        for name, net in (("h_max", h_max), ("h_min", h_min), ("h_med", h_med)):
            if net.in_dim != d_a:
                raise ConfigurationError(f"{name} input dim {net.in_dim} != d_a {d_a}")
        if not (h_max.out_dim == h_min.out_dim == h_med.out_dim):
            raise ConfigurationError("anchor response nets must share an output dim")
        self.anchor_max = np.asarray(anchor_max, dtype=np.float64)
        self.anchor_min = np.asarray(anchor_min, dtype=np.float64)
        self.anchor_med = np.asarray(anchor_med, dtype=np.float64)
        self.h_max, self.h_min, self.h_med = h_max, h_min, h_med
        self.d_a = d_a
        self.out_dim = h_max.out_dim

    @classmethod
    def fit(
        cls, seen_attributes: np.ndarray, d_g: int, rng: np.random.Generator
    ) -> "RelativeEmbedder":
        """Select anchors from the seen classes and initialize the h nets."""
        graph = build_graph(seen_attributes)
        i_max, i_min, i_med = select_anchors(graph)
        d_a = graph.attributes.shape[1]
        nets = [Mlp.build([d_a, d_g], ("relu",), rng) for _ in range(3)]
        return cls(
            graph.attributes[i_max],
            graph.attributes[i_min],
            graph.attributes[i_med],
            *nets,
        )

    def anchors(self) -> np.ndarray:
        return np.stack([self.anchor_max, self.anchor_min, self.anchor_med])

    def embed(self, attributes: np.ndarray) -> np.ndarray:
        """Global semantic vectors for a batch of attribute rows."""
        a = np.atleast_2d(np.asarray(attributes, dtype=np.float64))
        if a.shape[1] != self.d_a:
            raise ConfigurationError(
                f"attribute rows have dim {a.shape[1]}, embedder expects {self.d_a}"
            )
        return (
            self.h_max.forward(a - self.anchor_max)
            + self.h_min.forward(a - self.anchor_min)
            + self.h_med.forward(a - self.anchor_med)
        )

    def backward(self, g_out: np.ndarray, accumulate: bool = False) -> None:
        """Backprop an upstream gradient on the embedding into the h nets."""
        self.h_max.backward(g_out, accumulate)
        self.h_min.backward(g_out, accumulate)
        self.h_med.backward(g_out, accumulate)

    def parameters(self) -> list[np.ndarray]:
        return self.h_max.parameters() + self.h_min.parameters() + self.h_med.parameters()

    def gradients(self) -> list[np.ndarray]:
        return self.h_max.gradients() + self.h_min.gradients() + self.h_med.gradients()

    def zero_grad(self) -> None:
        for net in (self.h_max, self.h_min, self.h_med):
            net.zero_grad()

    def to_doc(self) -> dict:
        return {
            "kind": "relative",
            "d_a": self.d_a,
            "d_g": self.out_dim,
            "anchor_max": self.anchor_max.tolist(),
            "anchor_min": self.anchor_min.tolist(),
            "anchor_med": self.anchor_med.tolist(),
            "h_max": net_doc(self.h_max),
            "h_min": net_doc(self.h_min),
            "h_med": net_doc(self.h_med),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RelativeEmbedder":
        nets = [
            net_from_doc(doc[key], hidden_activation="relu", final_activation="relu")
            for key in ("h_max", "h_min", "h_med")
        ]
        return cls(
            np.asarray(doc["anchor_max"]),
            np.asarray(doc["anchor_min"]),
            np.asarray(doc["anchor_med"]),
            *nets,
        )


class RawEmbedder:
    """Identity conditioning: the flow sees the raw attribute vectors.

    Used by the ablation variants that disable relative positioning.
    """

    def __init__(self, d_a: int):
        self.d_a = d_a
        self.out_dim = d_a

    def embed(self, attributes: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(attributes, dtype=np.float64))
        if a.shape[1] != self.d_a:
            raise ConfigurationError(
                f"attribute rows have dim {a.shape[1]}, embedder expects {self.d_a}"
            )
        return a

    def backward(self, g_out: np.ndarray, accumulate: bool = False) -> None:
        pass

    def parameters(self) -> list[np.ndarray]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []

    def zero_grad(self) -> None:
        pass

    def to_doc(self) -> dict:
        return {"kind": "raw", "d_a": self.d_a, "d_g": self.out_dim}

    @classmethod
    def from_doc(cls, doc: dict) -> "RawEmbedder":
        return cls(doc["d_a"])


def embedder_from_doc(doc: dict):
    kind = doc.get("kind")
    if kind == "relative":
        return RelativeEmbedder.from_doc(doc)
    if kind == "raw":
        return RawEmbedder.from_doc(doc)
    raise ConfigurationError(f"unknown embedder kind {kind!r}")
