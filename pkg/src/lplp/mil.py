"""Output-aggregation MIL: pool instance scores into a bag score, then BCE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nets import forward_feature, instance_score

PROB_FLOOR = 1e-12
KINDS = ("mean", "max", "lse")


@dataclass(frozen=True)
class AggregationKind:
    kind: str = "mean"
    r: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregation {self.kind!r}; expected one of {KINDS}")
        if self.kind == "lse" and not self.r > 0:
            raise ValueError("LSE sharpness must be positive")

    @classmethod
    def parse(cls, text: str, lse_r: float = 4.0) -> "AggregationKind":
        """Accepts ``mean``, ``max``, ``lse`` or ``lse:<r>``."""
        name, _, r = text.strip().lower().partition(":")
        return cls(name, float(r) if r else lse_r)

    def __str__(self):
        return f"lse:{self.r:g}" if self.kind == "lse" else self.kind


Mean = AggregationKind("mean")
Max = AggregationKind("max")


def LSE(r: float = 4.0) -> AggregationKind:
    return AggregationKind("lse", r)


class Segments:
    """Maps the concatenated instances of several bags back to their bags."""

    def __init__(self, sizes: Sequence[int]):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.size == 0 or np.any(sizes < 1):
            raise ValueError("every bag needs at least one instance")
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.owner = np.repeat(np.arange(sizes.size), sizes)
        self.matrix = np.zeros((sizes.size, int(self.offsets[-1])))
        self.matrix[self.owner, np.arange(self.owner.size)] = 1.0

    def __len__(self):
        return self.sizes.size

    def sum(self, x: Node) -> Node:
        """Per-bag sum of a ``(N,)`` or ``(N, k)`` node."""
        if x.value.ndim == 1:
            return ad.reshape(self.matrix @ ad.reshape(x, (-1, 1)), (len(self),))
        return self.matrix @ x

    def mean(self, x: Node) -> Node:
        s = self.sum(x)
        n = self.sizes if x.value.ndim == 1 else self.sizes[:, None]
        return s / n.astype(np.float64)

    def argmax(self, values: np.ndarray) -> tuple:
        idx = np.empty(len(self), dtype=np.int64)
        gaps = np.empty(len(self))
        for b in range(len(self)):
            lo, hi = self.offsets[b], self.offsets[b + 1]
            seg = values[lo:hi]
            k = int(np.argmax(seg))
            idx[b] = lo + k
            top = np.sort(seg)
            gaps[b] = top[-1] - top[-2] if seg.size > 1 else np.inf
        return idx, gaps


def aggregate_segments(scores: Node, segments: Segments, kind: AggregationKind) -> Node:
    """Bag scores ``(B,)`` from concatenated instance scores ``(N,)``."""
    if kind.kind == "mean":
        return segments.mean(scores)
    idx, gaps = segments.argmax(scores.value)
    if kind.kind == "max":
        scores.tape._note_kink(idx, gaps)
        return scores[idx]
    # (1/r) log(mean exp(r s)), shifted by the per-bag max for stability
    top = scores.value[idx]
    shifted = ad.exp((scores - top[segments.owner]) * kind.r)
    return ad.log(segments.mean(shifted)) * (1.0 / kind.r) + top


def aggregate(scores: Node, kind: AggregationKind) -> Node:
    """Bag score from the instance scores of one bag."""
    if scores.value.size == 0:
        raise ValueError("cannot aggregate an empty bag")
    if scores.value.ndim == 0:
        scores = ad.reshape(scores, (1,))
    return aggregate_segments(scores, Segments([scores.value.size]), kind)[0]


def mil_loss(Y, S_hat: Node) -> Node:
    """Binary cross-entropy between bag label(s) ``Y`` and bag score(s)."""
    Y = np.asarray(Y, dtype=np.float64)
    S = ad.clamp(S_hat, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(ad.log(S) * Y) - ad.log(1.0 - S) * (1.0 - Y)


def mil_bag_forward(model, bag, kind: AggregationKind, tape, bound=None):
    """Instance scores, bag score and MIL loss for one bag.

    ``bound`` may carry blocks already placed on ``tape`` (see
    :meth:`ModelTriple.bind`); otherwise parameters are bound as leaves.
    """
    if bound is None:
        bound, _ = model.bind(tape)
    feats = forward_feature(bound["f"], tape.const(bag.features), tape)
    scores = instance_score(bound["g"], feats, tape)
    S = aggregate(scores, kind)
    return scores, S, mil_loss(bag.bag_label, S)
