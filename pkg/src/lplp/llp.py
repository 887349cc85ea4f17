"""Soft-masked proportion estimation, proportion loss, and the PPL baseline loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .mil import Segments

MASK_FLOOR = 1e-8
DEGENERATE_MASK = 1e-6


@dataclass
class MaskedProportionEstimate:
    p_hat: Node
    mask_sum: Node

    @property
    def degenerate(self):
        """True where (almost) no instance was kept by the mask."""
        return self.mask_sum.value < DEGENERATE_MASK


def _as_node(x, tape) -> Node:
    if isinstance(x, Node):
        return x
    if tape is None:
        tape = ad.Tape()
    return tape.const(np.asarray(x, dtype=np.float64))


def masked_proportion_segments(scores: Node, probs: Node, segments: Segments) -> MaskedProportionEstimate:
    """Per-bag ``sum_j s_j z_j / sum_j s_j`` for concatenated bags."""
    weighted = probs * ad.reshape(scores, (-1, 1))
    mask_sum = segments.sum(scores)
    denom = ad.clamp(mask_sum, lo=MASK_FLOOR)
    return MaskedProportionEstimate(segments.sum(weighted) / ad.reshape(denom, (-1, 1)), mask_sum)


def masked_proportion(scores, probs, tape=None) -> MaskedProportionEstimate:
    """Estimate the positive-class proportion of one bag.

    ``scores`` has shape ``(n,)`` and ``probs`` shape ``(n, C)``.  Instances
    are weighted by their positive score, so instances the MIL head calls
    negative drop out of the average.
    """
    tape = scores.tape if isinstance(scores, Node) else probs.tape if isinstance(probs, Node) else tape
    tape = tape or ad.Tape()
    scores, probs = _as_node(scores, tape), _as_node(probs, tape)
    if probs.value.ndim != 2 or scores.shape != probs.shape[:1]:
        raise ValueError(f"scores {scores.shape} and probs {probs.shape} disagree")
    est = masked_proportion_segments(scores, probs, Segments([scores.shape[0]]))
    return MaskedProportionEstimate(est.p_hat[0], est.mask_sum[0])


def proportion_loss(p, p_hat) -> Node:
    """Cross-entropy ``-sum_c p_c log p_hat_c`` along the last axis."""
    if isinstance(p_hat, MaskedProportionEstimate):
        p_hat = p_hat.p_hat
    p_hat = _as_node(p_hat, None)
    p = np.asarray(p, dtype=np.float64)
    terms = ad.safe_log(p_hat) * p
    return -ad.sum_(terms, axis=-1)


def ppl_loss_segments(probs: Node, segments: Segments, bag_labels, partial: np.ndarray,
                      positive_block: str = "renormalize") -> Node:
    """Per-bag PPL losses.

    ``probs`` is ``(N, C+1)`` with the negative class last; ``partial`` is
    ``(B, C)`` and ignored for negative bags.
    """
    if positive_block not in ("renormalize", "ignore"):
        raise ValueError(f"unknown positive_block mode {positive_block!r}")
    C = probs.shape[1] - 1
    y = np.asarray(bag_labels, dtype=np.float64)
    avg = segments.mean(probs)
    block = avg[:, :C]
    if positive_block == "renormalize":
        mass = ad.clamp(ad.sum_(block, axis=1, keepdims=True), lo=MASK_FLOOR)
        block = block / mass
    pos = proportion_loss(partial, block)
    neg = -ad.safe_log(avg[:, C])
    return pos * y + neg * (1.0 - y)


def ppl_loss(bag, probs: Node, tape=None, positive_block: str = "renormalize") -> Node:
    """Partial proportion loss for one bag from a (C+1)-way head.

    Positive bags compare the given partial proportions with the positive
    block of the bag-averaged prediction; negative bags are pushed to the
    all-negative proportion.
    """
    probs = _as_node(probs, tape)
    C = probs.shape[1] - 1
    partial = bag.partial_proportions if bag.bag_label == 1 else np.zeros(C)
    return ppl_loss_segments(probs, Segments([probs.shape[0]]), [bag.bag_label],
                             partial[None, :], positive_block)[0]
