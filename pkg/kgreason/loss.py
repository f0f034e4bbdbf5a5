"""
Negative-sampling binary cross-entropy for relations, the entity
classification likelihood, and the filtered negative sampler.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .graph import KnowledgeGraph, Triple

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
MAX_ATTEMPTS = 100


class Slot(Enum):
    HEAD = "head"
    TAIL = "tail"


class NegativeSample(NamedTuple):
    triple: Triple
    source: int
    corrupted_slot: Slot


@dataclass(frozen=True)
class LossBreakdown:
    relation_pos: float
    relation_neg: float
    entity: float
    total: float
    entity_active: bool = False

    def with_entity(self, value: float, alpha: float, active: bool = True) -> "LossBreakdown":
        return replace(
            self, entity=value, total=self.total + (alpha * value if active else 0.0), entity_active=active,
        )

    def components(self):
        return {
            "relation_pos": self.relation_pos,
            "relation_neg": self.relation_neg,
            "entity": self.entity,
            "total": self.total,
        }


class EntityLoss(NamedTuple):
    value: float
    active: bool


def clamp_probability(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


#
# Relation Objective
#

def relation_loss(pos_scores, neg_scores, lam: float) -> LossBreakdown:
    """
    Mean -log p over positives plus lam times mean -log(1 - p) over negatives.
    An empty side contributes 0.
    """
    pos = clamp_probability(np.asarray(pos_scores, dtype=np.float64))
    neg = clamp_probability(np.asarray(neg_scores, dtype=np.float64))
    pos_term = float(-np.mean(np.log(pos))) if pos.size else 0.0
    neg_term = float(-np.mean(np.log1p(-neg))) if neg.size else 0.0
    return LossBreakdown(pos_term, neg_term, 0.0, pos_term + lam * neg_term)


def relation_loss_grad(pos_scores, neg_scores, lam: float):
    """Gradients of relation_loss().total with respect to each probability."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)

    grad_pos = np.zeros_like(pos)
    if pos.size:
        live = (pos > PROB_CLAMP) & (pos < 1.0 - PROB_CLAMP)
        grad_pos[live] = -1.0 / (pos[live] * pos.size)

    grad_neg = np.zeros_like(neg)
    if neg.size:
        live = (neg > PROB_CLAMP) & (neg < 1.0 - PROB_CLAMP)
        grad_neg[live] = lam / ((1.0 - neg[live]) * neg.size)

    return grad_pos, grad_neg


#
# Entity Objective
#

def _check_labels(probs, labels, mask):
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (probs.shape[0],) or mask.shape != labels.shape:
        raise ValidationError(f"labels {labels.shape} and mask {mask.shape} do not match {probs.shape[0]} rows")
    picked = labels[mask]
    if picked.size and (picked.min() < 0 or picked.max() >= probs.shape[1]):
        raise ValidationError(f"label outside [0, {probs.shape[1]}) among labeled entities")
    return labels, mask


def entity_loss(probs, labels, labeled_mask) -> EntityLoss:
    """Mean -log p(true class) over labeled entities; inactive when nothing is labeled."""
    labels, mask = _check_labels(probs, labels, labeled_mask)
    if not mask.any():
        return EntityLoss(0.0, False)
    rows = np.flatnonzero(mask)
    p = clamp_probability(probs[rows, labels[rows]])
    return EntityLoss(float(-np.mean(np.log(p))), True)


def entity_loss_grad(probs, labels, labeled_mask) -> np.ndarray:
    labels, mask = _check_labels(probs, labels, labeled_mask)
    grad = np.zeros_like(probs)
    rows = np.flatnonzero(mask)
    if not rows.size:
        return grad
    p = probs[rows, labels[rows]]
    live = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad[rows[live], labels[rows[live]]] = -1.0 / (p[live] * rows.size)
    return grad


#
# Negative Sampling
#

class NegativeSampler:
    """
    Corrupts the head or tail of each positive (fair coin) with a uniform random
    entity, resampling until the candidate is unknown. Candidates that stay known
    after MAX_ATTEMPTS draws are emitted anyway and counted in `exhausted`.
    """

    def __init__(self, g: KnowledgeGraph, rng: np.random.Generator, known: Optional[Iterable[Triple]] = None):
        self.g = g
        self.rng = rng
        self.known = g.triple_set if known is None else g.triple_set | frozenset(Triple(*t) for t in known)
        self.exhausted = 0

    def sample(self, positives: Sequence[Sequence[int]], k: int) -> List[NegativeSample]:
        if k < 1:
            raise ValidationError(f"negatives per positive must be >= 1, got {k}")

        positives = [Triple(*t) for t in positives]
        n = len(positives) * k
        n_ent = self.g.num_entities
        coins = self.rng.integers(0, 2, size=n)
        ents = self.rng.integers(0, n_ent, size=n)

        out = []
        before = self.exhausted
        for idx in range(n):
            src = idx // k
            pos = positives[src]
            slot = Slot.HEAD if coins[idx] == 0 else Slot.TAIL
            cand = self._corrupt(pos, slot, int(ents[idx]))

            attempts = 1
            while cand in self.known and attempts < MAX_ATTEMPTS:
                slot = Slot.HEAD if self.rng.integers(0, 2) == 0 else Slot.TAIL
                cand = self._corrupt(pos, slot, int(self.rng.integers(0, n_ent)))
                attempts += 1
            if cand in self.known:
                self.exhausted += 1

            out.append(NegativeSample(cand, src, slot))

        if self.exhausted > before:
            logger.warning(f"{self.exhausted - before} negatives collided with known triples after "
                           f"{MAX_ATTEMPTS} attempts; the graph is close to complete")
        return out

    @staticmethod
    def _corrupt(t: Triple, slot: Slot, entity: int) -> Triple:
        if slot is Slot.HEAD:
            return Triple(entity, t.relation, t.tail)
        return Triple(t.head, t.relation, entity)


def sample_negatives(g: KnowledgeGraph, positives, k: int, rng: np.random.Generator, known=None) -> List[NegativeSample]:
    return NegativeSampler(g, rng, known=known).sample(positives, k)


def negatives_as_arrays(negatives: Sequence[NegativeSample]):
    idx = np.array([n.triple for n in negatives], dtype=np.int64).reshape(-1, 3)
    return idx[:, 0], idx[:, 1], idx[:, 2]
