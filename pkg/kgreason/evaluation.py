"""
Relation-prediction metrics (AUC, precision, recall, F1) against filtered
negatives, and entity-classification accuracy / macro-F1.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score, f1_score, precision_recall_fscore_support

from .errors import UndefinedMetricError, ValidationError
from .graph import KnowledgeGraph, Triple, norm_coefficients
from .loss import NegativeSampler
from .model import ModelParams, classify, encode, score_triples

logger = logging.getLogger(__name__)

CSV_HEADER = "auc,precision,recall,f1,threshold,num_pos,num_neg"
DEFAULT_THRESHOLD = 0.5


class ScoredPair(NamedTuple):
    triple: Triple
    score: float
    positive: bool


class PRF1(NamedTuple):
    precision: float
    recall: float
    f1: float
    no_predicted_positives: bool = False


class EntityMetrics(NamedTuple):
    accuracy: float
    macro_f1: float


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    num_pos: int
    num_neg: int
    skipped: int = 0
    no_predicted_positives: bool = False
    entity_accuracy: Optional[float] = None
    entity_macro_f1: Optional[float] = None

    def with_entities(self, metrics: EntityMetrics) -> "MetricsReport":
        return replace(self, entity_accuracy=metrics.accuracy, entity_macro_f1=metrics.macro_f1)

    def to_text(self) -> str:
        lines = [
            f"auc={self.auc:.6f}",
            f"precision={self.precision:.6f}",
            f"recall={self.recall:.6f}",
            f"f1={self.f1:.6f}",
            f"threshold={self.threshold:g}",
            f"num_pos={self.num_pos}",
            f"num_neg={self.num_neg}",
            f"skipped={self.skipped}",
        ]
        if self.no_predicted_positives:
            lines.append("no_predicted_positives=1")
        if self.entity_accuracy is not None:
            lines.append(f"entity_accuracy={self.entity_accuracy:.6f}")
            lines.append(f"entity_macro_f1={self.entity_macro_f1:.6f}")
        return "\n".join(lines)

    def csv_row(self) -> str:
        return (f"{self.auc:.6f},{self.precision:.6f},{self.recall:.6f},{self.f1:.6f},"
                f"{self.threshold:g},{self.num_pos},{self.num_neg}")


def _split_scores(scored: Sequence[ScoredPair]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in scored], dtype=np.float64)
    labels = np.array([s.positive for s in scored], dtype=bool)
    return scores[labels], scores[~labels]


#
# Metrics
#

def auc_from_scores(pos, neg) -> float:
    """
    Mann-Whitney statistic through tie-averaged ranks: the fraction of
    (positive, negative) pairs ordered correctly, ties counting one half.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if not pos.size or not neg.size:
        raise UndefinedMetricError(f"AUC needs positives and negatives, got {pos.size} and {neg.size}")

    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc(scored: Sequence[ScoredPair]) -> float:
    return auc_from_scores(*_split_scores(scored))


def prf1(scored: Sequence[ScoredPair], threshold: float = DEFAULT_THRESHOLD) -> PRF1:
    """
    Predict positive iff score >= threshold. Precision is reported as 1.0 with
    the no_predicted_positives flag when nothing crosses the threshold.
    """
    if not scored:
        raise UndefinedMetricError("no scored pairs")
    y_true = np.array([s.positive for s in scored], dtype=np.int64)
    y_pred = (np.array([s.score for s in scored], dtype=np.float64) >= threshold).astype(np.int64)
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, pos_label=1, average="binary", zero_division=1.0,
    )

    none_predicted = not y_pred.any()
    if not y_true.any():
        recall = 0.0
    if recall == 0.0:
        f1 = 0.0
    return PRF1(float(precision), float(recall), float(f1), bool(none_predicted))


#
# Relation Evaluation
#

def score_eval_set(
    params: ModelParams,
    g_train: KnowledgeGraph,
    eval_triples: Sequence[Sequence[int]],
    k_eval: int = 1,
    seed: int = 42,
    known=None,
    skip_unseen: bool = False,
) -> Tuple[List[ScoredPair], int]:
    """
    Scores every usable eval triple and k_eval negatives per triple. Negatives
    are filtered against train and eval triples (plus `known`). Positive
    scores do not depend on the seed. Returns (scored pairs, skipped count).
    """
    kept, skipped = [], 0
    for raw in eval_triples:
        t = Triple(*(int(v) for v in raw))
        in_range = (0 <= t.head < g_train.num_entities and 0 <= t.tail < g_train.num_entities
                    and 0 <= t.relation < g_train.num_relations)
        if not in_range or (skip_unseen and (g_train.degree[t.head] == 0 or g_train.degree[t.tail] == 0)):
            skipped += 1
            continue
        kept.append(t)
    if skipped:
        logger.warning(f"skipped {skipped} eval triples that are out of range or touch entities unseen in training")

    h = encode(g_train, norm_coefficients(g_train), params).final
    filter_set = set(kept) | set(Triple(*t) for t in (known or ()))
    sampler = NegativeSampler(g_train, np.random.default_rng(seed), known=filter_set)
    negatives = [n.triple for n in sampler.sample(kept, k_eval)] if kept else []

    scored = []
    for triples, positive in ((kept, True), (negatives, False)):
        if not triples:
            continue
        idx = np.array(triples, dtype=np.int64)
        probs = score_triples(h, idx[:, 0], idx[:, 1], idx[:, 2], params)
        scored.extend(ScoredPair(t, float(p), positive) for t, p in zip(triples, probs))
    return scored, skipped


def metrics_report(scored: Sequence[ScoredPair], threshold: float = DEFAULT_THRESHOLD, skipped: int = 0) -> MetricsReport:
    pos, neg = _split_scores(scored)
    p = prf1(scored, threshold)
    return MetricsReport(
        auc=auc_from_scores(pos, neg),
        precision=p.precision, recall=p.recall, f1=p.f1,
        threshold=threshold, num_pos=int(pos.size), num_neg=int(neg.size),
        skipped=skipped, no_predicted_positives=p.no_predicted_positives,
    )


def evaluate_relations(
    params: ModelParams,
    g_train: KnowledgeGraph,
    eval_triples,
    k_eval: int = 1,
    seed: int = 42,
    threshold: float = DEFAULT_THRESHOLD,
    known=None,
    skip_unseen: bool = False,
) -> MetricsReport:
    scored, skipped = score_eval_set(params, g_train, eval_triples, k_eval, seed, known, skip_unseen)
    return metrics_report(scored, threshold, skipped)


#
# Entity Evaluation
#

def evaluate_entities(params: ModelParams, g: KnowledgeGraph, labels, eval_mask) -> EntityMetrics:
    """Argmax accuracy and macro-F1 over the classes present among masked labels."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(eval_mask, dtype=bool)
    if not mask.any():
        raise UndefinedMetricError("entity evaluation mask selects no entities")
    if np.any(labels[mask] < 0):
        raise ValidationError("entity evaluation mask includes unlabeled entities")

    probs = classify(encode(g, norm_coefficients(g), params).final, params)
    return entity_metrics(labels[mask], probs[mask].argmax(axis=1))


def entity_metrics(y_true, y_pred) -> EntityMetrics:
    present = np.unique(y_true)
    return EntityMetrics(
        float(accuracy_score(y_true, y_pred)),
        float(f1_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
    )
