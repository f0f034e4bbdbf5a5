"""
Full-batch training of the joint model and the finite-difference gradient check.

All randomness flows from TrainConfig.seed through one numpy Generator, drawn in
a fixed order: parameter initialization first, then one negative batch per epoch.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import NonFiniteLossError, ShapeError, ValidationError
from .evaluation import MetricsReport, evaluate_relations
from .graph import KnowledgeGraph, NormCoefficients, build_graph, norm_coefficients
from .loss import (
    LossBreakdown, NegativeSampler, entity_loss, entity_loss_grad, negatives_as_arrays,
    relation_loss, relation_loss_grad,
)
from .model import (
    DECODER_FORMS, ModelParams, classify, classify_backward, encode, encode_backward,
    init_params, score_backward, score_triples,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
# validation metrics written per epoch by TrainHistory.write_csv
CURVE_METRICS = ("auc", "precision", "recall", "f1")


@dataclass
class TrainConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_epochs: int = 200
    learning_rate: float = 0.01
    # lambda: weight of the negative-sample term
    neg_weight: float = 1.0
    # alpha: weight of the entity-classification term
    entity_weight: float = 1.0
    negatives: int = 1
    seed: int = 42
    decoder_form: str = "full"
    relational: bool = False
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    entity_loss_enabled: bool = True
    eval_every: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if self.num_layers < 1:
            problems.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            problems.append(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.num_epochs < 0:
            problems.append(f"num_epochs must be >= 0, got {self.num_epochs}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.neg_weight < 0:
            problems.append(f"lambda must be >= 0, got {self.neg_weight}")
        if self.entity_weight < 0:
            problems.append(f"alpha must be >= 0, got {self.entity_weight}")
        if self.negatives < 1:
            problems.append(f"negatives must be >= 1, got {self.negatives}")
        if self.decoder_form not in DECODER_FORMS:
            problems.append(f"decoder_form must be one of {DECODER_FORMS}, got {self.decoder_form!r}")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            problems.append("adam requires 0 <= beta1, beta2 < 1 and eps > 0")
        if self.eval_every < 0:
            problems.append(f"eval_every must be >= 0, got {self.eval_every}")

        if problems:
            raise ValidationError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class OptimizerState:
    step: int = 0
    m: Optional[ModelParams] = None
    v: Optional[ModelParams] = None

    @classmethod
    def initial(cls, params: ModelParams, optimizer: str = "adam") -> "OptimizerState":
        if optimizer == "adam":
            return cls(0, params.zeros_like(), params.zeros_like())
        return cls(0)


@dataclass
class TrainHistory:
    losses: List[LossBreakdown] = field(default_factory=list)
    evaluations: List[Tuple[int, MetricsReport]] = field(default_factory=list)
    exhausted_negatives: int = 0

    def __len__(self):
        return len(self.losses)

    def write_csv(self, path):
        """
        One row per epoch: the loss components, then the validation curve
        (auc, precision, recall, f1), left empty on epochs without an evaluation.
        """
        reports = dict(self.evaluations)
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow(["epoch", "relation_pos", "relation_neg", "entity", "total"] + list(CURVE_METRICS))
            for epoch, loss in enumerate(self.losses, 1):
                report = reports.get(epoch)
                curve = [repr(getattr(report, m)) for m in CURVE_METRICS] if report is not None else [""] * len(CURVE_METRICS)
                writer.writerow([epoch] + [repr(v) for v in loss.components().values()] + curve)


#
# Optimizers
#

def _paired(params: ModelParams, grads: ModelParams):
    p_named, g_named = params.named_arrays(), grads.named_arrays()
    if [n for n, _ in p_named] != [n for n, _ in g_named]:
        raise ShapeError("gradient structure does not match parameters")
    for (name, p), (_, g) in zip(p_named, g_named):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
    return p_named, g_named


def adam_step(params: ModelParams, grads: ModelParams, state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update. Returns new (params, state); inputs are left untouched."""
    p_named, g_named = _paired(params, grads)
    if state.m is None:
        state = OptimizerState.initial(params, "adam")

    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for (_, p), (_, g), (_, m), (_, v) in zip(p_named, g_named, state.m.named_arrays(), state.v.named_arrays()):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)

    return params.with_arrays(new_p), OptimizerState(t, params.with_arrays(new_m), params.with_arrays(new_v))


def sgd_step(params: ModelParams, grads: ModelParams, state: OptimizerState, lr: float):
    p_named, g_named = _paired(params, grads)
    new_p = [p - lr * g for (_, p), (_, g) in zip(p_named, g_named)]
    return params.with_arrays(new_p), OptimizerState(state.step + 1)


def optimizer_step(params, grads, state, config: TrainConfig):
    if config.optimizer == "sgd":
        return sgd_step(params, grads, state, config.learning_rate)
    return adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2, config.eps)


#
# Objective
#

def _entity_term_enabled(g: KnowledgeGraph, config: TrainConfig) -> bool:
    return config.entity_loss_enabled and g.has_labels


def _forward(g, norms, params, negatives, config):
    acts = encode(g, norms, params)
    h = acts.final
    neg_h, neg_r, neg_t = negatives
    pos_p = score_triples(h, g.heads, g.relations, g.tails, params)
    neg_p = score_triples(h, neg_h, neg_r, neg_t, params)
    loss = relation_loss(pos_p, neg_p, config.neg_weight)

    probs = None
    if _entity_term_enabled(g, config):
        probs = classify(h, params)
        ent = entity_loss(probs, g.labels, g.labeled_mask)
        loss = loss.with_entity(ent.value, config.entity_weight, ent.active)
    return loss, (acts, pos_p, neg_p, probs)


def compute_loss(g: KnowledgeGraph, norms: NormCoefficients, params: ModelParams,
                 negatives, config: TrainConfig) -> LossBreakdown:
    """Total joint loss for fixed negatives, given as (heads, relations, tails) arrays."""
    return _forward(g, norms, params, negatives, config)[0]


def loss_and_grads(g: KnowledgeGraph, norms: NormCoefficients, params: ModelParams,
                   negatives, config: TrainConfig) -> Tuple[LossBreakdown, ModelParams]:
    loss, (acts, pos_p, neg_p, probs) = _forward(g, norms, params, negatives, config)
    h = acts.final
    neg_h, neg_r, neg_t = negatives

    grad_pos, grad_neg = relation_loss_grad(pos_p, neg_p, config.neg_weight)
    grad_h, grad_dec = score_backward(grad_pos, pos_p, h, g.heads, g.relations, g.tails, params)
    grad_h_neg, grad_dec_neg = score_backward(grad_neg, neg_p, h, neg_h, neg_r, neg_t, params)
    grad_h = grad_h + grad_h_neg
    grad_dec = grad_dec + grad_dec_neg

    grad_cw = np.zeros_like(params.classifier_W)
    grad_cb = np.zeros_like(params.classifier_b)
    if probs is not None and loss.entity_active:
        grad_probs = config.entity_weight * entity_loss_grad(probs, g.labels, g.labeled_mask)
        grad_cw, grad_cb, grad_h_cls = classify_backward(grad_probs, probs, h, params)
        grad_h = grad_h + grad_h_cls

    layer_grads, grad_emb = encode_backward(g, norms, params, acts, grad_h)
    grads = ModelParams(grad_emb, layer_grads, grad_cw, grad_cb, grad_dec, params.decoder_form)
    return loss, grads


def _check_finite(loss: LossBreakdown, epoch: int):
    for component, value in loss.components().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(epoch, component, value)


#
# Training
#

def train(g: KnowledgeGraph, config: TrainConfig, valid_triples=None, known=None) -> Tuple[ModelParams, TrainHistory]:
    """
    One full-batch step per epoch: encode, score every training triple and
    k fresh negatives per triple, backpropagate, update.
    """
    config.validate()
    if not len(g):
        raise ValidationError("training graph has no triples")

    rng = np.random.default_rng(config.seed)
    params = init_params(g.num_entities, g.num_relations, g.num_classes, config, rng)
    norms = norm_coefficients(g)
    sampler = NegativeSampler(g, rng)
    state = OptimizerState.initial(params, config.optimizer)
    history = TrainHistory()

    for epoch in range(1, config.num_epochs + 1):
        negatives = negatives_as_arrays(sampler.sample(g.triples, config.negatives))
        loss, grads = loss_and_grads(g, norms, params, negatives, config)
        _check_finite(loss, epoch)
        history.losses.append(loss)
        logger.info(
            f"epoch {epoch}/{config.num_epochs} loss={loss.total:.6f} "
            f"(pos={loss.relation_pos:.4f} neg={loss.relation_neg:.4f} entity={loss.entity:.4f})"
        )

        params, state = optimizer_step(params, grads, state, config)

        if config.eval_every and valid_triples and epoch % config.eval_every == 0:
            report = evaluate_relations(params, g, valid_triples, k_eval=1, seed=config.seed, known=known)
            history.evaluations.append((epoch, report))
            logger.info(f"epoch {epoch} validation auc={report.auc:.4f} f1={report.f1:.4f}")

    history.exhausted_negatives = sampler.exhausted
    return params, history


#
# Gradient Check
#

class GradCheckReport(NamedTuple):
    max_rel_err: float
    worst_parameter: str
    num_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < GRAD_TOLERANCE


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    diff = abs(analytic - numeric)
    if diff == 0.0:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), floor)


def grad_check(g: KnowledgeGraph, config: TrainConfig, step: float = FD_STEP) -> GradCheckReport:
    """
    Compares the analytic gradient of the full joint loss against central
    finite differences for every scalar parameter. Negatives are sampled once
    and held fixed. Cost is two forward passes per scalar, so keep graphs tiny.
    """
    config.validate()
    if g.num_entities > 10:
        logger.warning(f"gradient check on {g.num_entities} entities will be slow")

    rng = np.random.default_rng(config.seed)
    params = init_params(g.num_entities, g.num_relations, g.num_classes, config, rng)
    norms = norm_coefficients(g)
    negatives = negatives_as_arrays(NegativeSampler(g, rng).sample(g.triples, config.negatives))
    _, grads = loss_and_grads(g, norms, params, negatives, config)

    worst, worst_name, checked = -1.0, "", 0
    perturbed = params.copy()
    for (name, arr), (_, grad) in zip(perturbed.named_arrays(), grads.named_arrays()):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            f_plus = compute_loss(g, norms, perturbed, negatives, config).total
            arr[idx] = old - step
            f_minus = compute_loss(g, norms, perturbed, negatives, config).total
            arr[idx] = old

            err = relative_error(float(grad[idx]), (f_plus - f_minus) / (2.0 * step))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{', '.join(str(i) for i in idx)}]"

    return GradCheckReport(max(worst, 0.0), worst_name, checked)


# (name, num_entities, num_relations, triples, labels); -1 marks an unlabeled entity
TOPOLOGIES = (
    ("single-edge", 2, 1, [(0, 0, 1)], [0, 1]),
    ("chain", 4, 1, [(0, 0, 1), (1, 0, 2), (2, 0, 3)], [0, 1, 0, 1]),
    ("star", 6, 2, [(0, 0, 1), (0, 1, 2), (0, 0, 3), (4, 1, 0), (5, 0, 0)], [0, 1, 1, 1, 0, 0]),
    ("cycle", 5, 1, [(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 4), (4, 0, 0)], [0, 0, 1, 1, 1]),
    ("multi-relation", 6, 2, [(0, 0, 1), (0, 1, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (4, 0, 0)],
     [0, 1, -1, 1, 0, -1]),
)

# (num_layers, hidden_dim, decoder_form, relational)
VARIANTS = tuple(
    (layers, dim, form, relational)
    for relational in (False, True)
    for form in DECODER_FORMS
    for dim in (2, 4)
    for layers in (1, 2)
)


def topology_graph(name: str) -> KnowledgeGraph:
    for topo_name, n_ent, n_rel, triples, labels in TOPOLOGIES:
        if topo_name == name:
            return build_graph(triples, n_ent, n_rel, labels=labels, num_classes=2)
    raise KeyError(name)


def gradcheck_suite(seed: int = 42, dim: Optional[int] = None, layers: Optional[int] = None,
                    seeds_per_topology: int = 3) -> List[Tuple[str, GradCheckReport]]:
    """
    Runs grad_check over every built-in topology with `seeds_per_topology`
    seeds each, cycling through VARIANTS. Reports the worst run per topology.
    """
    results = []
    run = 0
    for topo_name, *_ in TOPOLOGIES:
        g = topology_graph(topo_name)
        worst: Optional[GradCheckReport] = None
        for s in range(seeds_per_topology):
            v_layers, v_dim, form, relational = VARIANTS[run % len(VARIANTS)]
            run += 1
            config = TrainConfig(
                num_layers=layers or v_layers, hidden_dim=dim or v_dim, decoder_form=form,
                relational=relational, negatives=2, seed=seed + s,
            )
            report = grad_check(g, config)
            if worst is None or report.max_rel_err > worst.max_rel_err:
                worst = report
        results.append((topo_name, worst))
    return results
