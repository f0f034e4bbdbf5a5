"""
Forward and backward passes of the joint model: a graph-convolutional encoder,
a softmax entity classifier on the final embeddings, and a per-relation
bilinear decoder scoring (head, relation, tail).

Conventions: embeddings are rows, so a layer computes
    H' = act(Agg(H) @ W + H @ W0)
where Agg sums neighbor rows damped by 1/c_ij. Hidden layers use ReLU and the
final layer is linear so bilinear scores and logits can be negative.
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, ValidationError
from .graph import KnowledgeGraph, NormCoefficients
from .numeric import (
    Matrix, glorot_uniform, matmul, matmul_backward, relu, relu_backward,
    sigmoid, sigmoid_grad, softmax_backward, softmax_rows,
)

DECODER_FORMS = ("full", "diagonal")


@dataclass
class GcnLayer:
    W0: Matrix
    W: Optional[Matrix] = None
    # (num_relations, d_in, d_out); replaces W in relational mode
    W_rel: Optional[np.ndarray] = None

    @property
    def relational(self) -> bool:
        return self.W_rel is not None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.W0.shape


@dataclass
class ModelParams:
    embedding: Matrix
    layers: List[GcnLayer]
    classifier_W: Matrix
    classifier_b: np.ndarray
    decoder: np.ndarray
    decoder_form: str = "full"

    @property
    def num_entities(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_relations(self) -> int:
        return self.decoder.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier_b.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Every trainable array under a stable dotted path. Arrays are returned by reference."""
        out = [("embedding", self.embedding)]
        for l, layer in enumerate(self.layers):
            if layer.relational:
                out.append((f"layers.{l}.W_rel", layer.W_rel))
            else:
                out.append((f"layers.{l}.W", layer.W))
            out.append((f"layers.{l}.W0", layer.W0))
        out.append(("classifier.W", self.classifier_W))
        out.append(("classifier.b", self.classifier_b))
        out.append(("decoder", self.decoder))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        """Rebuild a params object of the same structure from arrays in named_arrays() order."""
        relational = bool(self.layers) and self.layers[0].relational
        return assemble_params(arrays, len(self.layers), relational, self.decoder_form)

    def map(self, fn) -> "ModelParams":
        return self.with_arrays([fn(a) for _, a in self.named_arrays()])

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def num_scalars(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


@dataclass
class NodeEmbeddings:
    """
    Retained forward state of the encoder. activations[0] is the embedding
    table and activations[L] the final representation.
    """
    activations: List[Matrix]
    pre_activations: List[Matrix] = field(default_factory=list)
    # per layer: (N, d_in) in shared mode, (R, N, d_in) in relational mode
    aggregates: List[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> Matrix:
        return self.activations[-1]

    @property
    def num_layers(self) -> int:
        return len(self.activations) - 1


#
# Initialization
#

def param_shapes(num_entities, num_relations, num_classes, config) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of every trainable array, in named_arrays() order."""
    d = config.hidden_dim
    num_classes = max(num_classes, 1)
    out = [("embedding", (num_entities, d))]
    for l in range(config.num_layers):
        if config.relational:
            out.append((f"layers.{l}.W_rel", (num_relations, d, d)))
        else:
            out.append((f"layers.{l}.W", (d, d)))
        out.append((f"layers.{l}.W0", (d, d)))
    out.append(("classifier.W", (d, num_classes)))
    out.append(("classifier.b", (num_classes,)))
    if config.decoder_form == "full":
        out.append(("decoder", (num_relations, d, d)))
    else:
        out.append(("decoder", (num_relations, d)))
    return out


def assemble_params(arrays: Sequence[np.ndarray], num_layers: int, relational: bool, decoder_form: str) -> ModelParams:
    """Inverse of named_arrays() for the given layout."""
    it = iter(arrays)
    embedding = next(it)
    layers = []
    for _ in range(num_layers):
        if relational:
            w_rel, w0 = next(it), next(it)
            layers.append(GcnLayer(W0=w0, W_rel=w_rel))
        else:
            w, w0 = next(it), next(it)
            layers.append(GcnLayer(W0=w0, W=w))
    cw, cb, dec = next(it), next(it), next(it)
    return ModelParams(embedding, layers, cw, cb, dec, decoder_form)


def init_params(num_entities, num_relations, num_classes, config, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero classifier bias."""
    if config.decoder_form not in DECODER_FORMS:
        raise ValidationError(f"unknown decoder form {config.decoder_form!r}")

    d = config.hidden_dim
    arrays = []
    for name, shape in param_shapes(num_entities, num_relations, num_classes, config):
        if name == "classifier.b":
            arrays.append(np.zeros(shape))
        elif name == "decoder" and len(shape) == 2:
            arrays.append(glorot_uniform(shape, rng, fan=(d, d)))
        else:
            arrays.append(glorot_uniform(shape, rng))
    return assemble_params(arrays, config.num_layers, config.relational, config.decoder_form)


def check_params(g: KnowledgeGraph, params: ModelParams):
    if params.num_entities != g.num_entities:
        raise ShapeError(f"embedding table has {params.num_entities} rows, graph has {g.num_entities} entities")
    if params.num_relations != g.num_relations:
        raise ShapeError(f"decoder has {params.num_relations} relations, graph has {g.num_relations}")
    d_in = params.dim
    for l, layer in enumerate(params.layers):
        w = layer.W_rel[0] if layer.relational and g.num_relations else layer.W
        if layer.W0.shape[0] != d_in or (w is not None and w.shape != layer.W0.shape):
            raise ShapeError(f"layer {l}: weights {layer.W0.shape} do not accept input dim {d_in}")
        if layer.relational and layer.W_rel.shape[0] != g.num_relations:
            raise ShapeError(f"layer {l}: {layer.W_rel.shape[0]} relation weights for {g.num_relations} relations")
        d_in = layer.W0.shape[1]


#
# Encoder
#

def _aggregate(h: Matrix, norms: NormCoefficients, mask=None) -> Matrix:
    t, s, w = norms.targets, norms.sources, norms.inverse
    if mask is not None:
        t, s, w = t[mask], s[mask], w[mask]
    out = np.zeros_like(h)
    np.add.at(out, t, w[:, None] * h[s])
    return out


def _aggregate_backward(grad: Matrix, norms: NormCoefficients, mask=None) -> Matrix:
    t, s, w = norms.targets, norms.sources, norms.inverse
    if mask is not None:
        t, s, w = t[mask], s[mask], w[mask]
    out = np.zeros_like(grad)
    np.add.at(out, s, w[:, None] * grad[t])
    return out


def encode(g: KnowledgeGraph, norms: NormCoefficients, params: ModelParams) -> NodeEmbeddings:
    check_params(g, params)
    h = params.embedding
    acts = NodeEmbeddings(activations=[h])
    last = len(params.layers) - 1

    for l, layer in enumerate(params.layers):
        try:
            if layer.relational:
                agg = np.stack([_aggregate(h, norms, norms.relations == r) for r in range(g.num_relations)]) \
                    if g.num_relations else np.zeros((0,) + h.shape)
                pre = matmul(h, layer.W0)
                for r in range(g.num_relations):
                    pre = pre + matmul(agg[r], layer.W_rel[r])
            else:
                agg = _aggregate(h, norms)
                pre = matmul(agg, layer.W) + matmul(h, layer.W0)
        except ShapeError as e:
            raise ShapeError(f"layer {l}: {e}") from e

        h = pre if l == last else relu(pre)
        acts.aggregates.append(agg)
        acts.pre_activations.append(pre)
        acts.activations.append(h)

    return acts


def encode_backward(
    g: KnowledgeGraph, norms: NormCoefficients, params: ModelParams,
    acts: NodeEmbeddings, grad_final: Matrix,
) -> Tuple[List[GcnLayer], Matrix]:
    """
    Adjoint of encode. Returns per-layer weight gradients (same structure as
    params.layers) and the gradient with respect to the embedding table.
    """
    if grad_final.shape != acts.final.shape:
        raise ShapeError(f"final gradient {grad_final.shape} does not match embeddings {acts.final.shape}")

    grad_h = grad_final
    last = len(params.layers) - 1
    layer_grads: List[Optional[GcnLayer]] = [None] * len(params.layers)

    for l in range(last, -1, -1):
        layer = params.layers[l]
        h_in = acts.activations[l]
        agg = acts.aggregates[l]
        grad_pre = grad_h if l == last else relu_backward(grad_h, acts.pre_activations[l])

        grad_h_self, grad_W0 = matmul_backward(grad_pre, h_in, layer.W0)
        grad_h = grad_h_self
        if layer.relational:
            grad_W_rel = np.zeros_like(layer.W_rel)
            for r in range(g.num_relations):
                grad_agg, grad_W_rel[r] = matmul_backward(grad_pre, agg[r], layer.W_rel[r])
                grad_h = grad_h + _aggregate_backward(grad_agg, norms, norms.relations == r)
            layer_grads[l] = GcnLayer(W0=grad_W0, W_rel=grad_W_rel)
        else:
            grad_agg, grad_W = matmul_backward(grad_pre, agg, layer.W)
            grad_h = grad_h + _aggregate_backward(grad_agg, norms)
            layer_grads[l] = GcnLayer(W0=grad_W0, W=grad_W)

    return layer_grads, grad_h


#
# Entity Classifier
#

def classify(h_final: Matrix, params: ModelParams) -> Matrix:
    if h_final.shape[1] != params.classifier_W.shape[0]:
        raise ShapeError(f"classifier expects dim {params.classifier_W.shape[0]}, got {h_final.shape}")
    return softmax_rows(matmul(h_final, params.classifier_W) + params.classifier_b)


def classify_backward(
    grad_probs: Matrix, probs: Matrix, h_final: Matrix, params: ModelParams,
) -> Tuple[Matrix, np.ndarray, Matrix]:
    """Returns (grad W_c, grad b_c, grad h_final)."""
    grad_logits = softmax_backward(grad_probs, probs)
    grad_h, grad_W = matmul_backward(grad_logits, h_final, params.classifier_W)
    return grad_W, grad_logits.sum(axis=0), grad_h


#
# Bilinear Decoder
#

def _check_relation(r, params: ModelParams):
    r = np.asarray(r)
    if r.size and (r.min() < 0 or r.max() >= params.num_relations):
        raise ValidationError(f"relation id out of range [0, {params.num_relations})")


def _raw_scores(h_heads, h_tails, relations, params: ModelParams) -> np.ndarray:
    if params.decoder_form == "full":
        return np.einsum("bi,bij,bj->b", h_heads, params.decoder[relations], h_tails)
    return np.sum(h_heads * params.decoder[relations] * h_tails, axis=1)


def score_relation(h_i, h_j, r: int, params: ModelParams) -> float:
    """sigmoid(h_i^T R_r h_j) for a single pair."""
    _check_relation(r, params)
    h_i = np.asarray(h_i, dtype=np.float64).reshape(1, -1)
    h_j = np.asarray(h_j, dtype=np.float64).reshape(1, -1)
    if h_i.shape[1] != params.dim or h_j.shape[1] != params.dim:
        raise ShapeError(f"decoder expects dim {params.dim}, got {h_i.shape[1]} and {h_j.shape[1]}")
    return float(sigmoid(_raw_scores(h_i, h_j, np.array([r]), params))[0])


def score_triples(h: Matrix, heads, relations, tails, params: ModelParams) -> np.ndarray:
    _check_relation(relations, params)
    if h.shape[1] != params.dim:
        raise ShapeError(f"decoder expects dim {params.dim}, got embeddings {h.shape}")
    return sigmoid(_raw_scores(h[heads], h[tails], relations, params))


def score_backward(
    grad_probs: np.ndarray, probs: np.ndarray, h: Matrix,
    heads, relations, tails, params: ModelParams,
) -> Tuple[Matrix, np.ndarray]:
    """
    Adjoint of score_triples. Returns (grad h, grad decoder); contributions of
    repeated entities and relations are summed.
    """
    grad_s = grad_probs * sigmoid_grad(probs)
    h_heads, h_tails = h[heads], h[tails]
    grad_h = np.zeros_like(h)
    grad_dec = np.zeros_like(params.decoder)

    if params.decoder_form == "full":
        R = params.decoder[relations]
        grad_heads = grad_s[:, None] * np.einsum("bij,bj->bi", R, h_tails)
        grad_tails = grad_s[:, None] * np.einsum("bij,bi->bj", R, h_heads)
        np.add.at(grad_dec, relations, grad_s[:, None, None] * h_heads[:, :, None] * h_tails[:, None, :])
    else:
        D = params.decoder[relations]
        grad_heads = grad_s[:, None] * D * h_tails
        grad_tails = grad_s[:, None] * D * h_heads
        np.add.at(grad_dec, relations, grad_s[:, None] * h_heads * h_tails)

    np.add.at(grad_h, heads, grad_heads)
    np.add.at(grad_h, tails, grad_tails)
    return grad_h, grad_dec


def full_from_diagonal(params: ModelParams) -> ModelParams:
    """Same model with each diagonal relation vector expanded into a full matrix."""
    if params.decoder_form == "full":
        return params
    full = np.stack([np.diag(v) for v in params.decoder]) if params.num_relations else \
        np.zeros((0, params.dim, params.dim))
    return replace(params, decoder=full, decoder_form="full")
