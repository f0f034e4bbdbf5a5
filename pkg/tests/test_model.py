import numpy as np
import numpy.testing as npt
import pytest

from kgreason.errors import ShapeError, ValidationError
from kgreason.graph import build_graph, norm_coefficients
from kgreason.loss import entity_loss_grad
from kgreason.model import (
    GcnLayer, ModelParams, classify, classify_backward, encode, encode_backward, full_from_diagonal,
    init_params, param_shapes, score_backward, score_relation, score_triples,
)
from kgreason.train import TrainConfig

from .conftest import max_rel_err, numeric_grad, random_graph


def make_params(embedding, layers, num_relations=1, num_classes=2, decoder=None, decoder_form="full"):
    embedding = np.asarray(embedding, dtype=np.float64)
    d = layers[-1].W0.shape[1] if layers else embedding.shape[1]
    if decoder is None:
        decoder = np.zeros((num_relations, d, d)) if decoder_form == "full" else np.zeros((num_relations, d))
    return ModelParams(embedding, layers, np.zeros((d, num_classes)), np.zeros(num_classes), decoder, decoder_form)


class TestInit:
    def test_shapes_follow_config(self):
        config = TrainConfig(num_layers=2, hidden_dim=4)
        params = init_params(5, 3, 2, config, np.random.default_rng(0))
        assert [(n, a.shape) for n, a in params.named_arrays()] == param_shapes(5, 3, 2, config)
        assert params.embedding.shape == (5, 4)
        assert params.decoder.shape == (3, 4, 4)
        assert not params.classifier_b.any()

    def test_named_array_order(self):
        config = TrainConfig(num_layers=2, hidden_dim=2, relational=True, decoder_form="diagonal")
        params = init_params(3, 2, 2, config, np.random.default_rng(0))
        assert [n for n, _ in params.named_arrays()] == [
            "embedding", "layers.0.W_rel", "layers.0.W0", "layers.1.W_rel", "layers.1.W0",
            "classifier.W", "classifier.b", "decoder",
        ]
        assert params.decoder.shape == (2, 2)

    def test_seeded(self):
        config = TrainConfig(hidden_dim=3)
        a = init_params(4, 2, 2, config, np.random.default_rng(9))
        b = init_params(4, 2, 2, config, np.random.default_rng(9))
        for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
            npt.assert_array_equal(x, y)

    def test_copy_is_independent(self):
        params = init_params(3, 1, 2, TrainConfig(hidden_dim=2), np.random.default_rng(0))
        clone = params.copy()
        clone.embedding[0, 0] += 1.0
        assert clone.embedding[0, 0] != params.embedding[0, 0]
        assert params.num_scalars() == clone.num_scalars()

    def test_unknown_decoder_form(self):
        with pytest.raises(ValidationError):
            init_params(3, 1, 2, TrainConfig(decoder_form="tucker"), np.random.default_rng(0))


class TestEncode:
    def test_two_node_hand_evaluation(self, single_edge):
        params = make_params([[1.0], [2.0]], [GcnLayer(W0=np.array([[0.0]]), W=np.array([[1.0]]))])
        acts = encode(single_edge, norm_coefficients(single_edge), params)
        npt.assert_allclose(acts.pre_activations[0], [[1.0], [0.5]], atol=1e-15)

    def test_isolated_node_keeps_self_term(self):
        g = build_graph([(0, 0, 1)], 3, 1)
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(3, 2))
        emb[2] = [-0.5, 1.5]
        eye = np.eye(2)
        layers = [GcnLayer(W0=eye, W=rng.normal(size=(2, 2))), GcnLayer(W0=eye, W=rng.normal(size=(2, 2)))]

        acts = encode(g, norm_coefficients(g), make_params(emb, layers))
        # hidden layer applies ReLU, the final layer is linear
        npt.assert_array_equal(acts.activations[1][2], [0.0, 1.5])
        npt.assert_array_equal(acts.final[2], [0.0, 1.5])

        single = encode(g, norm_coefficients(g), make_params(emb, layers[:1]))
        npt.assert_array_equal(single.final[2], [-0.5, 1.5])

    def test_zero_weights_propagate_zero(self):
        g = random_graph(6, 2, 8, seed=2)
        zeros = [GcnLayer(W0=np.zeros((3, 3)), W=np.zeros((3, 3))) for _ in range(3)]
        acts = encode(g, norm_coefficients(g), make_params(np.ones((6, 3)), zeros, num_relations=2))
        for h in acts.activations[1:]:
            assert not h.any()
        assert acts.num_layers == 3

    def test_relational_mode_with_shared_weights_matches_shared_mode(self):
        g = random_graph(6, 2, 10, seed=3)
        rng = np.random.default_rng(3)
        W, W0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        emb = rng.normal(size=(6, 3))
        shared = make_params(emb, [GcnLayer(W0=W0, W=W)], num_relations=2)
        relational = make_params(emb, [GcnLayer(W0=W0, W_rel=np.stack([W, W]))], num_relations=2)
        norms = norm_coefficients(g)
        npt.assert_allclose(encode(g, norms, relational).final, encode(g, norms, shared).final, atol=1e-12)

    def test_permutation_equivariance(self):
        g = build_graph([(0, 0, 1), (1, 0, 2), (3, 0, 4)], 5, 1)
        perm = np.array([3, 0, 4, 1, 2])
        inv = np.argsort(perm)
        g_perm = build_graph([(inv[h], r, inv[t]) for h, r, t in g.triples], 5, 1)

        params = init_params(5, 1, 2, TrainConfig(hidden_dim=3), np.random.default_rng(4))
        permuted = params.copy()
        permuted.embedding = params.embedding[perm]

        h = encode(g, norm_coefficients(g), params).final
        h_perm = encode(g_perm, norm_coefficients(g_perm), permuted).final
        # relabelling reorders the scatter-add, so rows agree to rounding rather than bit for bit
        npt.assert_allclose(h_perm, h[perm], rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch_names_layer(self, chain):
        layers = [GcnLayer(W0=np.ones((3, 3)), W=np.ones((3, 3))), GcnLayer(W0=np.ones((2, 3)), W=np.ones((2, 3)))]
        with pytest.raises(ShapeError, match="layer 1"):
            encode(chain, norm_coefficients(chain), make_params(np.ones((3, 3)), layers))

    def test_embedding_rows_must_match_entities(self, chain):
        params = init_params(4, 1, 2, TrainConfig(hidden_dim=2), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encode(chain, norm_coefficients(chain), params)


class TestEncodeBackward:
    def test_zero_cotangent(self):
        g = random_graph(5, 2, 6, seed=5)
        params = init_params(5, 2, 2, TrainConfig(hidden_dim=3), np.random.default_rng(5))
        norms = norm_coefficients(g)
        acts = encode(g, norms, params)
        layer_grads, grad_emb = encode_backward(g, norms, params, acts, np.zeros_like(acts.final))
        assert not grad_emb.any()
        for lg in layer_grads:
            assert not lg.W0.any() and not lg.W.any()

    def test_single_node_outer_product(self):
        g = build_graph([], 1, 1)
        rng = np.random.default_rng(6)
        params = make_params(rng.normal(size=(1, 3)), [GcnLayer(W0=rng.normal(size=(3, 3)), W=rng.normal(size=(3, 3)))])
        norms = norm_coefficients(g)
        acts = encode(g, norms, params)
        grad_final = rng.normal(size=(1, 3))
        layer_grads, _ = encode_backward(g, norms, params, acts, grad_final)
        npt.assert_allclose(layer_grads[0].W0, np.outer(params.embedding[0], grad_final[0]), atol=1e-15)
        assert not layer_grads[0].W.any()

    @pytest.mark.parametrize("relational", [False, True])
    def test_matches_finite_differences(self, relational):
        g = random_graph(4, 2, 5, seed=7)
        config = TrainConfig(num_layers=2, hidden_dim=3, relational=relational)
        params = init_params(4, 2, 2, config, np.random.default_rng(7))
        norms = norm_coefficients(g)
        weights = np.random.default_rng(8).normal(size=(4, 3))

        def scalarized():
            return float((weights * encode(g, norms, params).final).sum())

        acts = encode(g, norms, params)
        layer_grads, grad_emb = encode_backward(g, norms, params, acts, weights)
        assert max_rel_err(grad_emb, numeric_grad(scalarized, params.embedding)) < 1e-4
        for layer, lg in zip(params.layers, layer_grads):
            assert max_rel_err(lg.W0, numeric_grad(scalarized, layer.W0)) < 1e-4
            if relational:
                assert max_rel_err(lg.W_rel, numeric_grad(scalarized, layer.W_rel)) < 1e-4
            else:
                assert max_rel_err(lg.W, numeric_grad(scalarized, layer.W)) < 1e-4


class TestClassifier:
    def test_zero_weights_uniform(self):
        params = make_params(np.ones((4, 3)), [], num_classes=4)
        npt.assert_allclose(classify(np.ones((4, 3)), params), np.full((4, 4), 0.25))

    def test_bias_shift_invariance(self):
        rng = np.random.default_rng(9)
        params = make_params(np.ones((4, 3)), [], num_classes=3)
        params.classifier_W = rng.normal(size=(3, 3))
        params.classifier_b = rng.normal(size=3)
        h = rng.normal(size=(4, 3))
        before = classify(h, params)
        params.classifier_b = params.classifier_b + 7.5
        npt.assert_allclose(classify(h, params), before, atol=1e-12)

    def test_direct_formula(self):
        params = make_params(np.ones((1, 1)), [], num_classes=2)
        params.classifier_W = np.array([[1.0, -1.0]])
        probs = classify(np.array([[2.0]]), params)
        expected = 1.0 / (1.0 + np.exp(-4.0))
        npt.assert_allclose(probs, [[expected, 1.0 - expected]], atol=1e-12)
        assert probs[0, 0] == pytest.approx(0.982, abs=1e-3)

    def test_backward_closed_form(self):
        rng = np.random.default_rng(10)
        params = make_params(np.ones((1, 3)), [], num_classes=2)
        params.classifier_W = rng.normal(size=(3, 2))
        h = rng.normal(size=(1, 3))
        probs = classify(h, params)
        grad_probs = entity_loss_grad(probs, np.array([1]), np.array([True]))
        _, grad_b, _ = classify_backward(grad_probs, probs, h, params)
        npt.assert_allclose(grad_b, probs[0] - np.array([0.0, 1.0]), atol=1e-12)

    def test_backward_zero_upstream(self):
        params = make_params(np.ones((2, 3)), [], num_classes=2)
        probs = classify(np.ones((2, 3)), params)
        grad_W, grad_b, grad_h = classify_backward(np.zeros_like(probs), probs, np.ones((2, 3)), params)
        assert not grad_W.any() and not grad_b.any() and not grad_h.any()

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        params = make_params(np.ones((4, 3)), [], num_classes=3)
        params.classifier_W = rng.normal(size=(3, 3))
        params.classifier_b = rng.normal(size=3)
        h = rng.normal(size=(4, 3))
        weights = rng.normal(size=(4, 3))

        def scalarized():
            return float((weights * classify(h, params)).sum())

        probs = classify(h, params)
        grad_W, grad_b, grad_h = classify_backward(weights, probs, h, params)
        assert max_rel_err(grad_W, numeric_grad(scalarized, params.classifier_W)) < 1e-6
        assert max_rel_err(grad_b, numeric_grad(scalarized, params.classifier_b)) < 1e-6
        assert max_rel_err(grad_h, numeric_grad(scalarized, h)) < 1e-6


class TestDecoder:
    def test_zero_head_gives_half(self):
        params = make_params(np.ones((2, 3)), [], decoder=np.random.default_rng(0).normal(size=(1, 3, 3)))
        assert score_relation(np.zeros(3), np.ones(3), 0, params) == 0.5

    def test_identity_relation(self):
        params = make_params(np.ones((2, 3)), [], decoder=np.eye(3)[None])
        e = np.array([0.0, 1.0, 0.0])
        assert score_relation(e, e, 0, params) == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_full_and_diagonal_agree(self):
        rng = np.random.default_rng(12)
        diag = make_params(np.ones((5, 4)), [], num_relations=2, decoder=rng.normal(size=(2, 4)), decoder_form="diagonal")
        full = full_from_diagonal(diag)
        assert full.decoder.shape == (2, 4, 4)
        h = rng.normal(size=(5, 4))
        heads, rels, tails = np.array([0, 1, 2, 4]), np.array([0, 1, 1, 0]), np.array([3, 3, 0, 4])
        npt.assert_allclose(score_triples(h, heads, rels, tails, full), score_triples(h, heads, rels, tails, diag),
                            atol=1e-14)

    def test_symmetric_relation_scores_both_directions_alike(self):
        rng = np.random.default_rng(14)
        A = rng.normal(size=(4, 4))
        full = make_params(np.ones((2, 4)), [], decoder=(A + A.T)[None])
        diag = make_params(np.ones((2, 4)), [], decoder=rng.normal(size=(1, 4)), decoder_form="diagonal")
        for _ in range(10):
            h_i, h_j = rng.normal(size=4), rng.normal(size=4)
            for params in (full, diag):
                forward, backward = score_relation(h_i, h_j, 0, params), score_relation(h_j, h_i, 0, params)
                assert forward == pytest.approx(backward, abs=1e-12)

    def test_relation_out_of_range(self):
        params = make_params(np.ones((2, 2)), [], num_relations=1)
        with pytest.raises(ValidationError):
            score_relation(np.ones(2), np.ones(2), 1, params)

    def test_dimension_mismatch(self):
        params = make_params(np.ones((2, 2)), [], num_relations=1)
        with pytest.raises(ShapeError):
            score_relation(np.ones(3), np.ones(3), 0, params)

    def test_head_gradient_closed_form(self):
        rng = np.random.default_rng(13)
        R = rng.normal(size=(1, 3, 3))
        params = make_params(np.ones((2, 3)), [], decoder=R)
        h = rng.normal(size=(2, 3))
        heads, rels, tails = np.array([0]), np.array([0]), np.array([1])
        probs = score_triples(h, heads, rels, tails, params)
        grad_h, _ = score_backward(np.ones(1), probs, h, heads, rels, tails, params)
        npt.assert_allclose(grad_h[0], probs[0] * (1 - probs[0]) * R[0] @ h[1], atol=1e-14)

    @pytest.mark.parametrize("form", ["full", "diagonal"])
    def test_backward_matches_finite_differences(self, form):
        rng = np.random.default_rng(14)
        shape = (2, 3, 3) if form == "full" else (2, 3)
        params = make_params(np.ones((4, 3)), [], num_relations=2, decoder=rng.normal(size=shape), decoder_form=form)
        h = rng.normal(size=(4, 3))
        # repeated entities and relations must accumulate
        heads, rels, tails = np.array([0, 1, 0, 3]), np.array([0, 1, 0, 1]), np.array([1, 2, 3, 0])
        weights = rng.normal(size=4)

        def scalarized():
            return float((weights * score_triples(h, heads, rels, tails, params)).sum())

        probs = score_triples(h, heads, rels, tails, params)
        grad_h, grad_dec = score_backward(weights, probs, h, heads, rels, tails, params)
        assert max_rel_err(grad_h, numeric_grad(scalarized, h)) < 1e-6
        assert max_rel_err(grad_dec, numeric_grad(scalarized, params.decoder)) < 1e-6

    def test_backward_zero_upstream(self):
        params = make_params(np.ones((2, 2)), [], decoder=np.ones((1, 2, 2)))
        h = np.ones((2, 2))
        probs = score_triples(h, [0], [0], [1], params)
        grad_h, grad_dec = score_backward(np.zeros(1), probs, h, np.array([0]), np.array([0]), np.array([1]), params)
        assert not grad_h.any() and not grad_dec.any()
