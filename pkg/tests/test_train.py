import csv
import math

import numpy as np
import numpy.testing as npt
import pytest

import kgreason.train
from kgreason.errors import NonFiniteLossError, ShapeError, ValidationError
from kgreason.graph import Triple, build_graph, norm_coefficients
from kgreason.loss import LossBreakdown, NegativeSampler, negatives_as_arrays
from kgreason.model import GcnLayer, ModelParams, classify_backward, init_params
from kgreason.train import (
    TOPOLOGIES, OptimizerState, TrainConfig, adam_step, compute_loss, grad_check, gradcheck_suite, relative_error,
    sgd_step, topology_graph, train,
)

from .conftest import random_graph


def scalar_params(value=0.0) -> ModelParams:
    """The smallest complete model: every block holds one scalar."""
    one = lambda: np.full((1, 1), value)
    return ModelParams(one(), [GcnLayer(W0=one(), W=one())], one(), np.full(1, value), np.full((1, 1, 1), value))


def assert_params_equal(a: ModelParams, b: ModelParams):
    for (name, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
        npt.assert_array_equal(x, y, err_msg=name)


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig().validate()
        assert (config.num_layers, config.hidden_dim, config.num_epochs) == (2, 32, 200)
        assert (config.learning_rate, config.neg_weight, config.entity_weight) == (0.01, 1.0, 1.0)
        assert (config.negatives, config.seed, config.optimizer) == (1, 42, "adam")

    @pytest.mark.parametrize("field, value, message", [
        ("num_layers", 0, "num_layers"),
        ("hidden_dim", 0, "hidden_dim"),
        ("negatives", 0, "negatives"),
        ("learning_rate", 0.0, "learning_rate"),
        ("neg_weight", -1.0, "lambda"),
        ("entity_weight", -0.5, "alpha"),
        ("decoder_form", "tucker", "decoder_form"),
        ("optimizer", "rmsprop", "optimizer"),
        ("eval_every", -1, "eval_every"),
    ])
    def test_invalid(self, field, value, message):
        with pytest.raises(ValidationError, match=message):
            TrainConfig(**{field: value}).validate()

    def test_all_problems_reported(self):
        with pytest.raises(ValidationError, match="num_layers.*hidden_dim"):
            TrainConfig(num_layers=0, hidden_dim=0).validate()

    def test_dict_round_trip(self):
        config = TrainConfig(hidden_dim=7, decoder_form="diagonal", relational=True)
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_unknown_keys(self):
        with pytest.raises(ValidationError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})


class TestOptimizers:
    def test_adam_zero_grads_leave_params(self):
        params = scalar_params(0.3)
        new, state = adam_step(params, params.zeros_like(), OptimizerState.initial(params), lr=0.1)
        assert_params_equal(new, params)
        assert state.step == 1
        assert not any(m.any() for _, m in state.m.named_arrays())

    def test_adam_decays_moments(self):
        params = scalar_params(0.3)
        state = OptimizerState(3, params.map(np.ones_like), params.map(np.ones_like))
        _, new_state = adam_step(params, params.zeros_like(), state, lr=0.1, beta1=0.9, beta2=0.999)
        for (_, m), (_, v) in zip(new_state.m.named_arrays(), new_state.v.named_arrays()):
            npt.assert_allclose(m, 0.9)
            npt.assert_allclose(v, 0.999)

    def test_adam_first_step(self):
        params = scalar_params(0.0)
        grads = params.map(np.ones_like)
        new, _ = adam_step(params, grads, OptimizerState.initial(params), lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        for _, arr in new.named_arrays():
            npt.assert_allclose(arr, -0.1 / (1.0 + 1e-8), rtol=1e-12)

    def test_adam_moves_against_constant_gradient(self):
        params = scalar_params(0.0)
        grads = params.map(lambda a: np.full_like(a, -2.0))
        state = OptimizerState.initial(params)
        first, state = adam_step(params, grads, state, lr=0.05)
        second, _ = adam_step(first, grads, state, lr=0.05)
        assert 0.0 < first.embedding[0, 0] < second.embedding[0, 0]

    def test_adam_does_not_mutate_inputs(self):
        params = scalar_params(0.5)
        grads = params.map(np.ones_like)
        adam_step(params, grads, OptimizerState.initial(params), lr=0.1)
        assert params.embedding[0, 0] == 0.5

    def test_sgd_zero_rate(self):
        params = scalar_params(0.25)
        new, state = sgd_step(params, params.map(np.ones_like), OptimizerState(), 0.0)
        assert_params_equal(new, params)
        assert state.step == 1

    def test_sgd_step(self):
        params = scalar_params(1.0)
        new, _ = sgd_step(params, params.map(lambda a: np.full_like(a, 2.0)), OptimizerState(), 0.1)
        npt.assert_allclose(new.decoder, 0.8)

    def test_shape_mismatch(self):
        params = scalar_params()
        grads = params.copy()
        grads.decoder = np.zeros((1, 2, 2))
        with pytest.raises(ShapeError, match="decoder"):
            adam_step(params, grads, OptimizerState.initial(params), lr=0.1)
        with pytest.raises(ShapeError):
            sgd_step(params, grads, OptimizerState(), 0.1)


class TestTrain:
    def test_deterministic(self, small_labeled):
        config = TrainConfig(hidden_dim=4, num_epochs=5, negatives=2, seed=7)
        p1, h1 = train(small_labeled, config)
        p2, h2 = train(small_labeled, config)
        assert_params_equal(p1, p2)
        assert h1.losses == h2.losses

    def test_history_length(self, small_labeled):
        _, history = train(small_labeled, TrainConfig(hidden_dim=3, num_epochs=4))
        assert len(history) == 4

    def test_zero_epochs_returns_init(self, small_labeled):
        config = TrainConfig(hidden_dim=3, num_epochs=0, seed=5)
        params, history = train(small_labeled, config)
        expected = init_params(6, 2, 3, config, np.random.default_rng(5))
        assert_params_equal(params, expected)
        assert len(history) == 0

    def test_recorded_loss_matches_recomputation(self, small_labeled):
        config = TrainConfig(hidden_dim=4, num_epochs=1, negatives=3, seed=3)
        _, history = train(small_labeled, config)

        rng = np.random.default_rng(config.seed)
        params = init_params(6, 2, 3, config, rng)
        negatives = negatives_as_arrays(NegativeSampler(small_labeled, rng).sample(small_labeled.triples, 3))
        loss = compute_loss(small_labeled, norm_coefficients(small_labeled), params, negatives, config)
        assert history.losses[0].total == pytest.approx(loss.total, abs=1e-9)
        assert history.losses[0].entity_active

    def test_entity_weight_zero_matches_relation_only(self, small_labeled):
        base = dict(hidden_dim=4, num_epochs=5, seed=2)
        p_alpha0, _ = train(small_labeled, TrainConfig(entity_weight=0.0, **base))
        p_disabled, h_disabled = train(small_labeled, TrainConfig(entity_loss_enabled=False, **base))
        assert_params_equal(p_alpha0, p_disabled)
        assert not h_disabled.losses[0].entity_active

    def test_unlabeled_graph_leaves_classifier_untouched(self):
        g = random_graph(8, 2, 12, seed=4)
        config = TrainConfig(hidden_dim=3, num_epochs=3, optimizer="sgd", seed=4)
        params, _ = train(g, config)
        init = init_params(8, 2, 0, config, np.random.default_rng(4))
        npt.assert_array_equal(params.classifier_W, init.classifier_W)
        npt.assert_array_equal(params.classifier_b, init.classifier_b)
        assert not np.array_equal(params.decoder, init.decoder)

    def test_loss_decreases_on_planted_graph(self, planted):
        """Strictly decreasing total loss over the first ten epochs in at least nine of ten seeds."""
        decreasing = 0
        for seed in range(10):
            _, history = train(planted.graph, TrainConfig(num_epochs=10, seed=seed))
            totals = [loss.total for loss in history.losses]
            decreasing += all(b < a for a, b in zip(totals, totals[1:]))
        assert decreasing >= 9

    def test_validation_reports(self, planted):
        config = TrainConfig(hidden_dim=8, num_epochs=4, eval_every=2)
        _, history = train(planted.graph, config, valid_triples=planted.valid_triples)
        assert [epoch for epoch, _ in history.evaluations] == [2, 4]
        assert all(0.0 <= report.auc <= 1.0 for _, report in history.evaluations)

    def test_empty_graph_rejected(self):
        with pytest.raises(ValidationError):
            train(build_graph([], 3, 1), TrainConfig(num_epochs=1))

    def test_non_finite_loss_aborts(self, small_labeled, monkeypatch):
        monkeypatch.setattr(
            kgreason.train, "relation_loss",
            lambda pos, neg, lam: LossBreakdown(float("nan"), 0.0, 0.0, float("nan")),
        )
        with pytest.raises(NonFiniteLossError) as exc:
            train(small_labeled, TrainConfig(hidden_dim=3, num_epochs=3))
        assert exc.value.epoch == 1
        assert exc.value.component == "relation_pos"

    def test_history_csv(self, small_labeled, tmp_path):
        _, history = train(small_labeled, TrainConfig(hidden_dim=3, num_epochs=3))
        path = tmp_path / "history.csv"
        history.write_csv(path)
        with open(path) as fp:
            rows = list(csv.reader(fp))
        assert rows[0] == [
            "epoch", "relation_pos", "relation_neg", "entity", "total", "auc", "precision", "recall", "f1",
        ]
        assert len(rows) == 4
        assert float(rows[1][4]) == history.losses[0].total
        assert all(row[5:] == ["", "", "", ""] for row in rows[1:])

    def test_history_csv_carries_validation_curve(self, small_labeled, tmp_path):
        held_out = [t for t in [(0, 1, 5), (2, 0, 4), (5, 1, 3)] if Triple(*t) not in small_labeled.triple_set]
        _, history = train(small_labeled, TrainConfig(hidden_dim=3, num_epochs=4, eval_every=2), held_out)
        assert [epoch for epoch, _ in history.evaluations] == [2, 4]

        path = tmp_path / "history.csv"
        history.write_csv(path)
        with open(path) as fp:
            rows = list(csv.DictReader(fp))
        assert [row["auc"] == "" for row in rows] == [True, False, True, False]
        assert float(rows[3]["auc"]) == history.evaluations[1][1].auc
        assert 0.0 <= float(rows[1]["f1"]) <= 1.0


class TestGradCheck:
    @pytest.mark.parametrize("name", [t[0] for t in TOPOLOGIES])
    @pytest.mark.parametrize("form", ["full", "diagonal"])
    @pytest.mark.parametrize("relational", [False, True])
    def test_topologies(self, name, form, relational):
        config = TrainConfig(num_layers=2, hidden_dim=3, decoder_form=form, relational=relational, negatives=2)
        report = grad_check(topology_graph(name), config)
        assert report.max_rel_err < 1e-4, report.worst_parameter

    def test_suite_passes(self):
        results = gradcheck_suite(seed=42)
        assert [name for name, _ in results] == [t[0] for t in TOPOLOGIES]
        for name, report in results:
            assert report.passed, (name, report)

    def test_minimal_model(self):
        report = grad_check(topology_graph("single-edge"), TrainConfig(num_layers=1, hidden_dim=1))
        assert math.isfinite(report.max_rel_err)
        # embedding 2, W 1, W0 1, classifier 2 + 2, decoder 1
        assert report.num_checked == 9

    def test_sabotaged_backward_is_caught(self, monkeypatch):
        def flipped(grad_probs, probs, h_final, params):
            grad_W, grad_b, grad_h = classify_backward(grad_probs, probs, h_final, params)
            return -grad_W, grad_b, grad_h

        monkeypatch.setattr(kgreason.train, "classify_backward", flipped)
        report = grad_check(topology_graph("chain"), TrainConfig(num_layers=1, hidden_dim=2))
        assert report.max_rel_err > 0.1
        assert report.worst_parameter.startswith("classifier.W[")
        assert not report.passed

    def test_relative_error(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, -1.0) == 2.0
        assert relative_error(1e-9, 2e-9) == pytest.approx(1e-5)
