import numpy as np
import pytest

from kgreason.graph import build_graph
from kgreason.io import synth
from kgreason.train import TrainConfig, train


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() with respect to every entry of x, perturbed in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        f_plus = f()
        x[idx] = old - step
        f_minus = f()
        x[idx] = old
        grad[idx] = (f_plus - f_minus) / (2 * step)
    return grad


def max_rel_err(a, b, floor=1e-4) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


def random_graph(num_entities, num_relations, num_triples, seed, labels=None, num_classes=None):
    rng = np.random.default_rng(seed)
    triples = set()
    while len(triples) < num_triples:
        h, t = rng.integers(0, num_entities, size=2)
        if h != t:
            triples.add((int(h), int(rng.integers(0, num_relations)), int(t)))
    return build_graph(sorted(triples), num_entities, num_relations, labels=labels, num_classes=num_classes)


@pytest.fixture
def single_edge():
    return build_graph([(0, 0, 1)], 2, 1)


@pytest.fixture
def chain():
    return build_graph([(0, 0, 1), (1, 0, 2)], 3, 1)


@pytest.fixture
def small_labeled():
    return random_graph(6, 2, 8, seed=11, labels=[0, 1, 2, -1, 1, 0], num_classes=3)


@pytest.fixture(scope="session")
def planted():
    return synth(200, 3, 4, seed=42)


@pytest.fixture(scope="session")
def planted_model(planted):
    """Default config, 200 epochs, on the planted training split."""
    return train(planted.graph, TrainConfig())
