from enum import IntEnum
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sortedcontainers import SortedList, SortedSet

from .errors import ValidationError


class Direction(IntEnum):
    OUT = 0
    IN = 1


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Neighbor(NamedTuple):
    entity: int
    relation: int
    direction: Direction


class KnowledgeGraph:
    """
    Immutable store of deduplicated training triples. Each triple contributes one
    neighbor entry to both of its endpoints, so message passing is bidirectional
    while the direction flag is still available to callers.
    """

    __slots__ = (
        'num_entities',
        'num_relations',
        'num_classes',
        'triples',
        'neighbors',
        'degree',
        'labels',
        'heads',
        'relations',
        'tails',
        '_triple_set',
    )

    def __init__(self, num_entities, num_relations, triples, neighbors, labels=None, num_classes=0):
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.triples: Tuple[Triple, ...] = tuple(triples)
        self.neighbors: Tuple[Tuple[Neighbor, ...], ...] = tuple(tuple(n) for n in neighbors)
        self.degree = np.array([len(n) for n in self.neighbors], dtype=np.int64)
        self.labels: Optional[np.ndarray] = labels
        self.num_classes = num_classes
        self._triple_set = frozenset(self.triples)

        idx = np.array(self.triples, dtype=np.int64).reshape(-1, 3)
        self.heads, self.relations, self.tails = idx[:, 0], idx[:, 1], idx[:, 2]

    @property
    def triple_set(self) -> frozenset:
        return self._triple_set

    @property
    def labeled_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.num_entities, dtype=bool)
        return self.labels >= 0

    @property
    def has_labels(self) -> bool:
        return bool(self.labeled_mask.any())

    def __len__(self):
        return len(self.triples)

    def __repr__(self):
        return (f"<KnowledgeGraph entities={self.num_entities} relations={self.num_relations} "
                f"triples={len(self.triples)}>")


def build_graph(
    triples: Iterable[Sequence[int]],
    num_entities: int,
    num_relations: int,
    labels=None,
    num_classes: Optional[int] = None,
    lines: Optional[Sequence[int]] = None,
) -> KnowledgeGraph:
    """
    Validates and deduplicates triples, then derives neighbor lists sorted by
    (neighbor, relation, direction). The same multiset of triples in any order
    produces the same graph.

    `lines` optionally carries the source line of every triple so validation
    errors can point back into the file.
    """
    unique = SortedSet()
    for pos, raw in enumerate(triples):
        t = Triple(*(int(v) for v in raw))
        if not (0 <= t.head < num_entities and 0 <= t.tail < num_entities and 0 <= t.relation < num_relations):
            where = f"line {lines[pos]}" if lines is not None else f"triple #{pos}"
            raise ValidationError(
                f"{where}: {tuple(t)} out of range for {num_entities} entities and {num_relations} relations"
            )
        unique.add(t)

    neighbors: List[SortedList] = [SortedList() for _ in range(num_entities)]
    for t in unique:
        neighbors[t.head].add(Neighbor(t.tail, t.relation, Direction.OUT))
        neighbors[t.tail].add(Neighbor(t.head, t.relation, Direction.IN))

    label_arr = None
    if labels is not None:
        label_arr = np.asarray(labels, dtype=np.int64)
        if label_arr.shape != (num_entities,):
            raise ValidationError(f"expected {num_entities} labels, got shape {label_arr.shape}")
        if num_classes is None:
            num_classes = int(label_arr.max()) + 1 if label_arr.size and label_arr.max() >= 0 else 0
        bad = (label_arr >= num_classes) | (label_arr < -1)
        if bad.any():
            ent = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"entity {ent} has label {label_arr[ent]} outside [0, {num_classes})")

    return KnowledgeGraph(
        num_entities, num_relations, list(unique), neighbors,
        labels=label_arr, num_classes=num_classes or 0,
    )


def contains_triple(g: KnowledgeGraph, t: Sequence[int]) -> bool:
    return Triple(*(int(v) for v in t)) in g.triple_set


class NormCoefficients:
    """
    Flattened neighbor entries of a graph with their normalization constants.
    Entry k says entity `targets[k]` receives from `sources[k]` through
    `relations[k]`, damped by 1 / `values[k]`.
    """

    __slots__ = ('targets', 'sources', 'relations', 'directions', 'values', 'inverse')

    def __init__(self, targets, sources, relations, directions, values):
        self.targets = targets
        self.sources = sources
        self.relations = relations
        self.directions = directions
        self.values = values
        self.inverse = 1.0 / values if values.size else values.copy()

    def __len__(self):
        return len(self.values)

    def coefficient(self, i: int, j: int) -> float:
        hits = np.flatnonzero((self.targets == i) & (self.sources == j))
        if not hits.size:
            raise KeyError((i, j))
        return float(self.values[hits[0]])


def norm_coefficients(g: KnowledgeGraph) -> NormCoefficients:
    """
    Symmetric GCN normalization with a self-loop adjustment:
    c_ij = sqrt((deg_i + 1) * (deg_j + 1)).
    """
    targets, sources, relations, directions = [], [], [], []
    for i, entries in enumerate(g.neighbors):
        for n in entries:
            targets.append(i)
            sources.append(n.entity)
            relations.append(n.relation)
            directions.append(int(n.direction))

    targets = np.array(targets, dtype=np.int64)
    sources = np.array(sources, dtype=np.int64)
    adj_degree = g.degree.astype(np.float64) + 1.0
    values = np.sqrt(adj_degree[targets] * adj_degree[sources])
    return NormCoefficients(
        targets, sources,
        np.array(relations, dtype=np.int64),
        np.array(directions, dtype=np.int64),
        values,
    )
