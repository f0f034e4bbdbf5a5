"""
Planted-structure knowledge graphs for desk-scale experiments.

Entities are split into balanced classes, and every relation gets a
(source class -> target class) rule. Inside each class, entities are further
grouped into affinity blocks. A relation maps each source block onto one
target block, and tails are drawn from that block only. The class rule is
what the classifier learns, and the block map is what separates positives from
uniformly corrupted negatives.
"""
import logging
from typing import Dict, List, Set, Tuple

import numpy as np

from ..errors import ValidationError
from ..graph import Triple
from .triples import Dataset, LoadedLabels, LoadedTriples, _assemble
from .vocab import Vocab

logger = logging.getLogger(__name__)

SPLIT_RATIOS = (0.8, 0.1, 0.1)
MAX_DRAWS_PER_TRIPLE = 20


def _check_bounds(num_entities, num_relations, num_classes, block_size, density):
    problems = []
    if num_classes < 1:
        problems.append(f"classes must be >= 1, got {num_classes}")
    if num_relations < 1:
        problems.append(f"relations must be >= 1, got {num_relations}")
    if num_entities < max(2 * num_classes, 2):
        problems.append(f"entities must be >= 2 x classes ({2 * max(num_classes, 1)}), got {num_entities}")
    if block_size < 1:
        problems.append(f"block size must be >= 1, got {block_size}")
    if not density > 0:
        problems.append(f"density must be > 0, got {density}")
    if problems:
        raise ValidationError("; ".join(problems))


class _Planter:
    """Draws rule-consistent triples for one seeded generator."""

    def __init__(self, num_entities, num_relations, num_classes, block_size, rng: np.random.Generator):
        self.rng = rng
        self.classes = rng.permutation(np.arange(num_entities) % num_classes)

        # class -> list of blocks, block = sorted entity array
        self.blocks: List[List[np.ndarray]] = []
        self.block_of = np.zeros(num_entities, dtype=np.int64)
        for c in range(num_classes):
            members = rng.permutation(np.flatnonzero(self.classes == c))
            blocks = [np.sort(b) for b in np.array_split(members, max(1, members.size // block_size))]
            for b_idx, block in enumerate(blocks):
                self.block_of[block] = b_idx
            self.blocks.append(blocks)

        perm = rng.permutation(num_classes)
        self.rules = [(int(perm[r % num_classes]), int(perm[(r + 1) % num_classes])) for r in range(num_relations)]
        self.shifts = [int(rng.integers(0, len(self.blocks[tgt]))) for _, tgt in self.rules]

        self.triples: List[Triple] = []
        self.seen: Set[Triple] = set()
        self.touched: Set[int] = set()
        self.per_relation = np.zeros(num_relations, dtype=np.int64)

    def target_block(self, r: int, head: int) -> np.ndarray:
        tgt_blocks = self.blocks[self.rules[r][1]]
        return tgt_blocks[(self.block_of[head] + self.shifts[r]) % len(tgt_blocks)]

    def add(self, t: Triple) -> bool:
        if t.head == t.tail or t in self.seen:
            return False
        self.seen.add(t)
        self.touched.update((t.head, t.tail))
        self.triples.append(t)
        self.per_relation[t.relation] += 1
        return True

    def draw(self, r: int) -> bool:
        src = self.rules[r][0]
        head = int(self.rng.choice(np.concatenate(self.blocks[src])))
        tail = int(self.rng.choice(self.target_block(r, head)))
        return self.add(Triple(head, r, tail))

    def cover(self, entity: int) -> bool:
        """Adds one triple touching `entity`, as head if possible, else as tail."""
        c = int(self.classes[entity])
        as_head = [r for r, (src, _) in enumerate(self.rules) if src == c]
        for r in self.rng.permutation(as_head) if as_head else ():
            block = self.target_block(int(r), entity)
            for tail in self.rng.permutation(block):
                if self.add(Triple(entity, int(r), int(tail))):
                    return True

        as_tail = [r for r, (_, tgt) in enumerate(self.rules) if tgt == c]
        for r in self.rng.permutation(as_tail) if as_tail else ():
            r = int(r)
            heads = [int(h) for h in np.concatenate(self.blocks[self.rules[r][0]])
                     if entity in self.target_block(r, int(h))]
            for head in self.rng.permutation(heads) if heads else ():
                if self.add(Triple(int(head), r, entity)):
                    return True
        return False


def synth(num_entities: int, num_relations: int, num_classes: int, seed: int = 42,
          block_size: int = 10, density: float = 5.0) -> Dataset:
    """
    Generates about density * num_entities rule-consistent triples, split
    80/10/10 into train/valid/test, with every appearing entity labeled by its
    planted class. Every entity keeps at least one triple in the train
    split. Names are e{i}, r{r} and c{c}; ids follow first appearance the
    same way load_dataset assigns them, so a written dataset reloads to
    identical ids.
    """
    _check_bounds(num_entities, num_relations, num_classes, block_size, density)
    rng = np.random.default_rng(seed)
    planter = _Planter(num_entities, num_relations, num_classes, block_size, rng)

    uncovered = []
    for e in range(num_entities):
        if e not in planter.touched and not planter.cover(e):
            uncovered.append(e)
    if uncovered:
        logger.warning(f"{len(uncovered)} entities have no rule-consistent triple and were left out")
    covering = set(planter.triples)

    total = int(round(density * num_entities))
    quota = np.full(num_relations, total // num_relations, dtype=np.int64)
    quota[:total % num_relations] += 1
    for r in range(num_relations):
        draws = 0
        budget = MAX_DRAWS_PER_TRIPLE * int(quota[r])
        while planter.per_relation[r] < quota[r] and draws < budget:
            planter.draw(r)
            draws += 1
        if planter.per_relation[r] < quota[r]:
            logger.warning(f"relation r{r}: only {planter.per_relation[r]} of {quota[r]} triples fit its blocks")

    order = rng.permutation(len(planter.triples))
    shuffled = [planter.triples[i] for i in order]
    n_valid = int(round(SPLIT_RATIOS[1] * len(shuffled)))
    n_test = int(round(SPLIT_RATIOS[2] * len(shuffled)))

    # coverage triples stay in train so every entity has a training edge
    held_out = [t for t in shuffled if t not in covering][:n_valid + n_test]
    held_set = set(held_out)
    splits = ([t for t in shuffled if t not in held_set], held_out[:n_valid], held_out[n_valid:])

    return _to_dataset(splits, planter)


def _to_dataset(splits, planter: _Planter) -> Dataset:
    entities, relations = Vocab(kind="entity"), Vocab(kind="relation")
    interned = []
    for split in splits:
        interned.append([
            Triple(entities.intern(f"e{t.head}"), relations.intern(f"r{t.relation}"), entities.intern(f"e{t.tail}"))
            for t in split
        ])
    train = LoadedTriples(interned[0], list(range(1, len(interned[0]) + 1)), entities, relations)

    # labels in entity-id order, the order write_dataset emits them
    classes = Vocab(kind="class")
    labels = np.full(len(entities), -1, dtype=np.int64)
    for ent, name in enumerate(entities.names):
        labels[ent] = classes.intern(f"c{planter.classes[int(name[1:])]}")

    rules: Dict[int, Tuple[int, int]] = {}
    for r, (src, tgt) in enumerate(planter.rules):
        rel = relations.get(f"r{r}")
        if rel is not None and f"c{src}" in classes and f"c{tgt}" in classes:
            rules[rel] = (classes[f"c{src}"], classes[f"c{tgt}"])

    return _assemble(
        train, interned[1], interned[2], LoadedLabels(labels, classes),
        rules=[rules.get(r, (-1, -1)) for r in range(len(relations))],
    )
