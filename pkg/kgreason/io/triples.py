"""
Tab-separated triple and label files, and the Dataset that ties splits,
vocabularies and the training graph together.

    triples:  head<TAB>relation<TAB>tail
    labels:   entity<TAB>class
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..errors import ParseError, ValidationError
from ..graph import KnowledgeGraph, Triple, build_graph
from .vocab import Vocab

logger = logging.getLogger(__name__)

SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv")
LABEL_FILE = "labels.tsv"


class LoadedTriples(NamedTuple):
    triples: List[Triple]
    lines: List[int]
    entities: Vocab
    relations: Vocab


class LoadedLabels(NamedTuple):
    # one entry per entity id, -1 when unlabeled
    labels: np.ndarray
    classes: Vocab


def _records(path, num_fields: int) -> Iterator[Tuple[int, List[str]]]:
    try:
        fp = open(path, "rb")
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e.strerror}") from e

    with fp:
        for line_no, raw in enumerate(fp, 1):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                raise ParseError(path, line_no, "invalid UTF-8") from None
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != num_fields:
                raise ParseError(path, line_no, f"expected {num_fields} tab-separated fields, got {len(fields)}")
            yield line_no, fields


def load_triples(path, entities: Optional[Vocab] = None, relations: Optional[Vocab] = None) -> LoadedTriples:
    """
    Parses a triple file, interning names into the given vocabs (new ones are
    created when omitted). With frozen vocabs an unknown name is a ParseError.
    """
    entities = entities if entities is not None else Vocab(kind="entity")
    relations = relations if relations is not None else Vocab(kind="relation")

    triples, lines = [], []
    for line_no, (head, rel, tail) in _records(path, 3):
        try:
            t = Triple(entities.intern(head), relations.intern(rel), entities.intern(tail))
        except ValidationError as e:
            raise ParseError(path, line_no, str(e)) from None
        triples.append(t)
        lines.append(line_no)

    return LoadedTriples(triples, lines, entities, relations)


def load_labels(path, entities: Vocab, classes: Optional[Vocab] = None) -> LoadedLabels:
    classes = classes if classes is not None else Vocab(kind="class")
    labels = np.full(len(entities), -1, dtype=np.int64)

    for line_no, (name, cls) in _records(path, 2):
        ent = entities.get(name)
        if ent is None:
            raise ParseError(path, line_no, f"unknown entity {name!r}")
        try:
            c = classes.intern(cls)
        except ValidationError as e:
            raise ParseError(path, line_no, str(e)) from None
        if labels[ent] >= 0 and labels[ent] != c:
            raise ParseError(path, line_no, f"entity {name!r} already labeled {classes.name(labels[ent])!r}")
        labels[ent] = c

    return LoadedLabels(labels, classes)


def write_triples(path, triples: Sequence[Sequence[int]], entities: Vocab, relations: Vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for h, r, t in triples:
            fp.write(f"{entities.name(h)}\t{relations.name(r)}\t{entities.name(t)}\n")


#
# Dataset
#

@dataclass
class Dataset:
    graph: KnowledgeGraph
    train_triples: List[Triple]
    valid_triples: List[Triple]
    test_triples: List[Triple]
    entity_vocab: Vocab
    relation_vocab: Vocab
    class_vocab: Vocab
    labels: Optional[np.ndarray] = None
    # planted (source class, target class) per relation id; synthetic data only
    rules: Optional[List[Tuple[int, int]]] = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_vocab)

    @property
    def num_relations(self) -> int:
        return len(self.relation_vocab)

    @property
    def num_classes(self) -> int:
        return len(self.class_vocab)

    def __repr__(self):
        return (f"<Dataset entities={self.num_entities} relations={self.num_relations} "
                f"train={len(self.train_triples)} valid={len(self.valid_triples)} test={len(self.test_triples)}>")


def _assemble(train: LoadedTriples, valid: List[Triple], test: List[Triple], labels: Optional[LoadedLabels],
              rules=None) -> Dataset:
    entities, relations = train.entities, train.relations
    classes = labels.classes if labels is not None else Vocab(kind="class")
    label_arr = None
    if labels is not None:
        # entities first seen after the label file was read stay unlabeled
        label_arr = np.full(len(entities), -1, dtype=np.int64)
        label_arr[:labels.labels.size] = labels.labels

    g = build_graph(
        train.triples, len(entities), len(relations),
        labels=label_arr, num_classes=len(classes) if labels is not None else None, lines=train.lines,
    )
    if len(g) < len(train.triples):
        logger.warning(f"dropped {len(train.triples) - len(g)} duplicate training triples")

    return Dataset(g, list(train.triples), list(valid), list(test), entities, relations, classes, label_arr, rules)


def load_dataset(train, valid=None, test=None, labels=None) -> Dataset:
    """
    Loads the splits in (train, valid, test) order through one pair of vocabs,
    so ids follow first appearance across all files.
    """
    tr = load_triples(train)
    va = load_triples(valid, tr.entities, tr.relations).triples if valid is not None else []
    te = load_triples(test, tr.entities, tr.relations).triples if test is not None else []
    lab = load_labels(labels, tr.entities) if labels is not None else None
    return _assemble(tr, va, te, lab)


def write_dataset(dataset: Dataset, directory) -> List[Path]:
    """Writes train/valid/test (and labels when present) as TSV. Returns the paths written."""
    directory = Path(directory)
    written = []
    splits = (dataset.train_triples, dataset.valid_triples, dataset.test_triples)
    for name, triples in zip(SPLIT_FILES, splits):
        path = directory / name
        write_triples(path, triples, dataset.entity_vocab, dataset.relation_vocab)
        written.append(path)

    if dataset.labels is not None:
        path = directory / LABEL_FILE
        with open(path, "w", encoding="utf-8", newline="\n") as fp:
            for ent, c in enumerate(dataset.labels):
                if c >= 0:
                    fp.write(f"{dataset.entity_vocab.name(ent)}\t{dataset.class_vocab.name(c)}\n")
        written.append(path)

    return written
