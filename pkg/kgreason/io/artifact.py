"""
Self-describing model container.

    KGR1\n
    {json header, sorted keys, one line}\n
    <raw little-endian float64 payload>

The header carries the training config, the vocabularies, a tensor directory
(name, shape, byte offset into the payload, byte count) and the SHA-256 of the
payload. Tensors appear in ModelParams.named_arrays() order followed by
`graph.triples`, the training triples as an n x 3 float64 block.
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Tuple

import numpy as np

from ..errors import (
    ArtifactError, ArtifactShapeError, ArtifactVersionError, ChecksumError, TruncatedPayloadError,
)
from ..graph import KnowledgeGraph, build_graph
from ..model import ModelParams, assemble_params, param_shapes
from ..train import TrainConfig
from .vocab import Vocab

FORMAT_VERSION = "KGR1"
PAYLOAD_DTYPE = np.dtype("<f8")
GRAPH_TENSOR = "graph.triples"


@dataclass
class ModelArtifact:
    config: TrainConfig
    params: ModelParams
    entity_vocab: Vocab
    relation_vocab: Vocab
    class_vocab: Vocab
    graph_triples: np.ndarray
    version: str = FORMAT_VERSION

    def graph(self) -> KnowledgeGraph:
        """The training graph the params were fit on, unlabeled."""
        return build_graph(self.graph_triples, len(self.entity_vocab), len(self.relation_vocab))

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        triples = np.asarray(self.graph_triples, dtype=np.float64).reshape(-1, 3)
        return self.params.named_arrays() + [(GRAPH_TENSOR, triples)]


def _header(artifact: ModelArtifact, directory, checksum: str) -> bytes:
    header = {
        "format": artifact.version,
        "config": artifact.config.to_dict(),
        "vocab": {
            "entities": artifact.entity_vocab.names,
            "relations": artifact.relation_vocab.names,
            "classes": artifact.class_vocab.names,
        },
        "tensors": directory,
        "payload_sha256": checksum,
    }
    return json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def save_model(artifact: ModelArtifact, path) -> Path:
    directory, chunks, offset = [], [], 0
    for name, arr in artifact.tensors():
        raw = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    payload = b"".join(chunks)
    header = _header(artifact, directory, hashlib.sha256(payload).hexdigest())

    path = Path(path)
    with open(path, "wb") as fp:
        fp.write(FORMAT_VERSION.encode("ascii") + b"\n")
        fp.write(header + b"\n")
        fp.write(payload)
    return path


def _split_file(path) -> Tuple[str, dict, bytes]:
    with open(path, "rb") as fp:
        data = fp.read()

    magic, sep, rest = data.partition(b"\n")
    if not sep or not magic.startswith(b"KGR"):
        raise ArtifactError(f"{path}: not a model artifact")
    magic = magic.decode("ascii", errors="replace")
    if magic != FORMAT_VERSION:
        raise ArtifactVersionError(f"{path}: unsupported artifact version {magic!r}, expected {FORMAT_VERSION!r}")

    raw_header, sep, payload = rest.partition(b"\n")
    if not sep:
        raise TruncatedPayloadError(f"{path}: header is not terminated")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{path}: malformed header: {e}") from None
    if header.get("format") != magic:
        raise ArtifactVersionError(f"{path}: header version {header.get('format')!r} does not match {magic!r}")
    return magic, header, payload


class TensorEntry(NamedTuple):
    name: str
    shape: Tuple[int, ...]
    offset: int
    nbytes: int


def _directory(path, raw) -> List[TensorEntry]:
    """Validates the header's tensor directory: tensors are packed back to back from offset 0."""
    entries, running = [], 0
    try:
        for pos, item in enumerate(raw):
            shape = tuple(item["shape"])
            entry = TensorEntry(str(item["name"]), shape, item["offset"], item["nbytes"])
            if not all(isinstance(v, int) and v >= 0 for v in shape + (entry.offset, entry.nbytes)):
                raise ArtifactError(f"{path}: tensor directory entry {pos} has a malformed shape, offset or size")
            if entry.offset != running:
                raise ArtifactError(f"{path}: {entry.name} starts at byte {entry.offset}, expected {running}")
            running += entry.nbytes
            entries.append(entry)
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"{path}: tensor directory entry is missing {e}") from None
    return entries


def load_model(path) -> ModelArtifact:
    magic, header, payload = _split_file(path)
    try:
        raw_directory = header["tensors"]
        config = TrainConfig.from_dict(header["config"])
        vocab = header["vocab"]
        entities = Vocab(vocab["entities"], kind="entity")
        relations = Vocab(vocab["relations"], kind="relation")
        classes = Vocab(vocab["classes"], kind="class")
        checksum = header["payload_sha256"]
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"{path}: header is missing {e}") from None
    directory = _directory(path, raw_directory)

    expected = sum(entry.nbytes for entry in directory)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, directory needs {expected}")
    if len(payload) > expected:
        raise ArtifactError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    shapes = param_shapes(len(entities), len(relations), len(classes), config)
    names = [name for name, _ in shapes] + [GRAPH_TENSOR]
    if [entry.name for entry in directory] != names:
        raise ArtifactShapeError(f"{path}: tensor directory does not match the configured model layout")

    arrays = []
    for entry, (name, shape) in zip(directory, shapes + [(GRAPH_TENSOR, None)]):
        stored = entry.shape
        if shape is not None and stored != tuple(shape):
            raise ArtifactShapeError(f"{path}: {name} has shape {stored}, model expects {tuple(shape)}")
        count = int(np.prod(stored, dtype=np.int64))
        if entry.nbytes != count * PAYLOAD_DTYPE.itemsize:
            raise ArtifactShapeError(f"{path}: {name} stores {entry.nbytes} bytes for shape {stored}")
        arr = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=entry.offset).reshape(stored)
        arrays.append(arr.astype(np.float64))

    triples = arrays.pop()
    if triples.ndim != 2 or triples.shape[1] != 3:
        raise ArtifactShapeError(f"{path}: {GRAPH_TENSOR} must be n x 3, got {triples.shape}")
    params = assemble_params(arrays, config.num_layers, config.relational, config.decoder_form)
    return ModelArtifact(config, params, entities, relations, classes, triples.astype(np.int64), magic)
