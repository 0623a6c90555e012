"""From documents to relation representations.

The pipeline is: insert entity markers, encode the marked token sequence
(builtin hash encoder or a precomputed embedding file), pool token rows
into entity vectors, and concatenate head and tail vectors into a
candidate-pair representation. Encoders are frozen feature providers;
everything trainable lives in the model head.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache, cached_property
from pathlib import Path
from typing import Iterable, Literal, Optional

import numpy as np

from .corpus import Corpus, Document, Entity, candidate_pairs

OPEN_MARKER = "<e>"
CLOSE_MARKER = "</e>"
MARKER_RULE_VERSION = 1
EXCHANGE_FORMAT_VERSION = 1

PoolingMode = Literal["marker", "mention_mean"]


class EncodingShapeError(ValueError):
    """Dimension or row-count mismatch between related arrays."""


class EmbeddingLookupError(KeyError):
    """A document id is missing from a precomputed embedding file."""


@dataclass(frozen=True)
class MarkedDocument:
    """A document flattened to one token sequence with boundary markers.

    ``token_origin`` maps each marked position to its source ``(sentence,
    token)`` coordinate, or ``None`` for a marker token; stripping the
    marker positions recovers the original token sequence exactly.
    ``marker_index`` maps ``(entity_id, mention_ordinal)`` to the flat
    position of that mention's opening marker.
    """

    doc_id: str
    tokens: tuple[str, ...]
    token_origin: tuple[Optional[tuple[int, int]], ...]
    marker_index: dict[tuple[int, int], int]
    overlapping_mentions: tuple[str, ...] = ()

    @cached_property
    def position_of(self) -> dict[tuple[int, int], int]:
        return {org: i for i, org in enumerate(self.token_origin) if org is not None}


def strip_markers(marked: MarkedDocument) -> tuple[str, ...]:
    return tuple(tok for tok, org in zip(marked.tokens, marked.token_origin) if org is not None)


def insert_entity_markers(doc: Document) -> MarkedDocument:
    """Wrap every mention of every entity in the same two marker tokens.

    Placement is deterministic: at each boundary, closing markers come
    first (inner mentions close before outer ones), then opening markers
    (outer mentions open before inner ones). Overlapping non-nested
    mentions are placed by the same rule and flagged.
    """
    per_sentence: dict[int, list[tuple[int, int, int, int]]] = {}
    for ent in doc.entities:
        for mi, m in enumerate(ent.mentions):
            per_sentence.setdefault(m.sentence_index, []).append(
                (m.token_start, m.token_end, ent.entity_id, mi)
            )

    tokens: list[str] = []
    origin: list[Optional[tuple[int, int]]] = []
    marker_index: dict[tuple[int, int], int] = {}
    overlaps: list[str] = []

    for s, sent in enumerate(doc.sentences):
        mentions = per_sentence.get(s, [])
        for a in mentions:
            for b in mentions:
                if a[0] < b[0] < a[1] < b[1]:
                    overlaps.append(
                        f"sentence {s}: [{a[0]},{a[1]}) of entity {a[2]} crosses [{b[0]},{b[1]}) of entity {b[2]}"
                    )
        opens: dict[int, list[tuple[int, int, int, int]]] = {}
        closes: dict[int, list[tuple[int, int, int, int]]] = {}
        for rec in mentions:
            opens.setdefault(rec[0], []).append(rec)
            closes.setdefault(rec[1], []).append(rec)

        for p in range(len(sent) + 1):
            for rec in sorted(closes.get(p, []), key=lambda r: (-r[0], -r[2], -r[3])):
                tokens.append(CLOSE_MARKER)
                origin.append(None)
            for rec in sorted(opens.get(p, []), key=lambda r: (-r[1], r[2], r[3])):
                marker_index[(rec[2], rec[3])] = len(tokens)
                tokens.append(OPEN_MARKER)
                origin.append(None)
            if p < len(sent):
                tokens.append(sent[p])
                origin.append((s, p))

    return MarkedDocument(
        doc_id=doc.doc_id,
        tokens=tuple(tokens),
        token_origin=tuple(origin),
        marker_index=marker_index,
        overlapping_mentions=tuple(overlaps),
    )


# ---------------------------------------------------------------------------
# Encoders


@dataclass(frozen=True)
class EncoderSpec:
    kind: Literal["builtin_hash", "precomputed_file"]
    d: int
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("embedding dimensionality must be positive")
        if self.kind == "precomputed_file" and not self.path:
            raise ValueError("precomputed_file encoder needs a path")


@dataclass(eq=False)
class TokenEmbeddings:
    doc_id: str
    matrix: np.ndarray  # (marked token count, d)


@lru_cache(maxsize=1_000_000)
def _ngram_vector(seed: int, d: int, gram: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{gram}".encode("utf-8"), digest_size=8).digest()
    gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    vec = gen.standard_normal(d)
    vec.flags.writeable = False
    return vec


@lru_cache(maxsize=500_000)
def _token_vector(seed: int, d: int, token: str) -> np.ndarray:
    """Unit-norm pseudo-random vector from the token's character n-grams."""
    text = token.lower()
    grams = [text[i : i + n] for n in (1, 2, 3) for i in range(max(0, len(text) - n + 1))]
    if not grams:
        grams = [""]
    vec = np.zeros(d)
    for g in grams:
        vec += _ngram_vector(seed, d, g)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec = _ngram_vector(seed, d, "\x00fallback").copy()
        norm = np.linalg.norm(vec)
    vec = vec / norm
    vec.flags.writeable = False
    return vec


_STORE_CACHE: dict[str, dict[str, np.ndarray]] = {}


def _open_store(path: str) -> dict[str, np.ndarray]:
    if path not in _STORE_CACHE:
        _, docs = read_embedding_file(path)
        _STORE_CACHE[path] = docs
    return _STORE_CACHE[path]


def encode_document(spec: EncoderSpec, marked: MarkedDocument) -> TokenEmbeddings:
    """One embedding row per marked token, from the encoder named by ``spec``."""
    if spec.kind == "builtin_hash":
        matrix = np.stack([_token_vector(spec.seed, spec.d, tok) for tok in marked.tokens]) \
            if marked.tokens else np.zeros((0, spec.d))
        return TokenEmbeddings(marked.doc_id, matrix)
    if spec.kind == "precomputed_file":
        store = _open_store(spec.path)
        if marked.doc_id not in store:
            raise EmbeddingLookupError(f"doc_id {marked.doc_id!r} not in embedding file {spec.path}")
        matrix = store[marked.doc_id]
        if matrix.shape[0] != len(marked.tokens):
            raise EncodingShapeError(
                f"doc {marked.doc_id!r}: embedding file has {matrix.shape[0]} rows, "
                f"marked document has {len(marked.tokens)} tokens"
            )
        return TokenEmbeddings(marked.doc_id, np.asarray(matrix, dtype=np.float64))
    raise ValueError(f"unknown encoder kind {spec.kind!r}")


def entity_embedding(
    embs: TokenEmbeddings,
    marked: MarkedDocument,
    entity: Entity,
    mode: PoolingMode = "marker",
) -> np.ndarray:
    """Mean over per-mention vectors: the opening-marker row in ``marker``
    mode, the mean of the mention's own token rows in ``mention_mean`` mode."""
    rows = []
    for mi, m in enumerate(entity.mentions):
        if mode == "marker":
            rows.append(embs.matrix[marked.marker_index[(entity.entity_id, mi)]])
        elif mode == "mention_mean":
            positions = [marked.position_of[(m.sentence_index, t)] for t in range(m.token_start, m.token_end)]
            rows.append(embs.matrix[positions].mean(axis=0))
        else:
            raise ValueError(f"unknown pooling mode {mode!r}")
    return np.mean(rows, axis=0)


def relation_embedding(head_vec: np.ndarray, tail_vec: np.ndarray) -> np.ndarray:
    """Head-then-tail concatenation; asymmetric by construction."""
    head_vec = np.asarray(head_vec)
    tail_vec = np.asarray(tail_vec)
    if head_vec.shape != tail_vec.shape:
        raise EncodingShapeError(f"head {head_vec.shape} vs tail {tail_vec.shape}")
    return np.concatenate([head_vec, tail_vec])


# ---------------------------------------------------------------------------
# Candidate-pair features


@dataclass(eq=False)
class RelationRepresentation:
    vector: np.ndarray  # (2d,)
    head: int
    tail: int
    doc_id: str
    labels: frozenset[str]


@dataclass(eq=False)
class DocFeatures:
    """All candidate-pair representations of one document."""

    doc_id: str
    pairs: tuple[tuple[int, int], ...]
    reps: np.ndarray  # (pair count, 2d)
    labels: tuple[frozenset[str], ...]


def document_relation_representations(
    doc: Document,
    marked: MarkedDocument,
    embs: TokenEmbeddings,
    mode: PoolingMode = "marker",
) -> list[RelationRepresentation]:
    feats = _doc_features(doc, marked, embs, mode)
    return [
        RelationRepresentation(feats.reps[i], h, t, doc.doc_id, feats.labels[i])
        for i, (h, t) in enumerate(feats.pairs)
    ]


def _doc_features(doc: Document, marked: MarkedDocument, embs: TokenEmbeddings, mode: PoolingMode) -> DocFeatures:
    pairs = tuple(candidate_pairs(doc))
    if not pairs:
        return DocFeatures(doc.doc_id, (), np.zeros((0, 2 * embs.matrix.shape[1])), ())
    ent_vecs = [entity_embedding(embs, marked, e, mode) for e in doc.entities]
    reps = np.stack([np.concatenate([ent_vecs[h], ent_vecs[t]]) for h, t in pairs])
    by_pair: dict[tuple[int, int], set[str]] = {}
    for t in doc.triples:
        by_pair.setdefault((t.head, t.tail), set()).add(t.relation)
    labels = tuple(frozenset(by_pair.get(p, frozenset())) for p in pairs)
    return DocFeatures(doc.doc_id, pairs, reps, labels)


class FeatureExtractor:
    """Caches per-document candidate-pair features for one encoder config.

    Cached representations are float32 (downstream math promotes to
    float64); ``max_cache_docs`` bounds the cache LRU-style so corpus-scale
    evaluation over wide embeddings stays within memory.
    """

    def __init__(
        self,
        corpus: Corpus,
        spec: EncoderSpec,
        mode: PoolingMode = "marker",
        max_cache_docs: Optional[int] = None,
    ):
        self.corpus = corpus
        self.spec = spec
        self.mode = mode
        self.max_cache_docs = max_cache_docs
        self._cache: OrderedDict[str, DocFeatures] = OrderedDict()

    def features(self, doc_id: str) -> DocFeatures:
        if doc_id in self._cache:
            self._cache.move_to_end(doc_id)
            return self._cache[doc_id]
        doc = self.corpus.document(doc_id)
        marked = insert_entity_markers(doc)
        embs = encode_document(self.spec, marked)
        feats = _doc_features(doc, marked, embs, self.mode)
        feats.reps = np.asarray(feats.reps, dtype=np.float32)
        self._cache[doc_id] = feats
        if self.max_cache_docs is not None and len(self._cache) > self.max_cache_docs:
            self._cache.popitem(last=False)
        return feats


# ---------------------------------------------------------------------------
# Embedding exchange file (binary, little-endian, 32-bit floats)
#
# Header: format version (u32), marker-rule version (u32), d (u32),
# document count (u32), then a u32-length-prefixed UTF-8 string recording
# the exporter's long-document windowing strategy (empty when unused).
# Per document: u32-length-prefixed UTF-8 doc_id, token count (u32),
# row-major float32 matrix.


def write_embedding_file(
    path: str | Path,
    d: int,
    docs: Iterable[tuple[str, np.ndarray]],
    *,
    marker_rule_version: int = MARKER_RULE_VERSION,
    strategy: str = "",
) -> None:
    docs = list(docs)
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<IIII", EXCHANGE_FORMAT_VERSION, marker_rule_version, d, len(docs)))
        raw = strategy.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        for doc_id, matrix in docs:
            matrix = np.ascontiguousarray(matrix, dtype="<f4")
            if matrix.ndim != 2 or matrix.shape[1] != d:
                raise EncodingShapeError(f"doc {doc_id!r}: matrix shape {matrix.shape} incompatible with d={d}")
            ident = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)) + ident)
            fh.write(struct.pack("<I", matrix.shape[0]))
            fh.write(matrix.tobytes())


def read_embedding_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load an exchange file; returns (header fields, doc_id -> float32 matrix)."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise EncodingShapeError(f"{path}: truncated header")
        version, marker_rule, d, count = struct.unpack("<IIII", head)
        if version != EXCHANGE_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported exchange format version {version}")
        if marker_rule != MARKER_RULE_VERSION:
            raise ValueError(f"{path}: marker rule version {marker_rule} != {MARKER_RULE_VERSION}")
        (slen,) = struct.unpack("<I", fh.read(4))
        strategy = fh.read(slen).decode("utf-8")
        docs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (ilen,) = struct.unpack("<I", fh.read(4))
            doc_id = fh.read(ilen).decode("utf-8")
            (rows,) = struct.unpack("<I", fh.read(4))
            buf = fh.read(rows * d * 4)
            if len(buf) != rows * d * 4:
                raise EncodingShapeError(f"{path}: truncated matrix for doc {doc_id!r}")
            matrix = np.frombuffer(buf, dtype="<f4").reshape(rows, d)
            if not np.isfinite(matrix).all():
                raise ValueError(f"{path}: non-finite embedding entries for doc {doc_id!r}")
            docs[doc_id] = matrix
    header = {
        "format_version": version,
        "marker_rule_version": marker_rule,
        "d": d,
        "doc_count": count,
        "strategy": strategy,
    }
    return header, docs


def export_builtin_embeddings(corpus: Corpus, spec: EncoderSpec, path: str | Path) -> None:
    """Round-trip helper: encode a whole corpus with the builtin encoder and
    write it in the exchange format."""
    rows = []
    for doc in corpus.documents:
        marked = insert_entity_markers(doc)
        rows.append((doc.doc_id, encode_document(spec, marked).matrix))
    write_embedding_file(path, spec.d, rows)
