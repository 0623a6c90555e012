"""Annotated-document corpus data model and ingestion.

A corpus is a set of documents, each carrying tokenized sentences,
coreference-clustered entities, and relation triples between entities.
Two ingestion adapters normalize the DocRED and sciERC release formats
into the same in-memory model; a line-delimited JSON cache format
(``corpus/v1``) decouples everything downstream from the source formats.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger(__name__)

CORPUS_FORMAT = "corpus/v1"


class CorpusError(Exception):
    """Base class for corpus-level failures."""


class CorpusParseError(CorpusError):
    """A source file does not match the expected release format."""


class CorpusValidationError(CorpusError):
    """A loaded corpus violates a structural invariant."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        head = "; ".join(str(v) for v in report.violations[:3])
        more = "" if len(report.violations) <= 3 else f" (+{len(report.violations) - 3} more)"
        super().__init__(f"{len(report.violations)} corpus violation(s): {head}{more}")


@dataclass(frozen=True)
class Mention:
    """One entity mention: a token span inside a single sentence.

    ``token_end`` is exclusive, so the span covers
    ``sentences[sentence_index][token_start:token_end]``.
    """

    sentence_index: int
    token_start: int
    token_end: int
    surface: str = ""


@dataclass(frozen=True)
class Entity:
    """A coreference cluster of mentions referring to one entity."""

    entity_id: int
    mentions: tuple[Mention, ...]
    entity_type: Optional[str] = None


@dataclass(frozen=True)
class RelationTriple:
    """Directed relation instance between two entities of a document."""

    head: int
    relation: str
    tail: int


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    triples: tuple[RelationTriple, ...]

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def triples_by_type(self) -> dict[str, list[RelationTriple]]:
        out: dict[str, list[RelationTriple]] = {}
        for t in self.triples:
            out.setdefault(t.relation, []).append(t)
        return out

    def relation_types(self) -> frozenset[str]:
        return frozenset(t.relation for t in self.triples)


@dataclass(frozen=True)
class Corpus:
    """Immutable document collection plus the relation-type schema in force."""

    name: str
    documents: tuple[Document, ...]
    schema: frozenset[str]

    @cached_property
    def _index(self) -> dict[str, Document]:
        return {d.doc_id: d for d in self.documents}

    def document(self, doc_id: str) -> Document:
        try:
            return self._index[doc_id]
        except KeyError:
            raise KeyError(f"no document {doc_id!r} in corpus {self.name!r}") from None

    def __len__(self) -> int:
        return len(self.documents)


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    relation_type_count: int
    mean_candidate_pairs_per_doc: float
    mean_words_per_doc: float
    mean_sentences_per_doc: float
    nota_fraction: float


@dataclass(frozen=True)
class Violation:
    doc_id: str
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.doc_id}] {self.kind}: {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        rows = [
            {"doc_id": v.doc_id, "kind": v.kind, "detail": v.detail}
            for v in self.violations
        ]
        return json.dumps({"ok": self.ok, "violations": rows}, indent=2, sort_keys=True)


def candidate_pairs(doc: Document) -> list[tuple[int, int]]:
    """All ordered (head, tail) entity-index pairs of a document, head != tail.

    Pairs are emitted in lexicographic entity-index order; every pair that
    holds no triple is a NOTA instance because annotations are complete.
    """
    n = len(doc.entities)
    return [(h, t) for h in range(n) for t in range(n) if h != t]


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Document, schema, candidate-pair, and NOTA-rate statistics.

    A pair holding multiple relation types still counts once when computing
    the NOTA fraction; the fraction is pooled over all documents.
    """
    docs = corpus.documents
    if not docs:
        log.warning("corpus_stats: corpus %r is empty, all statistics are zero", corpus.name)
        return CorpusStats(0, 0, 0.0, 0.0, 0.0, 0.0)

    total_pairs = 0
    positive_pairs = 0
    total_words = 0
    total_sents = 0
    for doc in docs:
        n = len(doc.entities)
        total_pairs += n * (n - 1)
        positive_pairs += len({(t.head, t.tail) for t in doc.triples})
        total_words += doc.token_count
        total_sents += len(doc.sentences)

    nota = 1.0 - positive_pairs / total_pairs if total_pairs else 0.0
    return CorpusStats(
        doc_count=len(docs),
        relation_type_count=len(corpus.schema),
        mean_candidate_pairs_per_doc=total_pairs / len(docs),
        mean_words_per_doc=total_words / len(docs),
        mean_sentences_per_doc=total_sents / len(docs),
        nota_fraction=nota,
    )


def validate(corpus: Corpus) -> ValidationReport:
    """Check every structural invariant; violations are the payload, not errors."""
    out: list[Violation] = []
    seen_ids: set[str] = set()
    for doc in corpus.documents:
        if doc.doc_id in seen_ids:
            out.append(Violation(doc.doc_id, "duplicate_doc_id", "doc_id occurs more than once"))
        seen_ids.add(doc.doc_id)
        out.extend(_validate_document(doc, corpus.schema))
    return ValidationReport(tuple(out))


def _validate_document(doc: Document, schema: frozenset[str]) -> list[Violation]:
    out: list[Violation] = []
    n_sent = len(doc.sentences)
    for ent in doc.entities:
        if not ent.mentions:
            out.append(Violation(doc.doc_id, "entity_without_mentions", f"entity {ent.entity_id}"))
            continue
        if list(ent.mentions) != sorted(ent.mentions, key=lambda m: (m.sentence_index, m.token_start)):
            out.append(Violation(doc.doc_id, "mentions_unsorted", f"entity {ent.entity_id}"))
        for m in ent.mentions:
            if not 0 <= m.sentence_index < n_sent:
                out.append(
                    Violation(
                        doc.doc_id,
                        "mention_sentence_out_of_range",
                        f"entity {ent.entity_id}, sentence {m.sentence_index}",
                    )
                )
                continue
            sent_len = len(doc.sentences[m.sentence_index])
            if not (0 <= m.token_start < m.token_end <= sent_len):
                out.append(
                    Violation(
                        doc.doc_id,
                        "mention_span_invalid",
                        f"entity {ent.entity_id}, sentence {m.sentence_index}, "
                        f"span [{m.token_start}, {m.token_end}) vs length {sent_len}",
                    )
                )

    n_ent = len(doc.entities)
    seen_triples: set[RelationTriple] = set()
    for t in doc.triples:
        if t.head == t.tail:
            out.append(Violation(doc.doc_id, "reflexive_triple", f"({t.head}, {t.relation}, {t.tail})"))
        for side, idx in (("head", t.head), ("tail", t.tail)):
            if not 0 <= idx < n_ent:
                out.append(
                    Violation(doc.doc_id, "dangling_entity_reference", f"{side} index {idx} of {t.relation}")
                )
        if t.relation not in schema:
            out.append(Violation(doc.doc_id, "relation_not_in_schema", t.relation))
        if t in seen_triples:
            out.append(Violation(doc.doc_id, "duplicate_triple", f"({t.head}, {t.relation}, {t.tail})"))
        seen_triples.add(t)
    return out


# ---------------------------------------------------------------------------
# DocRED ingestion


def load_docred(path: str | Path, partition: str) -> Corpus:
    """Load one DocRED release file (``train`` or ``dev`` partition).

    Coreference clusters in ``vertexSet`` become :class:`Entity` records;
    ``labels`` become triples (duplicates are dropped). The returned corpus
    passes :func:`validate`.
    """
    if partition not in ("train", "dev"):
        raise ValueError(f"partition must be 'train' or 'dev', got {partition!r}")
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise CorpusParseError(f"{path}: expected a top-level list of documents")

    docs = []
    for i, rec in enumerate(raw):
        docs.append(_parse_docred_document(rec, i))
    return _finish(f"docred-{partition}", docs)


def _parse_docred_document(rec: dict, index: int) -> Document:
    def fail(field: str, why: str) -> CorpusParseError:
        return CorpusParseError(f"document {index}: field {field!r}: {why}")

    if not isinstance(rec, dict):
        raise CorpusParseError(f"document {index}: expected an object")
    title = rec.get("title")
    if not isinstance(title, str) or not title:
        raise fail("title", "missing or not a non-empty string")
    sents = rec.get("sents")
    if not isinstance(sents, list) or not all(isinstance(s, list) for s in sents):
        raise fail("sents", "expected a list of token lists")
    sentences = tuple(tuple(str(tok) for tok in s) for s in sents)

    vertex_set = rec.get("vertexSet")
    if not isinstance(vertex_set, list):
        raise fail("vertexSet", "expected a list of mention clusters")
    entities = []
    for eid, cluster in enumerate(vertex_set):
        if not isinstance(cluster, list) or not cluster:
            raise fail("vertexSet", f"cluster {eid} is not a non-empty list")
        mentions = []
        etype = None
        for m in cluster:
            try:
                sent_id = int(m["sent_id"])
                start, end = int(m["pos"][0]), int(m["pos"][1])
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise fail("vertexSet", f"cluster {eid} has a malformed mention: {exc}") from exc
            mentions.append(Mention(sent_id, start, end, str(m.get("name", ""))))
            etype = etype or m.get("type")
        mentions.sort(key=lambda m: (m.sentence_index, m.token_start, m.token_end))
        entities.append(Entity(eid, tuple(mentions), etype))

    labels = rec.get("labels", [])
    if not isinstance(labels, list):
        raise fail("labels", "expected a list")
    triples = []
    seen = set()
    for j, lab in enumerate(labels):
        try:
            head, tail, rel = int(lab["h"]), int(lab["t"]), str(lab["r"])
        except (KeyError, TypeError, ValueError) as exc:
            raise fail("labels", f"label {j} is malformed: {exc}") from exc
        key = (head, rel, tail)
        if key in seen:
            continue
        seen.add(key)
        triples.append(RelationTriple(head, rel, tail))

    return Document(title, sentences, tuple(entities), tuple(triples))


# ---------------------------------------------------------------------------
# sciERC ingestion


def load_scierc(path: str | Path) -> Corpus:
    """Load a sciERC release file (one JSON object per line).

    sciERC spans use document-level, inclusive token offsets; they are
    converted to per-sentence exclusive spans. Spans grouped by a
    coreference cluster form one entity; remaining singleton spans become
    single-mention entities. Relation spans are resolved to entity indices.
    """
    path = Path(path)
    docs = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"{path}:{i + 1}: not valid JSON: {exc}") from exc
            docs.append(_parse_scierc_document(rec, i))
    return _finish("scierc", docs)


def _parse_scierc_document(rec: dict, index: int) -> Document:
    doc_id = str(rec.get("doc_key", f"doc{index}"))
    sentences = tuple(tuple(str(t) for t in s) for s in rec.get("sentences", []))

    # Document-level token offset of each sentence start.
    starts = []
    off = 0
    for s in sentences:
        starts.append(off)
        off += len(s)
    total = off

    def localize(span: Sequence[int]) -> Mention:
        s, e = int(span[0]), int(span[1])
        if not (0 <= s <= e < total):
            raise CorpusParseError(f"document {index}: span [{s}, {e}] out of document bounds")
        sent_idx = 0
        for k, st in enumerate(starts):
            if st <= s:
                sent_idx = k
        st = starts[sent_idx]
        if e >= st + len(sentences[sent_idx]):
            raise CorpusParseError(f"document {index}: span [{s}, {e}] crosses a sentence boundary")
        surface = " ".join(sentences[sent_idx][s - st : e - st + 1])
        return Mention(sent_idx, s - st, e - st + 1, surface)

    # Collect all annotated spans: cluster members and per-sentence ner spans.
    span_to_entity: dict[tuple[int, int], int] = {}
    entities: list[Entity] = []
    for cluster in rec.get("clusters", []):
        eid = len(entities)
        mentions = []
        for span in cluster:
            key = (int(span[0]), int(span[1]))
            if key in span_to_entity:
                continue
            span_to_entity[key] = eid
            mentions.append(localize(span))
        if mentions:
            mentions.sort(key=lambda m: (m.sentence_index, m.token_start, m.token_end))
            entities.append(Entity(eid, tuple(mentions), None))

    for sent_spans in rec.get("ner", []):
        for span in sent_spans:
            key = (int(span[0]), int(span[1]))
            if key in span_to_entity:
                continue
            eid = len(entities)
            span_to_entity[key] = eid
            etype = str(span[2]) if len(span) > 2 else None
            entities.append(Entity(eid, (localize(span),), etype))

    triples = []
    seen = set()
    for sent_rels in rec.get("relations", []):
        for rel in sent_rels:
            h_key = (int(rel[0]), int(rel[1]))
            t_key = (int(rel[2]), int(rel[3]))
            rtype = str(rel[4])
            for key in (h_key, t_key):
                if key not in span_to_entity:
                    raise CorpusValidationError(
                        ValidationReport(
                            (
                                Violation(
                                    doc_id,
                                    "relation_span_unknown",
                                    f"span [{key[0]}, {key[1]}] matches no annotated entity span",
                                ),
                            )
                        )
                    )
            head, tail = span_to_entity[h_key], span_to_entity[t_key]
            if (head, rtype, tail) in seen:
                continue
            seen.add((head, rtype, tail))
            triples.append(RelationTriple(head, rtype, tail))

    return Document(doc_id, sentences, tuple(entities), tuple(triples))


def _finish(name: str, docs: list[Document]) -> Corpus:
    schema = frozenset(t.relation for d in docs for t in d.triples)
    corpus = Corpus(name, tuple(docs), schema)
    report = validate(corpus)
    if not report.ok:
        raise CorpusValidationError(report)
    return corpus


def merge_corpora(name: str, *corpora: Corpus) -> Corpus:
    docs = tuple(d for c in corpora for d in c.documents)
    schema = frozenset().union(*(c.schema for c in corpora)) if corpora else frozenset()
    merged = Corpus(name, docs, schema)
    report = validate(merged)
    if not report.ok:
        raise CorpusValidationError(report)
    return merged


# ---------------------------------------------------------------------------
# Canonical cache format: one header line, then one JSON object per document.


def _document_to_json(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "sentences": [list(s) for s in doc.sentences],
        "entities": [
            {
                "type": e.entity_type,
                "mentions": [
                    {"sent": m.sentence_index, "start": m.token_start, "end": m.token_end, "surface": m.surface}
                    for m in e.mentions
                ],
            }
            for e in doc.entities
        ],
        "triples": [{"h": t.head, "r": t.relation, "t": t.tail} for t in doc.triples],
    }


def _document_from_json(rec: dict) -> Document:
    entities = tuple(
        Entity(
            eid,
            tuple(
                Mention(m["sent"], m["start"], m["end"], m.get("surface", ""))
                for m in e["mentions"]
            ),
            e.get("type"),
        )
        for eid, e in enumerate(rec["entities"])
    )
    triples = tuple(RelationTriple(t["h"], t["r"], t["t"]) for t in rec["triples"])
    sentences = tuple(tuple(s) for s in rec["sentences"])
    return Document(rec["doc_id"], sentences, entities, triples)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the canonical line-delimited cache file."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format": CORPUS_FORMAT,
            "name": corpus.name,
            "schema": sorted(corpus.schema),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for doc in corpus.documents:
            fh.write(json.dumps(_document_to_json(doc), sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    """Load a canonical cache file written by :func:`save_corpus`."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CorpusParseError(f"{path}: empty file")
        header = json.loads(header_line)
        if header.get("format") != CORPUS_FORMAT:
            raise CorpusParseError(f"{path}: unsupported format {header.get('format')!r}")
        docs = [_document_from_json(json.loads(line)) for line in fh if line.strip()]
    corpus = Corpus(header["name"], tuple(docs), frozenset(header["schema"]))
    report = validate(corpus)
    if not report.ok:
        raise CorpusValidationError(report)
    return corpus


def corpus_hash(corpus: Corpus) -> str:
    """Stable content hash used to tie episode files to their source corpus."""
    h = hashlib.sha256()
    h.update(json.dumps(sorted(corpus.schema)).encode())
    for doc in corpus.documents:
        h.update(json.dumps(_document_to_json(doc), sort_keys=True).encode())
    return h.hexdigest()
