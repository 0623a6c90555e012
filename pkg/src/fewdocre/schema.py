"""Relation-type schema management.

Covers cross-corpus overlap detection between relation ontologies, the
leakage-preventing removal of shared types, and the fixed assignment of
the remaining types to train/dev/test sets. The packaged default split
ships as a data file so benchmark builds are exactly reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .corpus import Corpus

log = logging.getLogger(__name__)


class SplitConfigError(Exception):
    """A split or overlap-map config file is inconsistent."""


@dataclass(frozen=True)
class SchemaSplit:
    """Pairwise-disjoint relation-type sets plus the removal record."""

    name: str
    train_types: frozenset[str]
    dev_types: frozenset[str]
    test_types: frozenset[str]
    removed_types: dict[str, str]

    @property
    def all_types(self) -> frozenset[str]:
        return self.train_types | self.dev_types | self.test_types

    def set_for(self, which: str) -> frozenset[str]:
        try:
            return {"train": self.train_types, "dev": self.dev_types, "test": self.test_types}[which]
        except KeyError:
            raise ValueError(f"unknown split set {which!r}") from None


@dataclass(frozen=True)
class OverlapEntry:
    foreign: str
    local: Optional[str]
    present_in_local: bool


@dataclass(frozen=True)
class OverlapMap:
    """Mapping of a foreign ontology's type ids onto local type ids."""

    name: str
    entries: tuple[OverlapEntry, ...]


def compute_overlap(overlap_map: OverlapMap, corpus_schema: frozenset[str] | set[str]) -> frozenset[str]:
    """Local type ids that the map reaches and that exist in ``corpus_schema``."""
    return frozenset(
        e.local for e in overlap_map.entries if e.local is not None and e.local in corpus_schema
    )


def strip_relation_types(corpus: Corpus, types: Iterable[str]) -> Corpus:
    """Remove every triple of the given types and shrink the schema.

    Documents, entities, and mentions are untouched. Types not present in
    the corpus schema are ignored with a warning.
    """
    types = frozenset(types)
    unknown = types - corpus.schema
    if unknown:
        log.warning("strip_relation_types: %s not in schema of %r, ignoring", sorted(unknown), corpus.name)
    doomed = types & corpus.schema
    if not doomed:
        return corpus

    docs = []
    for doc in corpus.documents:
        kept = tuple(t for t in doc.triples if t.relation not in doomed)
        docs.append(doc if len(kept) == len(doc.triples) else replace(doc, triples=kept))
    return Corpus(corpus.name, tuple(docs), corpus.schema - doomed)


def _split_from_config(cfg: dict, source: str) -> SchemaSplit:
    try:
        train = list(cfg["train"])
        dev = list(cfg["dev"])
        test = list(cfg["test"])
    except KeyError as exc:
        raise SplitConfigError(f"{source}: missing set {exc}") from exc
    removed = dict(cfg.get("removed", {}))

    assigned: dict[str, str] = {}
    for set_name, ids in (("train", train), ("dev", dev), ("test", test), ("removed", removed)):
        for tid in ids:
            if tid in assigned:
                raise SplitConfigError(
                    f"{source}: type {tid!r} assigned to both {assigned[tid]!r} and {set_name!r}"
                )
            assigned[tid] = set_name
    return SchemaSplit(
        name=str(cfg.get("name", source)),
        train_types=frozenset(train),
        dev_types=frozenset(dev),
        test_types=frozenset(test),
        removed_types=removed,
    )


def load_split(path: str | Path) -> SchemaSplit:
    """Load a split config file; every type must appear exactly once."""
    path = Path(path)
    cfg = json.loads(path.read_text(encoding="utf-8"))
    return _split_from_config(cfg, str(path))


def default_split() -> SchemaSplit:
    """The packaged 62/16/16 split of the DocRED relation types."""
    cfg = json.loads(resources.files("fewdocre.data").joinpath("docred_split.json").read_text())
    return _split_from_config(cfg, "packaged docred_split.json")


def _overlap_from_config(cfg: dict, source: str) -> OverlapMap:
    entries = tuple(
        OverlapEntry(str(e["foreign"]), e.get("local"), bool(e.get("present", False)))
        for e in cfg.get("entries", [])
    )
    locals_present = [e.local for e in entries if e.present_in_local and e.local is not None]
    if len(locals_present) != len(set(locals_present)):
        raise SplitConfigError(f"{source}: overlap map is not injective on present entries")
    return OverlapMap(str(cfg.get("name", source)), entries)


def load_overlap_map(path: str | Path) -> OverlapMap:
    path = Path(path)
    return _overlap_from_config(json.loads(path.read_text(encoding="utf-8")), str(path))


def default_overlap_map() -> OverlapMap:
    """The packaged sciERC-to-Wikidata relation-type correspondence."""
    cfg = json.loads(resources.files("fewdocre.data").joinpath("scierc_overlap.json").read_text())
    return _overlap_from_config(cfg, "packaged scierc_overlap.json")


def docred_full_schema() -> frozenset[str]:
    """All 96 DocRED relation types: the packaged split plus the removed pair."""
    split = default_split()
    return split.all_types | frozenset(split.removed_types)


def apply_default_pipeline(corpus: Corpus) -> tuple[Corpus, SchemaSplit]:
    """Strip the overlapping types found by the packaged map, return split."""
    shared = compute_overlap(default_overlap_map(), corpus.schema)
    return strip_relation_types(corpus, shared), default_split()
