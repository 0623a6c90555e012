"""Episode construction for few-shot document-level relation extraction.

An episode pairs support documents (with complete triple annotations for
the episode's active types) with query documents to label. The test
protocol balances how often each relation type anchors an episode by
always picking a least-used type; training episodes optionally guarantee
at least one anchor-positive query document.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .corpus import Corpus, Document, corpus_hash

log = logging.getLogger(__name__)

EPISODE_FORMAT = "episodes/v1"

STRATEGY_TEST = "test_protocol"
STRATEGY_TRAIN_RANDOM = "train_random"
STRATEGY_TRAIN_ENSURE_POSITIVE = "train_ensure_positive"

Triple = tuple[int, str, int]


class SamplingError(Exception):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_support_docs: int = 1
    episode_count: int = 1000
    seed: int = 0
    strategy: str = STRATEGY_TEST
    queries_per_episode: int = 1
    max_episode_schema: Optional[int] = None
    # Whether the balancing counter counts every type of R_episode or only
    # the anchor. Counting the whole episode schema is the default.
    usage_counting: str = "episode_schema"
    ensure_positive_retries: int = 50

    def __post_init__(self):
        if self.episode_count <= 0:
            raise ValueError("episode_count must be positive")
        if self.n_support_docs < 1:
            raise ValueError("n_support_docs must be >= 1")
        if self.strategy not in (STRATEGY_TEST, STRATEGY_TRAIN_RANDOM, STRATEGY_TRAIN_ENSURE_POSITIVE):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.usage_counting not in ("episode_schema", "anchor_only"):
            raise ValueError(f"unknown usage_counting {self.usage_counting!r}")

    def to_json(self) -> dict:
        return {
            "n_support_docs": self.n_support_docs,
            "episode_count": self.episode_count,
            "seed": self.seed,
            "strategy": self.strategy,
            "queries_per_episode": self.queries_per_episode,
            "max_episode_schema": self.max_episode_schema,
            "usage_counting": self.usage_counting,
            "ensure_positive_retries": self.ensure_positive_retries,
        }


@dataclass(frozen=True)
class Episode:
    """One few-shot task instance.

    ``support_triples`` and ``gold_query_triples`` are already filtered to
    ``episode_schema``; every support or query pair absent from them is a
    NOTA instance.
    """

    support_doc_ids: tuple[str, ...]
    support_triples: tuple[frozenset[Triple], ...]
    query_doc_ids: tuple[str, ...]
    gold_query_triples: tuple[frozenset[Triple], ...]
    episode_schema: frozenset[str]
    anchor_type: str


@dataclass(frozen=True)
class NKStats:
    mean_n: float
    mean_k_micro: float
    mean_k_macro: float


def least_represented_type(
    split_types: Iterable[str],
    usage_counts: dict[str, int],
    rng: random.Random,
) -> str:
    """A type with minimal usage count; ties are broken uniformly at random."""
    candidates = sorted(split_types)
    if not candidates:
        raise SamplingError("least_represented_type: no candidate types")
    low = min(usage_counts.get(t, 0) for t in candidates)
    pool = [t for t in candidates if usage_counts.get(t, 0) == low]
    return pool[rng.randrange(len(pool))]


def build_type_doc_index(corpus: Corpus, split_types: Iterable[str]) -> dict[str, list[str]]:
    """Map each split type to the ids of documents holding >= 1 instance."""
    split_types = frozenset(split_types)
    index: dict[str, list[str]] = {t: [] for t in split_types}
    for doc in corpus.documents:
        for t in doc.relation_types() & split_types:
            index[t].append(doc.doc_id)
    return index


def _doc_schema_types(doc: Document, split_types: frozenset[str]) -> frozenset[str]:
    return doc.relation_types() & split_types


def _filtered_triples(doc: Document, schema: frozenset[str]) -> frozenset[Triple]:
    return frozenset((t.head, t.relation, t.tail) for t in doc.triples if t.relation in schema)


class EpisodeSampler:
    """Stateful sampler; usage counters persist across episodes of one run."""

    def __init__(self, corpus: Corpus, split_types: Iterable[str], cfg: SamplerConfig):
        self.corpus = corpus
        self.split_types = frozenset(split_types)
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.usage_counts: dict[str, int] = {t: 0 for t in self.split_types}
        index = build_type_doc_index(corpus, self.split_types)
        self.eligible: dict[str, list[str]] = {}
        for t in sorted(self.split_types):
            docs = index[t]
            if len(docs) >= cfg.n_support_docs:
                self.eligible[t] = docs
            elif docs:
                log.warning(
                    "type %s occurs in only %d document(s) but %d support docs are required; excluded",
                    t, len(docs), cfg.n_support_docs,
                )
            else:
                log.warning("type %s occurs in no document; excluded", t)
        if not self.eligible:
            raise SamplingError("no split type has enough eligible documents")
        self._doc_ids = [d.doc_id for d in corpus.documents]

    def sample_episode(self) -> Optional[Episode]:
        """One episode, or None when an ensure-positive draw had to be skipped."""
        cfg = self.cfg
        anchor = least_represented_type(self.eligible.keys(), self.usage_counts, self.rng)
        support_ids = tuple(self.rng.sample(self.eligible[anchor], cfg.n_support_docs))

        first_doc = self.corpus.document(support_ids[0])
        schema = _doc_schema_types(first_doc, self.split_types)
        if cfg.max_episode_schema is not None and len(schema) > cfg.max_episode_schema:
            others = sorted(schema - {anchor})
            keep = self.rng.sample(others, cfg.max_episode_schema - 1) if cfg.max_episode_schema > 1 else []
            schema = frozenset([anchor, *keep])

        query_ids = self._sample_queries(support_ids, anchor)
        if query_ids is None:
            self._count(schema, anchor)
            return None

        episode = Episode(
            support_doc_ids=support_ids,
            support_triples=tuple(
                _filtered_triples(self.corpus.document(d), schema) for d in support_ids
            ),
            query_doc_ids=query_ids,
            gold_query_triples=tuple(
                _filtered_triples(self.corpus.document(d), schema) for d in query_ids
            ),
            episode_schema=schema,
            anchor_type=anchor,
        )
        self._count(schema, anchor)
        return episode

    def _count(self, schema: frozenset[str], anchor: str) -> None:
        if self.cfg.usage_counting == "anchor_only":
            self.usage_counts[anchor] = self.usage_counts.get(anchor, 0) + 1
        else:
            for t in schema:
                self.usage_counts[t] = self.usage_counts.get(t, 0) + 1

    def _sample_queries(self, support_ids: tuple[str, ...], anchor: str) -> Optional[tuple[str, ...]]:
        cfg = self.cfg
        pool = [d for d in self._doc_ids if d not in support_ids]
        if len(pool) < cfg.queries_per_episode:
            raise SamplingError("not enough documents left for query sampling")
        draw = lambda: tuple(self.rng.sample(pool, cfg.queries_per_episode))
        if cfg.strategy != STRATEGY_TRAIN_ENSURE_POSITIVE:
            return draw()

        anchor_docs = set(self.eligible.get(anchor, ()))
        for _ in range(cfg.ensure_positive_retries):
            ids = draw()
            if any(d in anchor_docs for d in ids):
                return ids
        log.warning("ensure_positive: no anchor-positive query set for %s after %d retries; skipping",
                    anchor, cfg.ensure_positive_retries)
        return None

    def sample(self, count: Optional[int] = None) -> list[Episode]:
        count = self.cfg.episode_count if count is None else count
        out: list[Episode] = []
        budget = count * max(4, self.cfg.ensure_positive_retries)
        while len(out) < count and budget > 0:
            budget -= 1
            ep = self.sample_episode()
            if ep is not None:
                out.append(ep)
        if len(out) < count:
            raise SamplingError(f"could only sample {len(out)} of {count} episodes")
        return out


def sample_test_episodes(corpus: Corpus, split_types: Iterable[str], cfg: SamplerConfig) -> list[Episode]:
    """The full test-episode protocol: anchor balancing, support docs that
    contain the anchor, episode schema from the first support document, and
    query documents drawn uniformly outside the support set."""
    if cfg.strategy != STRATEGY_TEST:
        raise ValueError("sample_test_episodes requires the test_protocol strategy")
    return EpisodeSampler(corpus, split_types, cfg).sample()


def sample_training_episode(
    corpus: Corpus,
    split_types: Iterable[str],
    cfg: SamplerConfig,
    rng: random.Random,
    usage_counts: Optional[dict[str, int]] = None,
    sampler: Optional[EpisodeSampler] = None,
) -> Optional[Episode]:
    """One training episode under ``train_random`` or ``train_ensure_positive``.

    Stateful reuse (running usage counts, an already-built document index)
    is available by passing a sampler; otherwise one is built on the fly.
    """
    if cfg.strategy not in (STRATEGY_TRAIN_RANDOM, STRATEGY_TRAIN_ENSURE_POSITIVE):
        raise ValueError("sample_training_episode requires a training strategy")
    if sampler is None:
        sampler = EpisodeSampler(corpus, split_types, cfg)
        if usage_counts is not None:
            sampler.usage_counts = usage_counts
    sampler.rng = rng
    return sampler.sample_episode()


def episode_statistics(episodes: list[Episode]) -> NKStats:
    """Mean episode-schema size and support-instance counts.

    K for an (episode, type) pair is the number of support triples of that
    type pooled over all support documents. The micro mean averages over
    all such pairs; the macro mean averages each type's mean K over types.
    """
    if not episodes:
        raise ValueError("episode_statistics requires a non-empty episode list")
    n_total = 0
    k_sum = 0
    k_pairs = 0
    per_type_sum: dict[str, int] = {}
    per_type_cnt: dict[str, int] = {}
    for ep in episodes:
        n_total += len(ep.episode_schema)
        counts = {t: 0 for t in ep.episode_schema}
        for triples in ep.support_triples:
            for _, r, _ in triples:
                counts[r] += 1
        for t, k in counts.items():
            k_sum += k
            k_pairs += 1
            per_type_sum[t] = per_type_sum.get(t, 0) + k
            per_type_cnt[t] = per_type_cnt.get(t, 0) + 1
    per_type_mean = [per_type_sum[t] / per_type_cnt[t] for t in per_type_sum]
    return NKStats(
        mean_n=n_total / len(episodes),
        mean_k_micro=k_sum / k_pairs,
        mean_k_macro=sum(per_type_mean) / len(per_type_mean),
    )


# ---------------------------------------------------------------------------
# Episode-set files: a JSON header line, then one JSON object per episode.


def _episode_to_json(ep: Episode) -> dict:
    return {
        "support": list(ep.support_doc_ids),
        "support_triples": [sorted(map(list, ts)) for ts in ep.support_triples],
        "queries": list(ep.query_doc_ids),
        "gold": [sorted(map(list, ts)) for ts in ep.gold_query_triples],
        "schema": sorted(ep.episode_schema),
        "anchor": ep.anchor_type,
    }


def _episode_from_json(rec: dict) -> Episode:
    as_triples = lambda rows: frozenset((int(h), str(r), int(t)) for h, r, t in rows)
    return Episode(
        support_doc_ids=tuple(rec["support"]),
        support_triples=tuple(as_triples(ts) for ts in rec["support_triples"]),
        query_doc_ids=tuple(rec["queries"]),
        gold_query_triples=tuple(as_triples(ts) for ts in rec["gold"]),
        episode_schema=frozenset(rec["schema"]),
        anchor_type=rec["anchor"],
    )


def save_episodes(
    episodes: list[Episode],
    path: str | Path,
    *,
    corpus: Corpus,
    split_id: str,
    cfg: SamplerConfig,
) -> None:
    """Write an episode set with a provenance header for exact re-evaluation."""
    path = Path(path)
    header = {
        "format": EPISODE_FORMAT,
        "corpus_hash": corpus_hash(corpus),
        "split_id": split_id,
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "episode_count": len(episodes),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in episodes:
            fh.write(json.dumps(_episode_to_json(ep), sort_keys=True) + "\n")


def load_episodes(path: str | Path) -> tuple[dict, list[Episode]]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != EPISODE_FORMAT:
            raise ValueError(f"{path}: unsupported episode format {header.get('format')!r}")
        episodes = [_episode_from_json(json.loads(line)) for line in fh if line.strip()]
    return header, episodes
