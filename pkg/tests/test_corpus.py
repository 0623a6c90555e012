import json

import pytest

from fewdocre.corpus import (
    Corpus,
    CorpusParseError,
    CorpusValidationError,
    Document,
    Entity,
    Mention,
    RelationTriple,
    candidate_pairs,
    corpus_hash,
    corpus_stats,
    load_corpus,
    load_docred,
    load_scierc,
    merge_corpora,
    save_corpus,
    validate,
)
from corpus_helpers import make_corpus, make_doc


def test_candidate_pairs_three_entities():
    doc = make_doc("d", ["a", "b", "c"], [])
    pairs = candidate_pairs(doc)
    assert len(pairs) == 6
    assert pairs == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


@pytest.mark.parametrize("n", [0, 1])
def test_candidate_pairs_degenerate(n):
    doc = make_doc("d", ["tok"] * n, [])
    assert candidate_pairs(doc) == []


@pytest.mark.parametrize("n", [2, 4, 7, 11])
def test_candidate_pairs_count_property(n):
    doc = make_doc("d", [f"t{i}" for i in range(n)], [])
    pairs = candidate_pairs(doc)
    assert len(pairs) == n * (n - 1)
    assert len(set(pairs)) == len(pairs)
    assert all(h != t for h, t in pairs)


def test_corpus_stats_hand_counted():
    # doc A: 3 entities -> 6 pairs, 2 triples on distinct pairs.
    # doc B: 2 entities -> 2 pairs, 2 triples on ONE pair (counts once).
    doc_a = make_doc("A", ["x", "y", "z"], [(0, "r1", 1), (1, "r2", 2)])
    doc_b = make_doc("B", ["u", "v"], [(0, "r1", 1), (0, "r2", 1)])
    stats = corpus_stats(make_corpus("hand", [doc_a, doc_b]))
    assert stats.doc_count == 2
    assert stats.relation_type_count == 2
    assert stats.mean_candidate_pairs_per_doc == (6 + 2) / 2
    # every sentence in make_doc has 3 tokens, one sentence per entity
    assert stats.mean_words_per_doc == (9 + 6) / 2
    assert stats.mean_sentences_per_doc == (3 + 2) / 2
    assert stats.nota_fraction == pytest.approx(1 - 3 / 8)


def test_corpus_stats_empty():
    stats = corpus_stats(make_corpus("empty", []))
    assert stats.doc_count == 0
    assert stats.nota_fraction == 0.0


def test_corpus_stats_permutation_invariant(tiny_corpus):
    shuffled = Corpus("tiny2", tuple(reversed(tiny_corpus.documents)), tiny_corpus.schema)
    assert corpus_stats(tiny_corpus) == corpus_stats(shuffled)


def test_validate_clean(tiny_corpus):
    assert validate(tiny_corpus).ok


def test_validate_reflexive_triple():
    doc = make_doc("d", ["a", "b"], [(0, "r", 0)])
    report = validate(make_corpus("c", [doc]))
    assert [v.kind for v in report.violations] == ["reflexive_triple"]
    assert report.violations[0].doc_id == "d"


def test_validate_span_past_sentence_end():
    bad = Document(
        "d",
        (("one", "two"),),
        (Entity(0, (Mention(0, 1, 5, "two"),)),),
        (),
    )
    report = validate(make_corpus("c", [bad]))
    assert [v.kind for v in report.violations] == ["mention_span_invalid"]
    assert "[1, 5)" in report.violations[0].detail


def test_validate_duplicate_and_dangling():
    doc = Document(
        "d",
        (("a", "b"),),
        (Entity(0, (Mention(0, 0, 1, "a"),)), Entity(1, (Mention(0, 1, 2, "b"),))),
        (RelationTriple(0, "r", 1), RelationTriple(0, "r", 1), RelationTriple(0, "r", 5)),
    )
    kinds = {v.kind for v in validate(make_corpus("c", [doc])).violations}
    assert kinds == {"duplicate_triple", "dangling_entity_reference"}


def test_triples_appear_in_candidate_pairs(tiny_corpus):
    for doc in tiny_corpus.documents:
        pairs = set(candidate_pairs(doc))
        for t in doc.triples:
            assert (t.head, t.tail) in pairs


# ---------------------------------------------------------------------------
# DocRED loading


def test_load_docred_mini(docred_file):
    corpus = load_docred(docred_file, "dev")
    assert corpus.name == "docred-dev"
    assert len(corpus) == 2
    assert corpus.schema == {"P108", "P17"}

    doc = corpus.document("Doc One")
    assert len(doc.entities) == 2
    assert doc.entities[0].entity_type == "PER"
    assert doc.entities[1].mentions[0] == Mention(0, 3, 5, "Firm Inc")
    assert doc.triples == (RelationTriple(0, "P108", 1),)

    # duplicate label dropped
    assert corpus.document("Doc Two").triples == (RelationTriple(0, "P17", 1),)


def test_load_docred_empty(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("[]")
    corpus = load_docred(path, "train")
    assert len(corpus) == 0
    assert corpus_stats(corpus).doc_count == 0


def test_load_docred_bad_partition(docred_file):
    with pytest.raises(ValueError):
        load_docred(docred_file, "test")


def test_load_docred_malformed_record(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps([{"title": "X", "sents": "oops", "vertexSet": []}]))
    with pytest.raises(CorpusParseError) as err:
        load_docred(path, "train")
    assert "document 0" in str(err.value)
    assert "sents" in str(err.value)


def test_load_docred_dangling_reference(tmp_path):
    rec = {
        "title": "X",
        "sents": [["a", "b"]],
        "vertexSet": [[{"name": "a", "sent_id": 0, "pos": [0, 1], "type": "T"}]],
        "labels": [{"h": 0, "t": 7, "r": "P1"}],
    }
    path = tmp_path / "dangling.json"
    path.write_text(json.dumps([rec]))
    with pytest.raises(CorpusValidationError) as err:
        load_docred(path, "train")
    assert any(v.kind == "dangling_entity_reference" for v in err.value.report.violations)


# ---------------------------------------------------------------------------
# sciERC loading


def test_load_scierc_mini(scierc_file):
    corpus = load_scierc(scierc_file)
    assert len(corpus) == 2
    assert corpus.schema == {"USED-FOR", "COMPARE"}

    doc = corpus.document("s1")
    # cluster {ModelX twice} is one entity; parsing and BaselineY are singletons
    assert len(doc.entities) == 3
    cluster = doc.entities[0]
    assert [m.sentence_index for m in cluster.mentions] == [0, 1]
    assert cluster.mentions[1] == Mention(1, 0, 1, "ModelX")
    rels = {(t.head, t.relation, t.tail) for t in doc.triples}
    assert (0, "USED-FOR", 1) in rels   # ModelX -> parsing
    assert (0, "COMPARE", 2) in rels    # ModelX -> BaselineY

    single = corpus.document("s2")
    assert len(single.entities) == 1
    assert candidate_pairs(single) == []


def test_load_scierc_unknown_relation_span(tmp_path):
    doc = {
        "doc_key": "bad",
        "sentences": [["a", "b", "c"]],
        "ner": [[[0, 0, "T"]]],
        "relations": [[[0, 0, 2, 2, "USED-FOR"]]],
        "clusters": [],
    }
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(doc))
    with pytest.raises(CorpusValidationError) as err:
        load_scierc(path)
    assert "[2, 2]" in str(err.value)


# ---------------------------------------------------------------------------
# Canonical format


def test_save_load_round_trip(tmp_path, tiny_corpus):
    path = tmp_path / "corpus.jsonl"
    save_corpus(tiny_corpus, path)
    again = load_corpus(path)
    assert again == tiny_corpus
    assert corpus_hash(again) == corpus_hash(tiny_corpus)


def test_round_trip_preserves_schema_superset(tmp_path, tiny_corpus):
    widened = Corpus(tiny_corpus.name, tiny_corpus.documents, tiny_corpus.schema | {"unused_type"})
    path = tmp_path / "c.jsonl"
    save_corpus(widened, path)
    assert load_corpus(path).schema == widened.schema


def test_merge_corpora(tiny_corpus):
    extra = make_corpus("x", [make_doc("d9", ["q", "w"], [(0, "rel_c", 1)])])
    merged = merge_corpora("both", tiny_corpus, extra)
    assert len(merged) == 4
    assert merged.schema == tiny_corpus.schema | {"rel_c"}
    with pytest.raises(CorpusValidationError):
        merge_corpora("dup", tiny_corpus, tiny_corpus)
