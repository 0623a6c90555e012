import json
import logging

import pytest

from corpus_helpers import make_corpus, make_doc

logging.getLogger("fewdocre").setLevel(logging.ERROR)


@pytest.fixture
def tiny_corpus():
    """Three documents, two relation types, hand-checkable pair counts."""
    docs = [
        make_doc("d0", ["alpha", "beta", "gamma"], [(0, "rel_a", 1)]),
        make_doc("d1", ["alpha", "beta"], [(0, "rel_a", 1), (1, "rel_b", 0)]),
        make_doc("d2", ["delta", "epsilon", "zeta"], [(0, "rel_b", 1), (1, "rel_b", 2)]),
    ]
    return make_corpus("tiny", docs)


# ---------------------------------------------------------------------------
# Source-format fixtures


def docred_record(title, sents, vertex_set, labels):
    return {"title": title, "sents": sents, "vertexSet": vertex_set, "labels": labels}


@pytest.fixture
def docred_file(tmp_path):
    """Two well-formed documents in the DocRED release layout."""
    data = [
        docred_record(
            "Doc One",
            [["Anna", "works", "at", "Firm", "Inc", "."], ["She", "joined", "Firm", "Inc", "."]],
            [
                [{"name": "Anna", "sent_id": 0, "pos": [0, 1], "type": "PER"},
                 {"name": "She", "sent_id": 1, "pos": [0, 1], "type": "PER"}],
                [{"name": "Firm Inc", "sent_id": 0, "pos": [3, 5], "type": "ORG"},
                 {"name": "Firm Inc", "sent_id": 1, "pos": [2, 4], "type": "ORG"}],
            ],
            [{"h": 0, "t": 1, "r": "P108", "evidence": [0]}],
        ),
        docred_record(
            "Doc Two",
            [["Rome", "is", "in", "Italy", "."]],
            [
                [{"name": "Rome", "sent_id": 0, "pos": [0, 1], "type": "LOC"}],
                [{"name": "Italy", "sent_id": 0, "pos": [3, 4], "type": "LOC"}],
            ],
            [{"h": 0, "t": 1, "r": "P17", "evidence": [0]},
             {"h": 0, "t": 1, "r": "P17", "evidence": [0]}],  # duplicate, dropped on load
        ),
    ]
    path = tmp_path / "docred_mini.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture
def scierc_file(tmp_path):
    """Two sciERC-layout lines: clusters, singleton ner spans, relations."""
    doc1 = {
        "doc_key": "s1",
        "sentences": [["We", "present", "ModelX", "for", "parsing", "."],
                      ["ModelX", "outperforms", "BaselineY", "."]],
        "ner": [[[2, 2, "Method"], [4, 4, "Task"]], [[6, 6, "Method"], [8, 8, "Method"]]],
        "relations": [[[2, 2, 4, 4, "USED-FOR"]], [[6, 6, 8, 8, "COMPARE"]]],
        "clusters": [[[2, 2], [6, 6]]],
    }
    doc2 = {
        "doc_key": "s2",
        "sentences": [["A", "single", "entity", "here", "."]],
        "ner": [[[2, 2, "Generic"]]],
        "relations": [[]],
        "clusters": [],
    }
    path = tmp_path / "scierc_mini.jsonl"
    path.write_text("\n".join(json.dumps(d) for d in (doc1, doc2)), encoding="utf-8")
    return path
