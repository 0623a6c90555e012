import logging
import string

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizerFast

from fewdocre.corpus import Corpus, Document, Entity, Mention, RelationTriple, save_corpus

logging.getLogger("transformers").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small randomly initialized encoder saved to disk, loadable offline."""
    out = tmp_path_factory.mktemp("tiny-model")
    chars = string.ascii_lowercase + string.digits
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += list(chars) + [f"##{c}" for c in chars]
    (out / "vocab.txt").write_text("\n".join(vocab))
    tokenizer = BertTokenizerFast(vocab_file=str(out / "vocab.txt"), do_lower_case=True)
    tokenizer.save_pretrained(out)

    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=4,
        intermediate_size=37,
        max_position_embeddings=4096,
    )
    torch.manual_seed(7)
    BertModel(cfg).save_pretrained(out)
    return str(out)


def two_sentence_doc(doc_id, tokens_a, tokens_b, spans, triples):
    """spans: list of (sentence, start, end) mention coordinates, one entity each."""
    entities = tuple(
        Entity(i, (Mention(s, a, b, " ".join((tokens_a, tokens_b)[s].split()[a:b])),))
        for i, (s, a, b) in enumerate(spans)
    )
    return Document(
        doc_id,
        (tuple(tokens_a.split()), tuple(tokens_b.split())),
        entities,
        tuple(RelationTriple(h, r, t) for h, r, t in triples),
    )


@pytest.fixture(scope="session")
def fixture_corpus_path(tmp_path_factory):
    """Two small documents with entities, saved in the canonical format."""
    d0 = two_sentence_doc(
        "doc-a",
        "ab cd ef gh",
        "ij kl mn",
        [(0, 0, 1), (0, 2, 4), (1, 1, 2)],
        [(0, "r1", 1)],
    )
    d1 = two_sentence_doc(
        "doc-b",
        "zz yy xx",
        "ww vv",
        [(0, 1, 2), (1, 0, 1)],
        [(0, "r1", 1)],
    )
    corpus = Corpus("fixture", (d0, d1), frozenset({"r1"}))
    path = tmp_path_factory.mktemp("corpus") / "fixture.jsonl"
    save_corpus(corpus, path)
    return str(path), corpus
