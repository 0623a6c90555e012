import numpy as np
import pytest
import torch

from fewdocre.corpus import Corpus, Document, Entity, Mention, save_corpus
from fewdocre.encoding import (
    EncoderSpec,
    MARKER_RULE_VERSION,
    encode_document,
    insert_entity_markers,
    read_embedding_file,
)
from embed_export.exporter import (
    AlignmentError,
    ExportConfig,
    ModelFetchError,
    _Encoder,
    export_embeddings,
    merge_window_rows,
    window_spans,
)


# ---------------------------------------------------------------------------
# Window arithmetic (pure)


def test_window_spans_published_example():
    assert window_spans(600, 512, 128) == [(0, 512), (384, 600)]


def test_window_spans_short_doc_single_window():
    assert window_spans(100, 512, 128) == [(0, 100)]
    assert window_spans(512, 512, 128) == [(0, 512)]


@pytest.mark.parametrize("length,window,stride", [(1000, 512, 128), (513, 512, 0), (2000, 300, 150)])
def test_window_spans_cover_everything(length, window, stride):
    spans = window_spans(length, window, stride)
    covered = np.zeros(length, dtype=bool)
    for s, e in spans:
        assert e - s <= window
        covered[s:e] = True
    assert covered.all()
    # consecutive windows overlap by exactly `stride` until the clipped tail
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        assert s2 == s1 + (window - stride)


def test_merge_window_rows_average_oracle():
    spans = [(0, 4), (2, 6)]
    a = np.arange(4 * 2, dtype=np.float64).reshape(4, 2)
    b = 10 + np.arange(4 * 2, dtype=np.float64).reshape(4, 2)
    merged = merge_window_rows(spans, [a, b], 6, 2)
    assert merged.dtype == np.float32
    assert np.allclose(merged[:2], a[:2])
    assert np.allclose(merged[2], (a[2] + b[0]) / 2)
    assert np.allclose(merged[3], (a[3] + b[1]) / 2)
    assert np.allclose(merged[4:], b[2:])


def test_export_config_invariants(tmp_path):
    with pytest.raises(ValueError):
        ExportConfig("c", "m", "o", max_window_length=128, window_stride=128)
    with pytest.raises(ValueError):
        ExportConfig("c", "m", "o", marker_rule_version=MARKER_RULE_VERSION + 1)


# ---------------------------------------------------------------------------
# End-to-end export against the consumer's reader (exchange round trip)


def test_round_trip_into_consumer(tmp_path, tiny_model_dir, fixture_corpus_path):
    corpus_path, corpus = fixture_corpus_path
    out = tmp_path / "features.bin"
    summary = export_embeddings(
        ExportConfig(corpus_path, tiny_model_dir, str(out))
    )
    assert summary["documents"] == 2
    assert summary["windowed_documents"] == 0

    header, docs = read_embedding_file(out)
    assert header["format_version"] == 1
    assert header["marker_rule_version"] == MARKER_RULE_VERSION
    assert header["d"] == 32
    assert header["doc_count"] == 2
    assert header["strategy"] == "mean-overlap:window=512,stride=128"

    for doc in corpus.documents:
        marked = insert_entity_markers(doc)
        matrix = docs[doc.doc_id]
        assert matrix.shape == (len(marked.tokens), 32)
        assert np.isfinite(matrix).all()

    # and the consumer can use the file as an encoder directly
    spec = EncoderSpec("precomputed_file", d=32, path=str(out))
    for doc in corpus.documents:
        marked = insert_entity_markers(doc)
        embs = encode_document(spec, marked)
        assert embs.matrix.shape == (len(marked.tokens), 32)


def test_subword_pooling_matches_manual_forward(tmp_path, tiny_model_dir, fixture_corpus_path):
    corpus_path, corpus = fixture_corpus_path
    out = tmp_path / "features.bin"
    export_embeddings(ExportConfig(corpus_path, tiny_model_dir, str(out)))
    _, docs = read_embedding_file(out)

    doc = corpus.documents[0]
    marked = insert_entity_markers(doc)
    encoder = _Encoder(ExportConfig(corpus_path, tiny_model_dir, str(out)))
    enc = encoder.tokenizer(list(marked.tokens), is_split_into_words=True, return_tensors="pt")
    with torch.no_grad():
        hidden = encoder.model(**enc).last_hidden_state[0].numpy()
    word_ids = enc.word_ids(0)
    expected = np.zeros((len(marked.tokens), 32))
    counts = np.zeros(len(marked.tokens))
    for row, wid in zip(hidden, word_ids):
        if wid is not None:
            expected[wid] += row
            counts[wid] += 1
    expected = (expected / counts[:, None]).astype(np.float32)
    assert np.array_equal(docs[doc.doc_id], expected)


def test_windowed_long_document(tmp_path, tiny_model_dir):
    tokens = tuple(f"t{i % 7}" for i in range(600))
    doc = Document("long", (tokens,), (), ())
    corpus = Corpus("long", (doc,), frozenset())
    corpus_path = tmp_path / "long.jsonl"
    save_corpus(corpus, corpus_path)

    out = tmp_path / "long.bin"
    summary = export_embeddings(
        ExportConfig(str(corpus_path), tiny_model_dir, str(out),
                     max_window_length=512, window_stride=128)
    )
    assert summary["windowed_documents"] == 1

    header, docs = read_embedding_file(out)
    assert header["strategy"] == "mean-overlap:window=512,stride=128"
    assert docs["long"].shape == (600, 32)

    # overlap rows equal the mean of the two per-window encodings
    encoder = _Encoder(ExportConfig(str(corpus_path), tiny_model_dir, str(out)))
    w1 = encoder.encode_window(list(tokens[0:512]), "long", 0)
    w2 = encoder.encode_window(list(tokens[384:600]), "long", 384)
    expected = merge_window_rows([(0, 512), (384, 600)], [w1, w2], 600, 32)
    assert np.array_equal(docs["long"], expected)


def test_empty_corpus(tmp_path, tiny_model_dir):
    corpus_path = tmp_path / "empty.jsonl"
    save_corpus(Corpus("empty", (), frozenset()), corpus_path)
    out = tmp_path / "empty.bin"
    summary = export_embeddings(ExportConfig(str(corpus_path), tiny_model_dir, str(out)))
    assert summary["documents"] == 0
    header, docs = read_embedding_file(out)
    assert header["doc_count"] == 0
    assert docs == {}


def test_zero_token_document(tmp_path, tiny_model_dir):
    doc = Document("empty-doc", (), (), ())
    corpus_path = tmp_path / "edge.jsonl"
    save_corpus(Corpus("edge", (doc,), frozenset()), corpus_path)
    out = tmp_path / "edge.bin"
    export_embeddings(ExportConfig(str(corpus_path), tiny_model_dir, str(out)))
    _, docs = read_embedding_file(out)
    assert docs["empty-doc"].shape == (0, 32)


def test_export_deterministic(tmp_path, tiny_model_dir, fixture_corpus_path):
    corpus_path, _ = fixture_corpus_path
    outs = []
    for name in ("a.bin", "b.bin"):
        out = tmp_path / name
        export_embeddings(ExportConfig(corpus_path, tiny_model_dir, str(out)))
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_model_fetch_error(tmp_path, fixture_corpus_path):
    corpus_path, _ = fixture_corpus_path
    with pytest.raises(ModelFetchError):
        export_embeddings(
            ExportConfig(corpus_path, str(tmp_path / "no-such-model"), str(tmp_path / "x.bin"))
        )


def test_alignment_error_names_doc_and_token(tmp_path, tiny_model_dir):
    # zero-width space: the tokenizer cleans it away, leaving no subword
    doc = Document(
        "weird",
        (("ab", "​", "cd"),),
        (Entity(0, (Mention(0, 0, 1, "ab"),)),),
        (),
    )
    corpus_path = tmp_path / "weird.jsonl"
    save_corpus(Corpus("weird", (doc,), frozenset()), corpus_path)
    with pytest.raises(AlignmentError) as err:
        export_embeddings(
            ExportConfig(str(corpus_path), tiny_model_dir, str(tmp_path / "w.bin"))
        )
    assert err.value.doc_id == "weird"
    marked = insert_entity_markers(doc)
    assert marked.tokens[err.value.token_index] == "​"


def test_primary_package_does_not_import_exporter():
    # the consumer library must stay usable without this sidecar installed
    import pathlib

    import fewdocre

    pkg_dir = pathlib.Path(fewdocre.__file__).parent
    for path in pkg_dir.rglob("*.py"):
        assert "embed_export" not in path.read_text()
