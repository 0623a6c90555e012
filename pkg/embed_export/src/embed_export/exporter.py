"""Run a pretrained transformer over a corpus and write token embeddings.

The marker-insertion rule comes from the consumer library so the rule
version in the output header is correct by construction. Everything else
speaks the documented exchange-file byte layout directly: four little-
endian u32 header fields (format version, marker-rule version, embedding
width, document count), a u32-length-prefixed windowing-strategy string,
then per document a u32-length-prefixed doc id, a u32 row count, and a
row-major float32 matrix with exactly one row per marked corpus token.

Documents whose marked token sequence exceeds the window length are
encoded in overlapping windows; rows covered by several windows are
averaged.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from fewdocre.corpus import load_corpus
from fewdocre.encoding import (
    CLOSE_MARKER,
    EXCHANGE_FORMAT_VERSION,
    MARKER_RULE_VERSION,
    OPEN_MARKER,
    insert_entity_markers,
)

log = logging.getLogger(__name__)


class ModelFetchError(Exception):
    """The model or tokenizer could not be loaded."""


class AlignmentError(Exception):
    """A corpus token produced no subword rows to pool."""

    def __init__(self, doc_id: str, token_index: int, token: str):
        self.doc_id = doc_id
        self.token_index = token_index
        super().__init__(
            f"doc {doc_id!r}: token {token_index} ({token!r}) maps to no subword"
        )


@dataclass(frozen=True)
class ExportConfig:
    corpus_path: str
    model_id: str
    output_path: str
    max_window_length: int = 512
    window_stride: int = 128
    marker_rule_version: int = MARKER_RULE_VERSION
    device: str = "cpu"

    def __post_init__(self):
        if not 0 <= self.window_stride < self.max_window_length:
            raise ValueError("window_stride must lie in [0, max_window_length)")
        if self.marker_rule_version != MARKER_RULE_VERSION:
            raise ValueError(
                f"marker rule version {self.marker_rule_version} does not match "
                f"the consumer library's rule {MARKER_RULE_VERSION}"
            )


def window_spans(length: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Overlapping [start, end) spans covering ``length`` tokens.

    Consecutive windows overlap by ``stride`` tokens; the final window is
    clipped at the end of the document.
    """
    if length <= window:
        return [(0, length)]
    spans = []
    step = window - stride
    start = 0
    while True:
        end = min(start + window, length)
        spans.append((start, end))
        if end == length:
            return spans
        start += step


def merge_window_rows(
    spans: list[tuple[int, int]], mats: list[np.ndarray], length: int, d: int
) -> np.ndarray:
    """Average the rows that several windows produced for the same token."""
    sums = np.zeros((length, d), dtype=np.float64)
    counts = np.zeros(length, dtype=np.int64)
    for (start, end), mat in zip(spans, mats):
        sums[start:end] += mat
        counts[start:end] += 1
    assert counts.min() >= 1, "window spans must cover every token"
    return (sums / counts[:, None]).astype(np.float32)


def _load_model(model_id: str, device: str):
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id, use_fast=True)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ModelFetchError(f"cannot load model {model_id!r}: {exc}") from exc

    added = tokenizer.add_tokens([OPEN_MARKER, CLOSE_MARKER])
    if added:
        # deterministic init for the marker rows: mean of the existing table
        old = model.get_input_embeddings().weight.data
        mean_row = old.mean(dim=0, keepdim=True)
        model.resize_token_embeddings(len(tokenizer))
        emb = model.get_input_embeddings().weight.data
        emb[-added:] = mean_row
    model.to(device)
    model.eval()
    return tokenizer, model


class _Encoder:
    def __init__(self, cfg: ExportConfig):
        self.cfg = cfg
        self.tokenizer, self.model = _load_model(cfg.model_id, cfg.device)
        self.d = int(self.model.config.hidden_size)

    @torch.no_grad()
    def encode_window(self, tokens: list[str], doc_id: str, offset: int) -> np.ndarray:
        enc = self.tokenizer(
            tokens,
            is_split_into_words=True,
            return_tensors="pt",
            add_special_tokens=True,
        ).to(self.cfg.device)
        hidden = self.model(**enc).last_hidden_state[0].cpu().numpy()
        word_ids = enc.word_ids(0)

        sums = np.zeros((len(tokens), self.d), dtype=np.float64)
        counts = np.zeros(len(tokens), dtype=np.int64)
        for row, wid in zip(hidden, word_ids):
            if wid is not None:
                sums[wid] += row
                counts[wid] += 1
        missing = np.nonzero(counts == 0)[0]
        if len(missing):
            idx = int(missing[0])
            raise AlignmentError(doc_id, offset + idx, tokens[idx])
        return sums / counts[:, None]

    def encode_document(self, doc_id: str, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.d), dtype=np.float32)
        spans = window_spans(len(tokens), self.cfg.max_window_length, self.cfg.window_stride)
        mats = [self.encode_window(tokens[s:e], doc_id, s) for s, e in spans]
        return merge_window_rows(spans, mats, len(tokens), self.d)


def export_embeddings(cfg: ExportConfig) -> dict:
    """Encode every document of a canonical corpus file; returns a summary.

    The output validates against the consumer's exchange-format reader:
    one float32 row per marked corpus token, subword rows mean-pooled.
    """
    corpus = load_corpus(cfg.corpus_path)
    encoder = _Encoder(cfg)
    strategy = f"mean-overlap:window={cfg.max_window_length},stride={cfg.window_stride}"

    out = Path(cfg.output_path)
    windowed = 0
    with out.open("wb") as fh:
        fh.write(
            struct.pack(
                "<IIII",
                EXCHANGE_FORMAT_VERSION,
                cfg.marker_rule_version,
                encoder.d,
                len(corpus.documents),
            )
        )
        raw = strategy.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        for doc in corpus.documents:
            marked = insert_entity_markers(doc)
            tokens = list(marked.tokens)
            if len(tokens) > cfg.max_window_length:
                windowed += 1
            matrix = encoder.encode_document(doc.doc_id, tokens)
            ident = doc.doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)) + ident)
            fh.write(struct.pack("<I", matrix.shape[0]))
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    log.info("wrote %d documents (%d windowed) to %s", len(corpus.documents), windowed, out)
    return {
        "documents": len(corpus.documents),
        "windowed_documents": windowed,
        "d": encoder.d,
        "output": str(out),
        "strategy": strategy,
    }
