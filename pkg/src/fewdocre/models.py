"""Few-shot classification heads over frozen relation representations.

The main head projects candidate-pair representations through a trainable
linear map, scores query pairs against per-type prototypes (or against
every support instance), and thresholds them with the best-matching NOTA
vector. NOTA vectors are either learned across episodes, sampled from the
support documents per episode, or both. Training uses an adaptive
thresholding objective; all gradients are computed analytically.
"""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .encoding import FeatureExtractor, PoolingMode
from .episodes import Episode

log = logging.getLogger(__name__)

NOTA_LOGIT = "<nota>"

SBN_K_PROTOTYPES = 5
SBN_K_INSTANCES = 20

DOMAIN_IN = "in_domain"
DOMAIN_CROSS = "cross_domain"

CHECKPOINT_MAGIC = b"FDRECKPT"
CHECKPOINT_VERSION = 1
_POOLING_CODES = {"marker": 0, "mention_mean": 1}
_POOLING_NAMES = {v: k for k, v in _POOLING_CODES.items()}


class ConfigurationError(Exception):
    pass


class SupportIndexError(Exception):
    pass


class NotaInitError(Exception):
    pass


class ModelState:
    """Trainable head parameters plus per-episode transient state.

    ``sbn_nota`` holds the support-sampled NOTA vectors of the current
    episode only; it is cleared by :meth:`begin_episode`. Reads of the
    learned NOTA vectors are counted so inference paths that must ignore
    them can be audited.
    """

    def __init__(
        self,
        w: np.ndarray,
        b: np.ndarray,
        learned_nota: np.ndarray,
        *,
        use_sie: bool = False,
        use_sbn: bool = False,
        domain: str = DOMAIN_IN,
        pooling: PoolingMode = "marker",
    ):
        if domain not in (DOMAIN_IN, DOMAIN_CROSS):
            raise ConfigurationError(f"unknown domain {domain!r}")
        if learned_nota.ndim != 2 or learned_nota.shape[0] < 1:
            raise ConfigurationError("need at least one learned NOTA vector slot")
        self.w = np.array(w, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self._learned_nota = np.array(learned_nota, dtype=np.float64)
        self.use_sie = use_sie
        self.use_sbn = use_sbn
        self.domain = domain
        self.pooling: PoolingMode = pooling
        self.nota_initialized = False
        self.learned_nota_reads = 0
        self.sbn_nota: Optional[np.ndarray] = None
        self.sbn_indices: tuple[int, ...] = ()

    @classmethod
    def create(
        cls,
        d: int,
        h: Optional[int] = None,
        m: int = 20,
        *,
        seed: int = 0,
        init: str = "gaussian",
        **flags,
    ) -> "ModelState":
        """Fresh state for d-dimensional token embeddings (pairs are 2d)."""
        h = d if h is None else h
        gen = np.random.Generator(np.random.PCG64(seed))
        if init == "gaussian":
            w = gen.normal(0.0, 1.0 / np.sqrt(2 * d), size=(h, 2 * d))
        elif init == "identity":
            w = np.zeros((h, 2 * d))
            for i in range(min(h, 2 * d)):
                w[i, i] = 1.0
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        b = np.zeros(h)
        nota = gen.normal(0.0, 1.0 / np.sqrt(h), size=(m, h))
        return cls(w, b, nota, **flags)

    @property
    def d(self) -> int:
        return self.w.shape[1] // 2

    @property
    def h(self) -> int:
        return self.w.shape[0]

    @property
    def m(self) -> int:
        return self._learned_nota.shape[0]

    @property
    def learned_nota(self) -> np.ndarray:
        self.learned_nota_reads += 1
        return self._learned_nota

    def set_learned_nota(self, vectors: np.ndarray) -> None:
        if vectors.shape != self._learned_nota.shape:
            raise ConfigurationError(
                f"learned NOTA shape {vectors.shape} != {self._learned_nota.shape}"
            )
        self._learned_nota = np.array(vectors, dtype=np.float64)
        self.nota_initialized = True

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w.T + self.b

    def begin_episode(self) -> None:
        self.sbn_nota = None
        self.sbn_indices = ()

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b, "nota": self._learned_nota}

    def clone(self) -> "ModelState":
        twin = ModelState(
            self.w, self.b, self._learned_nota,
            use_sie=self.use_sie, use_sbn=self.use_sbn,
            domain=self.domain, pooling=self.pooling,
        )
        twin.nota_initialized = self.nota_initialized
        return twin


@dataclass(eq=False)
class SupportIndex:
    """Per-episode support representations, raw and projected.

    Positives are grouped by relation type and pooled over all support
    documents; every support pair without an episode-schema label is a
    NOTA candidate. Raw vectors are kept so gradients can flow back into
    the projection.
    """

    types: tuple[str, ...]
    positives_raw: dict[str, np.ndarray]
    positives_proj: dict[str, np.ndarray]
    nota_raw: np.ndarray
    nota_proj: np.ndarray
    nota_meta: tuple[tuple[str, int, int], ...]


@dataclass(eq=False)
class Logits:
    """Similarity scores for one query pair.

    ``nota_score`` is the maximum over the active NOTA vectors;
    ``nota_source`` records which vector won ("learned" or "sbn", index).
    """

    type_scores: dict[str, float]
    nota_score: float
    nota_source: tuple[str, int]


def build_support_index(episode: Episode, features: FeatureExtractor, state: ModelState) -> SupportIndex:
    types = tuple(sorted(episode.episode_schema))
    pos_raw: dict[str, list[np.ndarray]] = {t: [] for t in types}
    nota_raw: list[np.ndarray] = []
    nota_meta: list[tuple[str, int, int]] = []

    for doc_id, triples in zip(episode.support_doc_ids, episode.support_triples):
        feats = features.features(doc_id)
        labels_by_pair: dict[tuple[int, int], set[str]] = {}
        for h, r, t in triples:
            labels_by_pair.setdefault((h, t), set()).add(r)
        for i, pair in enumerate(feats.pairs):
            labs = labels_by_pair.get(pair)
            if labs:
                for r in labs:
                    pos_raw[r].append(feats.reps[i])
            else:
                nota_raw.append(feats.reps[i])
                nota_meta.append((doc_id, pair[0], pair[1]))

    empty = [t for t in types if not pos_raw[t]]
    if empty:
        raise SupportIndexError(f"episode schema types without support instances: {empty}")

    two_d = 2 * state.d
    positives_raw = {t: np.stack(pos_raw[t]) for t in types}
    nota = np.stack(nota_raw) if nota_raw else np.zeros((0, two_d))
    return SupportIndex(
        types=types,
        positives_raw=positives_raw,
        positives_proj={t: state.project(v) for t, v in positives_raw.items()},
        nota_raw=nota,
        nota_proj=state.project(nota) if len(nota) else np.zeros((0, state.h)),
        nota_meta=tuple(nota_meta),
    )


def prototypes(index: SupportIndex) -> dict[str, np.ndarray]:
    """Componentwise mean of each type's projected support instances."""
    return {t: index.positives_proj[t].mean(axis=0) for t in index.types}


def init_learned_nota(first_index: SupportIndex, m: int, rng: random.Random) -> np.ndarray:
    """Draw the learned NOTA vectors from the first episode's support NOTA pool.

    Sampling is without replacement; if the pool is smaller than ``m`` the
    draw falls back to sampling with replacement and the shortfall is flagged.
    """
    pool = first_index.nota_proj
    n = len(pool)
    if n == 0:
        raise NotaInitError("first episode has no support NOTA candidates; resample the episode")
    if n >= m:
        idx = rng.sample(range(n), m)
    else:
        log.warning("only %d NOTA candidates for %d learned vectors; sampling with replacement", n, m)
        idx = [rng.randrange(n) for _ in range(m)]
    return pool[idx].copy()


def sbn_sample(index: SupportIndex, anchors: np.ndarray, k: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Per anchor, the k support NOTA candidates with the largest dot
    product; the deduplicated union becomes the episode's sampled NOTA set."""
    cands = index.nota_proj
    if len(cands) == 0:
        return (), np.zeros((0, anchors.shape[1] if anchors.ndim == 2 else 0))
    if len(cands) < k:
        log.warning("only %d NOTA candidates for top-%d sampling; taking all", len(cands), k)
        idx = tuple(range(len(cands)))
        return idx, cands[list(idx)].copy()
    anchors = np.atleast_2d(anchors)
    chosen: set[int] = set()
    dots = anchors @ cands.T
    for row in dots:
        order = np.argsort(-row, kind="stable")[:k]
        chosen.update(int(i) for i in order)
    idx = tuple(sorted(chosen))
    return idx, cands[list(idx)].copy()


def active_nota_vectors(state: ModelState) -> tuple[np.ndarray, tuple[tuple[str, int], ...]]:
    """The NOTA vectors inference may consult, with their provenance.

    Cross-domain SBN uses only the support-sampled vectors; in-domain SBN
    unions them with the learned set; otherwise the learned set alone.
    """
    sbn = state.sbn_nota if state.sbn_nota is not None else np.zeros((0, state.h))
    if state.use_sbn and state.domain == DOMAIN_CROSS:
        vecs = sbn
        sources: list[tuple[str, int]] = [("sbn", i) for i in range(len(sbn))]
    elif state.use_sbn:
        learned = state.learned_nota
        vecs = np.vstack([learned, sbn]) if len(sbn) else learned
        sources = [("learned", i) for i in range(len(learned))]
        sources += [("sbn", i) for i in range(len(sbn))]
    else:
        learned = state.learned_nota
        vecs = learned
        sources = [("learned", i) for i in range(len(learned))]
    if len(vecs) == 0:
        raise ConfigurationError("active NOTA set is empty; cannot score queries")
    return vecs, tuple(sources)


def prepare_episode(episode: Episode, features: FeatureExtractor, state: ModelState) -> SupportIndex:
    """Reset transient state, build the support index, and sample the
    episode's NOTA vectors when the support-based variant is active."""
    state.begin_episode()
    index = build_support_index(episode, features, state)
    if state.use_sbn:
        if state.use_sie:
            anchors = np.vstack([index.positives_proj[t] for t in index.types])
            k = SBN_K_INSTANCES
        else:
            protos = prototypes(index)
            anchors = np.stack([protos[t] for t in index.types])
            k = SBN_K_PROTOTYPES
        state.sbn_indices, state.sbn_nota = sbn_sample(index, anchors, k)
    return index


def score(query: np.ndarray, index: SupportIndex, state: ModelState) -> Logits:
    """Similarity of one raw query-pair representation to every episode type
    and to the active NOTA set."""
    z = state.project(np.asarray(query, dtype=np.float64))
    scores: dict[str, float] = {}
    for t in index.types:
        if state.use_sie:
            scores[t] = float((index.positives_proj[t] @ z).max())
        else:
            scores[t] = float(index.positives_proj[t].mean(axis=0) @ z)
    vecs, sources = active_nota_vectors(state)
    dots = vecs @ z
    win = int(np.argmax(dots))
    return Logits(type_scores=scores, nota_score=float(dots[win]), nota_source=sources[win])


def predict(logits: Logits) -> frozenset[str]:
    """Every type scoring strictly above the NOTA score; empty means NOTA."""
    return frozenset(t for t, s in logits.type_scores.items() if s > logits.nota_score)


def atl_loss(logits: Logits, gold: Iterable[str]) -> tuple[float, dict[str, float]]:
    """Adaptive thresholding loss for one query pair and its exact gradient.

    Positive types are pushed above the NOTA (threshold) score by a
    softmax over positives plus the threshold; the threshold is pushed
    above all negative types by a second softmax. Returns the loss and
    the gradient for every logit, keyed by type plus ``NOTA_LOGIT``.
    """
    types = tuple(sorted(logits.type_scores))
    gold = frozenset(gold)
    stray = gold - set(types)
    if stray:
        raise ValueError(f"gold types outside the episode schema: {sorted(stray)}")
    s = np.array([logits.type_scores[t] for t in types])
    pos = np.array([t in gold for t in types], dtype=bool)
    loss_v, ds, dth = _atl_batch(s[None, :], np.array([logits.nota_score]), pos[None, :])
    grads = {t: float(ds[0, i]) for i, t in enumerate(types)}
    grads[NOTA_LOGIT] = float(dth[0])
    return float(loss_v[0]), grads


def _atl_batch(s: np.ndarray, th: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized adaptive-thresholding loss over rows of query pairs.

    ``s``: (Q, T) type scores, ``th``: (Q,) threshold scores, ``pos``:
    (Q, T) gold mask. Returns per-row loss and gradients (dS, dTH).
    """
    q, t = s.shape
    aug = np.concatenate([s, th[:, None]], axis=1)  # (Q, T+1)

    def masked_softmax(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.where(mask, aug, -np.inf)
        m = a.max(axis=1, keepdims=True)
        e = np.exp(a - m)
        z = e.sum(axis=1, keepdims=True)
        return (m[:, 0] + np.log(z[:, 0])), e / z

    ones = np.ones((q, 1), dtype=bool)
    npos = pos.sum(axis=1)

    # Positives vs threshold: sum of cross entropies, one per gold type.
    mask1 = np.concatenate([pos, ones], axis=1)
    lse1, soft1 = masked_softmax(mask1)
    loss1 = npos * lse1 - (s * pos).sum(axis=1)
    d1 = npos[:, None] * soft1
    d1[:, :t][pos] -= 1.0
    d1[npos == 0] = 0.0
    loss1 = np.where(npos == 0, 0.0, loss1)

    # Threshold vs negatives: one cross entropy with the threshold as truth.
    mask2 = np.concatenate([~pos, ones], axis=1)
    lse2, soft2 = masked_softmax(mask2)
    loss2 = lse2 - th
    d2 = soft2.copy()
    d2[:, t] -= 1.0

    d = d1 + d2
    return loss1 + loss2, d[:, :t], d[:, t]


# ---------------------------------------------------------------------------
# Episode-level forward/backward


@dataclass(eq=False)
class QueryDocForward:
    doc_id: str
    types: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...]
    x: np.ndarray            # (Q, 2d) raw pair representations
    zq: np.ndarray           # (Q, h)
    s: np.ndarray            # (Q, T) type scores
    th: np.ndarray           # (Q,)
    nota_win: np.ndarray     # (Q,) index into the active NOTA set
    gold: tuple[frozenset[str], ...]
    sie_argmax: Optional[dict[str, np.ndarray]]  # type -> (Q,) instance index


def _forward_query_doc(
    doc_id: str,
    gold_triples: frozenset,
    features: FeatureExtractor,
    index: SupportIndex,
    state: ModelState,
    nota_vecs: np.ndarray,
) -> QueryDocForward:
    feats = features.features(doc_id)
    gold_by_pair: dict[tuple[int, int], set[str]] = {}
    for h, r, t in gold_triples:
        gold_by_pair.setdefault((h, t), set()).add(r)
    gold = tuple(frozenset(gold_by_pair.get(p, frozenset())) for p in feats.pairs)

    x = np.asarray(feats.reps, dtype=np.float64)
    zq = state.project(x)
    types = index.types
    sie_argmax: Optional[dict[str, np.ndarray]] = None
    if state.use_sie:
        cols = []
        sie_argmax = {}
        for t in types:
            dots = zq @ index.positives_proj[t].T  # (Q, n_t)
            sie_argmax[t] = dots.argmax(axis=1)
            cols.append(dots.max(axis=1))
        s = np.stack(cols, axis=1) if cols else np.zeros((len(x), 0))
    else:
        protos = prototypes(index)
        pmat = np.stack([protos[t] for t in types]) if types else np.zeros((0, state.h))
        s = zq @ pmat.T
    nd = zq @ nota_vecs.T
    win = nd.argmax(axis=1)
    th = nd[np.arange(len(x)), win]
    return QueryDocForward(doc_id, types, feats.pairs, x, zq, s, th, win, gold, sie_argmax)


def score_episode(
    episode: Episode,
    features: FeatureExtractor,
    state: ModelState,
) -> list[QueryDocForward]:
    """Forward pass over every query document of an episode."""
    index = prepare_episode(episode, features, state)
    nota_vecs, _ = active_nota_vectors(state)
    return [
        _forward_query_doc(doc_id, gold, features, index, state, nota_vecs)
        for doc_id, gold in zip(episode.query_doc_ids, episode.gold_query_triples)
    ]


def predicted_sets(fwd: QueryDocForward) -> list[frozenset[str]]:
    """Per query pair, the types scoring strictly above the NOTA threshold."""
    if not fwd.types:
        return [frozenset() for _ in range(len(fwd.x))]
    above = fwd.s > fwd.th[:, None]
    return [
        frozenset(t for j, t in enumerate(fwd.types) if above[i, j])
        for i in range(len(fwd.x))
    ]


def episode_loss_and_gradients(
    episode: Episode,
    features: FeatureExtractor,
    state: ModelState,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean adaptive-thresholding loss over the episode's query documents and
    its exact gradients for the projection, bias, and learned NOTA vectors.

    Each query document contributes the mean over its candidate pairs, and
    documents are averaged, so gradient magnitude does not scale with
    document size or query count.
    """
    index = prepare_episode(episode, features, state)
    nota_vecs, sources = active_nota_vectors(state)
    types = index.types
    type_pos = {t: i for i, t in enumerate(types)}

    dw = np.zeros_like(state.w)
    db = np.zeros_like(state.b)
    dnota = np.zeros_like(state._learned_nota)
    dproto = np.zeros((len(types), state.h))
    dsie: dict[str, np.ndarray] = {t: np.zeros_like(index.positives_proj[t]) for t in types} \
        if state.use_sie else {}
    dzn = np.zeros_like(index.nota_proj)

    total_loss = 0.0
    n_docs = len(episode.query_doc_ids)
    protos = None if state.use_sie else prototypes(index)
    pmat = None if state.use_sie else (
        np.stack([protos[t] for t in types]) if types else np.zeros((0, state.h))
    )

    for doc_id, gold_triples in zip(episode.query_doc_ids, episode.gold_query_triples):
        fwd = _forward_query_doc(doc_id, gold_triples, features, index, state, nota_vecs)
        q = len(fwd.x)
        if q == 0:
            continue
        pos = np.zeros((q, len(types)), dtype=bool)
        for i, g in enumerate(fwd.gold):
            for t in g:
                pos[i, type_pos[t]] = True
        loss_rows, ds, dth = _atl_batch(fwd.s, fwd.th, pos)
        scale = 1.0 / (q * n_docs)
        total_loss += loss_rows.sum() * scale
        ds = ds * scale
        dth = dth * scale

        # Query-side gradient: class vectors plus the winning NOTA vector.
        if state.use_sie:
            dzq = np.zeros_like(fwd.zq)
            for j, t in enumerate(types):
                inst = index.positives_proj[t]
                arg = fwd.sie_argmax[t]
                dzq += ds[:, j][:, None] * inst[arg]
                np.add.at(dsie[t], arg, ds[:, j][:, None] * fwd.zq)
        else:
            dzq = ds @ pmat
            dproto += ds.T @ fwd.zq
        dzq += dth[:, None] * nota_vecs[fwd.nota_win]
        for kind_idx, g, zrow in zip(fwd.nota_win, dth, fwd.zq):
            kind, idx = sources[int(kind_idx)]
            if kind == "learned":
                dnota[idx] += g * zrow
            else:
                dzn[state.sbn_indices[idx]] += g * zrow

        dw += dzq.T @ fwd.x
        db += dzq.sum(axis=0)

    # Support-side gradients through the projection.
    for j, t in enumerate(types):
        raw = index.positives_raw[t]
        if state.use_sie:
            dz = dsie[t]
            dw += dz.T @ raw
            db += dz.sum(axis=0)
        else:
            mean_raw = raw.mean(axis=0)
            dw += np.outer(dproto[j], mean_raw)
            db += dproto[j]
    if len(index.nota_raw):
        dw += dzn.T @ index.nota_raw
        db += dzn.sum(axis=0)

    return total_loss, {"w": dw, "b": db, "nota": dnota}


# ---------------------------------------------------------------------------
# Baseline: nearest support representation wins, no training


class BaselineModel:
    """Dot-product nearest-neighbour over raw support representations.

    Every support pair contributes one entry per relation label it holds,
    plus one unlabeled entry when it holds none; the query pair takes the
    label of the entry with the highest dot product (no label means NOTA).
    """

    def __init__(self, pooling: PoolingMode = "mention_mean"):
        self.pooling: PoolingMode = pooling

    def support_entries(self, episode: Episode, features: FeatureExtractor) -> tuple[np.ndarray, list[Optional[str]]]:
        vecs: list[np.ndarray] = []
        labels: list[Optional[str]] = []
        for doc_id, triples in zip(episode.support_doc_ids, episode.support_triples):
            feats = features.features(doc_id)
            by_pair: dict[tuple[int, int], set[str]] = {}
            for h, r, t in triples:
                by_pair.setdefault((h, t), set()).add(r)
            for i, pair in enumerate(feats.pairs):
                labs = by_pair.get(pair)
                if labs:
                    for r in sorted(labs):
                        vecs.append(feats.reps[i])
                        labels.append(r)
                else:
                    vecs.append(feats.reps[i])
                    labels.append(None)
        matrix = np.stack(vecs) if vecs else np.zeros((0, 0))
        return matrix, labels

    def predict_doc(
        self,
        query_doc_id: str,
        episode: Episode,
        features: FeatureExtractor,
        entries: Optional[tuple[np.ndarray, list[Optional[str]]]] = None,
    ) -> list[frozenset[str]]:
        matrix, labels = entries if entries is not None else self.support_entries(episode, features)
        feats = features.features(query_doc_id)
        out: list[frozenset[str]] = []
        if len(matrix) == 0:
            return [frozenset() for _ in feats.pairs]
        dots = feats.reps @ matrix.T
        for row in dots:
            lab = labels[int(np.argmax(row))]
            out.append(frozenset() if lab is None else frozenset([lab]))
        return out


# ---------------------------------------------------------------------------
# Checkpoint format: fixed header then float32 little-endian parameters.


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIBBBB",
                CHECKPOINT_VERSION,
                state.d,
                state.h,
                state.m,
                int(state.use_sie),
                int(state.use_sbn),
                0 if state.domain == DOMAIN_IN else 1,
                _POOLING_CODES[state.pooling],
            )
        )
        for arr in (state.w, state.b, state._learned_nota):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelState:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, d, h, m, sie, sbn, dom, pool = struct.unpack("<IIIIBBBB", fh.read(20))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")

        def read_array(shape: tuple[int, ...]) -> np.ndarray:
            n = int(np.prod(shape))
            buf = fh.read(n * 4)
            if len(buf) != n * 4:
                raise ValueError(f"{path}: truncated checkpoint")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)

        w = read_array((h, 2 * d))
        b = read_array((h,))
        nota = read_array((m, h))
    state = ModelState(
        w, b, nota,
        use_sie=bool(sie), use_sbn=bool(sbn),
        domain=DOMAIN_IN if dom == 0 else DOMAIN_CROSS,
        pooling=_POOLING_NAMES[pool],
    )
    state.nota_initialized = True
    return state
