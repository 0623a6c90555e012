"""Training loop, macro-F1 evaluation, and the study/eval protocols.

Training runs one episode per step with an adaptive-moments optimizer
(decoupled weight decay), linear warmup followed by linear decay, global
gradient-norm clipping, and early stopping on the development macro F1.
Evaluation pools confusion counts per relation type across episodes and
macro-averages per-type scores.
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .encoding import FeatureExtractor
from .episodes import (
    Episode,
    EpisodeSampler,
    SamplerConfig,
    STRATEGY_TRAIN_ENSURE_POSITIVE,
    STRATEGY_TEST,
)
from .models import (
    BaselineModel,
    ConfigurationError,
    ModelState,
    NotaInitError,
    build_support_index,
    episode_loss_and_gradients,
    init_learned_nota,
    predicted_sets,
    score_episode,
)

log = logging.getLogger(__name__)

LR_GRID = (1e-5, 3e-5, 5e-5, 1e-4)


class TrainingDiverged(Exception):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss!r} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    total_episodes: int = 50_000
    warmup_steps: int = 1_000
    learning_rate: float = 1e-5
    gradient_clip_norm: float = 1.0
    eval_interval: int = 1_000
    weight_decay: float = 0.01
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(
        strategy=STRATEGY_TRAIN_ENSURE_POSITIVE,
        n_support_docs=1,
        queries_per_episode=3,
        max_episode_schema=1,
        episode_count=1,
    ))
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_episodes:
            raise ValueError("warmup_steps must lie in [0, total_episodes)")


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then linear decay to zero."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    frac = (cfg.total_episodes - step) / max(1, cfg.total_episodes - cfg.warmup_steps)
    return cfg.learning_rate * max(0.0, frac)


class AdamW:
    """Adaptive-moments optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p -= lr * (update + self.weight_decay * p)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class TypeScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class EvalReport:
    per_type: dict[str, TypeScore]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    episode_count: int
    seeds: tuple[int, ...] = ()

    def to_text(self) -> str:
        lines = [f"{'type':<12} {'TP':>6} {'FP':>6} {'FN':>6} {'P':>8} {'R':>8} {'F1':>8}"]
        for t in sorted(self.per_type):
            s = self.per_type[t]
            lines.append(
                f"{t:<12} {s.tp:>6} {s.fp:>6} {s.fn:>6} "
                f"{s.precision:>8.4f} {s.recall:>8.4f} {s.f1:>8.4f}"
            )
        lines.append(
            f"macro over {len(self.per_type)} types / {self.episode_count} episodes: "
            f"P={self.macro_precision:.4f} R={self.macro_recall:.4f} F1={self.macro_f1:.4f}"
        )
        return "\n".join(lines)


def _report_from_counts(counts: dict[str, list[int]], episode_count: int,
                        seeds: tuple[int, ...] = ()) -> EvalReport:
    per_type = {t: TypeScore(*counts[t]) for t in sorted(counts) if any(counts[t])}
    if per_type:
        # fixed reduction order so the macro means are reordering-invariant
        macro_p = sum(per_type[t].precision for t in per_type) / len(per_type)
        macro_r = sum(per_type[t].recall for t in per_type) / len(per_type)
        macro_f = sum(per_type[t].f1 for t in per_type) / len(per_type)
    else:
        macro_p = macro_r = macro_f = 0.0
    return EvalReport(per_type, macro_p, macro_r, macro_f, episode_count, seeds)


class ConfusionAccumulator:
    """Pools per-type TP/FP/FN over (episode, query pair) predictions."""

    def __init__(self):
        self.counts: dict[str, list[int]] = {}
        self.episodes = 0

    def _slot(self, t: str) -> list[int]:
        return self.counts.setdefault(t, [0, 0, 0])

    def add_pair(self, predicted: frozenset[str], gold: frozenset[str]) -> None:
        for t in predicted & gold:
            self._slot(t)[0] += 1
        for t in predicted - gold:
            self._slot(t)[1] += 1
        for t in gold - predicted:
            self._slot(t)[2] += 1

    def add_episode(self) -> None:
        self.episodes += 1

    def report(self, seeds: tuple[int, ...] = ()) -> EvalReport:
        return _report_from_counts(self.counts, self.episodes, seeds)


def _predict_episode(model, episode: Episode, features: FeatureExtractor) -> list[tuple[frozenset[str], frozenset[str]]]:
    """(predicted, gold) for every query pair of one episode."""
    out: list[tuple[frozenset[str], frozenset[str]]] = []
    if isinstance(model, BaselineModel):
        entries = model.support_entries(episode, features)
        for doc_id, gold_triples in zip(episode.query_doc_ids, episode.gold_query_triples):
            feats = features.features(doc_id)
            gold_by_pair: dict[tuple[int, int], set[str]] = {}
            for h, r, t in gold_triples:
                gold_by_pair.setdefault((h, t), set()).add(r)
            preds = model.predict_doc(doc_id, episode, features, entries)
            for pair, pred in zip(feats.pairs, preds):
                out.append((pred, frozenset(gold_by_pair.get(pair, frozenset()))))
        return out
    for fwd in score_episode(episode, features, model):
        for pred, gold in zip(predicted_sets(fwd), fwd.gold):
            out.append((pred, gold))
    return out


def evaluate(
    model,
    episodes: Sequence[Episode],
    features: FeatureExtractor,
    *,
    seeds: tuple[int, ...] = (),
    granularity: str = "pooled",
) -> EvalReport:
    """Macro-F1 evaluation: confusion counts pooled per type across episodes,
    per-type F1, then the unweighted mean over types that occur as gold or
    predicted. Deterministic given (model, episode order-insensitive).

    ``granularity="per_episode"`` instead averages each episode's own macro
    F1 over episodes (the per-type table stays pooled); the default pooled
    mode is stabler under the many all-NOTA episodes.
    """
    if granularity not in ("pooled", "per_episode"):
        raise ValueError(f"unknown granularity {granularity!r}")
    acc = ConfusionAccumulator()
    episode_f1 = []
    for ep in episodes:
        ep_acc = ConfusionAccumulator() if granularity == "per_episode" else None
        for pred, gold in _predict_episode(model, ep, features):
            acc.add_pair(pred, gold)
            if ep_acc is not None:
                ep_acc.add_pair(pred, gold)
        acc.add_episode()
        if ep_acc is not None:
            ep_report = ep_acc.report()
            # episodes with neither gold nor predicted instances have no
            # defined F1 and are excluded from the mean
            if ep_report.per_type:
                episode_f1.append(ep_report.macro_f1)
    report = acc.report(seeds)
    if granularity == "per_episode":
        mean_f1 = sum(episode_f1) / len(episode_f1) if episode_f1 else 0.0
        report = EvalReport(report.per_type, report.macro_precision, report.macro_recall,
                            mean_f1, report.episode_count, seeds)
    return report


# ---------------------------------------------------------------------------
# Training


@dataclass(eq=False)
class TrainResult:
    state: ModelState
    best_dev_f1: float
    best_step: int
    history: list[tuple[int, float]]
    final_state: ModelState


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    train_types: Iterable[str],
    dev_episodes: Sequence[Episode],
    state: ModelState,
    features: FeatureExtractor,
    dev_features: Optional[FeatureExtractor] = None,
) -> TrainResult:
    """Episode-based training with early stopping on dev macro F1.

    The learned NOTA vectors are sampled from the first episode's support
    NOTA pool; episodes whose first draw is degenerate are resampled.
    """
    dev_features = dev_features or features
    sampler_cfg = SamplerConfig(**{**cfg.sampler.to_json(), "seed": cfg.seed})
    sampler = EpisodeSampler(corpus, train_types, sampler_cfg)
    opt = AdamW(state.parameters(), weight_decay=cfg.weight_decay)
    rng = random.Random(cfg.seed + 0x5EED)

    best_f1 = -1.0
    best_state = state.clone()
    best_step = 0
    history: list[tuple[int, float]] = []

    step = 0
    skips = 0
    while step < cfg.total_episodes:
        episode = sampler.sample_episode()
        if episode is None:
            skips += 1
            if skips > 100 * cfg.total_episodes:
                raise RuntimeError("episode sampler keeps skipping; corpus too sparse")
            continue
        if not state.nota_initialized:
            try:
                first_index = build_support_index(episode, features, state)
                vectors = init_learned_nota(first_index, state.m, rng)
            except NotaInitError:
                continue
            state.set_learned_nota(vectors)
            # The array object was replaced; rebind it for the optimizer.
            opt.params = state.parameters()
            opt.m["nota"] = np.zeros_like(vectors)
            opt.v["nota"] = np.zeros_like(vectors)

        step += 1
        loss, grads = episode_loss_and_gradients(episode, features, state)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        clip_gradients(grads, cfg.gradient_clip_norm)
        opt.step(grads, learning_rate_at(step, cfg))

        if step % cfg.eval_interval == 0 or step == cfg.total_episodes:
            report = evaluate(state, dev_episodes, dev_features)
            history.append((step, report.macro_f1))
            if report.macro_f1 > best_f1:
                best_f1 = report.macro_f1
                best_state = state.clone()
                best_step = step
            log.info("step %d: dev macro F1 %.4f (best %.4f @ %d)", step, report.macro_f1, best_f1, best_step)

    if best_f1 < 0:  # no eval ever ran
        best_state, best_f1, best_step = state.clone(), float("nan"), step
    return TrainResult(best_state, best_f1, best_step, history, state)


def select_learning_rate(
    rates: Sequence[float],
    run: "callable",
    seeds: Sequence[int],
) -> tuple[float, dict[float, float]]:
    """Pick the rate with the highest mean dev macro F1 across seeds.

    ``run(rate, seed)`` must return a dev macro-F1 score.
    """
    means: dict[float, float] = {}
    for rate in rates:
        scores = [run(rate, seed) for seed in seeds]
        means[rate] = sum(scores) / len(scores)
    best = max(means, key=lambda r: means[r])
    return best, means


# ---------------------------------------------------------------------------
# Variance study


def variance_study(
    model,
    corpus: Corpus,
    split_types: Iterable[str],
    features: FeatureExtractor,
    *,
    max_episodes: int = 50_000,
    interval: int = 100,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    n_support_docs: int = 1,
) -> dict[int, list[tuple[int, float]]]:
    """Running macro-F1 curves over freshly sampled episode streams.

    For each seed, the macro F1 over all episodes seen so far is logged
    every ``interval`` episodes; the curves show how many episodes a
    representative measurement needs.
    """
    curves: dict[int, list[tuple[int, float]]] = {}
    for seed in seeds:
        cfg = SamplerConfig(
            n_support_docs=n_support_docs,
            episode_count=max_episodes,
            seed=seed,
            strategy=STRATEGY_TEST,
        )
        sampler = EpisodeSampler(corpus, split_types, cfg)
        acc = ConfusionAccumulator()
        points: list[tuple[int, float]] = []
        for i in range(1, max_episodes + 1):
            ep = sampler.sample_episode()
            if ep is None:
                continue
            for pred, gold in _predict_episode(model, ep, features):
                acc.add_pair(pred, gold)
            acc.add_episode()
            if i % interval == 0 or i == max_episodes:
                points.append((i, acc.report().macro_f1))
        curves[seed] = points
    return curves


def variance_study_std(curves: dict[int, list[tuple[int, float]]]) -> list[tuple[int, float]]:
    """Cross-seed standard deviation of the running macro F1 per checkpoint."""
    by_count: dict[int, list[float]] = {}
    for points in curves.values():
        for count, f1 in points:
            by_count.setdefault(count, []).append(f1)
    out = []
    for count in sorted(by_count):
        vals = by_count[count]
        if len(vals) == len(curves):
            out.append((count, float(np.std(vals))))
    return out


def write_variance_curves(curves: dict[int, list[tuple[int, float]]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "episode_count", "macro_f1"])
        for seed in sorted(curves):
            for count, f1 in curves[seed]:
                writer.writerow([seed, count, f"{f1:.6f}"])


# ---------------------------------------------------------------------------
# Full-support evaluation


def full_support_eval(
    state: ModelState,
    support_corpus: Corpus,
    query_corpus: Corpus,
    full_schema: Iterable[str],
    support_features: FeatureExtractor,
    query_features: FeatureExtractor,
) -> EvalReport:
    """Initialize prototypes from an entire support corpus and evaluate every
    query document against the full schema.

    Prototype mode only: instance banks over thousands of documents are
    deliberately rejected to bound memory.
    """
    if state.use_sie or state.use_sbn:
        raise ConfigurationError(
            "full-support evaluation runs in prototype mode only; instance banks are disallowed"
        )
    schema = frozenset(full_schema)

    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for doc in support_corpus.documents:
        feats = support_features.features(doc.doc_id)
        by_pair: dict[tuple[int, int], set[str]] = {}
        for t in doc.triples:
            if t.relation in schema:
                by_pair.setdefault((t.head, t.tail), set()).add(t.relation)
        for i, pair in enumerate(feats.pairs):
            for r in by_pair.get(pair, ()):
                z = state.project(feats.reps[i])
                if r in sums:
                    sums[r] += z
                    counts[r] += 1
                else:
                    sums[r] = z.copy()
                    counts[r] = 1

    types = tuple(sorted(sums))
    if not types:
        log.warning("full_support_eval: no support instances for any schema type")
        return _report_from_counts({}, len(query_corpus.documents))
    pmat = np.stack([sums[t] / counts[t] for t in types])
    nota = state.learned_nota

    acc = ConfusionAccumulator()
    for doc in query_corpus.documents:
        feats = query_features.features(doc.doc_id)
        if not feats.pairs:
            acc.add_episode()
            continue
        gold_by_pair: dict[tuple[int, int], set[str]] = {}
        for t in doc.triples:
            if t.relation in schema:
                gold_by_pair.setdefault((t.head, t.tail), set()).add(t.relation)
        zq = state.project(feats.reps)
        s = zq @ pmat.T
        th = (zq @ nota.T).max(axis=1)
        above = s > th[:, None]
        for i, pair in enumerate(feats.pairs):
            pred = frozenset(t for j, t in enumerate(types) if above[i, j])
            acc.add_pair(pred, frozenset(gold_by_pair.get(pair, frozenset())))
        acc.add_episode()
    return acc.report()
