"""Acceptance suite: one test per criterion, one printed verdict line each.

Criteria 1-3 partially depend on the public DocRED/sciERC release files;
those parts skip with instructions when the files are absent. Everything
else runs on synthetic corpora and exact numeric oracles.
"""

import math
import random
from collections import Counter

import numpy as np
import pytest

from fewdocre.corpus import corpus_stats, load_docred, load_scierc, merge_corpora
from fewdocre.encoding import EncoderSpec, FeatureExtractor
from fewdocre.episodes import (
    EpisodeSampler,
    SamplerConfig,
    STRATEGY_TEST,
    STRATEGY_TRAIN_ENSURE_POSITIVE,
    episode_statistics,
    sample_test_episodes,
    save_episodes,
)
from fewdocre.models import (
    BaselineModel,
    Logits,
    ModelState,
    atl_loss,
    build_support_index,
    episode_loss_and_gradients,
    predicted_sets,
    prototypes,
    sbn_sample,
    score_episode,
)
from fewdocre.schema import (
    compute_overlap,
    default_overlap_map,
    default_split,
    docred_full_schema,
    strip_relation_types,
)
from fewdocre.synthetic import SyntheticSpec, build_separable_corpus, partition_by_types
from fewdocre.training import ConfusionAccumulator, TrainConfig, evaluate, train
from corpus_helpers import make_corpus, make_doc, require_docred, require_scierc
from model_helpers import random_episode


def report(criterion: int, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS — {detail}")


# ---------------------------------------------------------------------------
# 1. Corpus fidelity (public release files required)


def test_criterion_1_corpus_fidelity():
    train_path, dev_path = require_docred()
    scierc_file = require_scierc()

    train = load_docred(train_path, "train")
    dev = load_docred(dev_path, "dev")
    assert len(train) == 3053
    assert len(dev) == 998
    docred = merge_corpora("docred", train, dev)
    stats = corpus_stats(docred)
    assert stats.doc_count == 4051
    assert stats.relation_type_count == 96
    assert abs(stats.mean_candidate_pairs_per_doc - 393.5) <= 2
    assert abs(stats.mean_words_per_doc - 172) <= 5
    assert abs(stats.nota_fraction - 0.9684) <= 0.001

    scierc = load_scierc(scierc_file)
    sstats = corpus_stats(scierc)
    assert sstats.doc_count == 500
    assert sstats.relation_type_count == 7
    assert abs(sstats.mean_candidate_pairs_per_doc - 187) <= 5

    report(1, f"DocRED {stats.doc_count} docs / {stats.relation_type_count} types, "
              f"CP {stats.mean_candidate_pairs_per_doc:.1f}, NOTA {stats.nota_fraction:.4f}; "
              f"sciERC {sstats.doc_count} docs / {sstats.relation_type_count} types")


# ---------------------------------------------------------------------------
# 2. Schema pipeline


def test_criterion_2_schema_pipeline_packaged():
    full = docred_full_schema()
    assert len(full) == 96
    shared = compute_overlap(default_overlap_map(), full)
    assert shared == {"P279", "P361"}
    assert len(full - shared) == 94

    split = default_split()
    assert (len(split.train_types), len(split.dev_types), len(split.test_types)) == (62, 16, 16)
    assert split.all_types == full - shared
    assert "P131" in split.train_types
    assert "P27" in split.dev_types
    assert "P17" in split.test_types
    report(2, "schema 96 -> 94 after overlap removal; split 62/16/16; "
              "P131/P27/P17 in train/dev/test")


def test_criterion_2_schema_pipeline_on_docred():
    train_path, dev_path = require_docred()
    docred = merge_corpora(
        "docred", load_docred(train_path, "train"), load_docred(dev_path, "dev")
    )
    shared = compute_overlap(default_overlap_map(), docred.schema)
    assert shared == {"P279", "P361"}
    stripped = strip_relation_types(docred, shared)
    assert len(stripped.schema) == 94
    assert default_split().all_types == stripped.schema
    report(2, "DocRED corpus stripped to 94 types, equal to the packaged split union")


# ---------------------------------------------------------------------------
# 3. Episode statistics against the published means (release files required)


def _mean_stats(corpus, types, n_docs, count, seeds):
    agg = np.zeros(3)
    for seed in seeds:
        cfg = SamplerConfig(n_support_docs=n_docs, episode_count=count, seed=seed,
                            strategy=STRATEGY_TEST)
        stats = episode_statistics(EpisodeSampler(corpus, types, cfg).sample())
        agg += (stats.mean_n, stats.mean_k_micro, stats.mean_k_macro)
    return agg / len(seeds)


def test_criterion_3_episode_statistics():
    train_path, dev_path = require_docred()
    scierc_file = require_scierc()
    split = default_split()

    docred_dev = load_docred(dev_path, "dev")
    docred_dev = strip_relation_types(docred_dev, {"P279", "P361"})
    scierc = load_scierc(scierc_file)

    seeds = (0, 1, 2)
    targets = []
    got_in_1 = _mean_stats(docred_dev, split.test_types, 1, 15_000, seeds)
    targets.append(("in-domain 1-Doc", got_in_1, (2.18, 2.36, 2.24)))
    got_in_3 = _mean_stats(docred_dev, split.test_types, 3, 15_000, seeds)
    targets.append(("in-domain 3-Doc", got_in_3, (3.47, 4.30, 4.31)))
    got_x_1 = _mean_stats(scierc, scierc.schema, 1, 3_000, seeds)
    targets.append(("cross-domain 1-Doc", got_x_1, (4.26, 2.73, 2.40)))
    got_x_3 = _mean_stats(scierc, scierc.schema, 3, 3_000, seeds)
    targets.append(("cross-domain 3-Doc", got_x_3, (6.08, 5.55, 5.27)))

    for name, got, want in targets:
        for g, w in zip(got, want):
            assert abs(g - w) <= 0.10 * w, f"{name}: got {got}, want {want} (±10%)"
    report(3, "; ".join(f"{n} N={g[0]:.2f} K={g[1]:.2f}" for n, g, _ in targets))


# ---------------------------------------------------------------------------
# 4. Sampler properties (synthetic, exact)


def _single_type_corpus(n_types=6, docs_per_type=8):
    docs = []
    for k in range(n_types):
        for j in range(docs_per_type):
            docs.append(make_doc(f"t{k}d{j}", [f"h{k}v{j}", f"t{k}v{j}", f"x{k}{j}"],
                                 [(0, f"rel{k}", 1)]))
    return make_corpus("single", docs), frozenset(f"rel{k}" for k in range(n_types))


def test_criterion_4_sampler_properties(tmp_path):
    corpus, split = _single_type_corpus()

    # determinism: two runs, byte-identical files
    cfg = SamplerConfig(n_support_docs=1, episode_count=120, seed=13, strategy=STRATEGY_TEST)
    files = []
    for name in ("a", "b"):
        eps = sample_test_episodes(corpus, split, cfg)
        path = tmp_path / f"{name}.jsonl"
        save_episodes(eps, path, corpus=corpus, split_id="synthetic", cfg=cfg)
        files.append(path.read_bytes())
    assert files[0] == files[1]

    # anchor balancing within +/-1 and query/support disjointness
    eps = sample_test_episodes(corpus, split, cfg)
    counts = Counter(ep.anchor_type for ep in eps)
    assert max(counts.values()) - min(counts.values()) <= 1
    assert all(not set(ep.support_doc_ids) & set(ep.query_doc_ids) for ep in eps)

    # ensure_positive: every episode has an anchor-positive query document
    pos_cfg = SamplerConfig(n_support_docs=1, episode_count=150, seed=3,
                            strategy=STRATEGY_TRAIN_ENSURE_POSITIVE, queries_per_episode=3)
    pos_eps = EpisodeSampler(corpus, split, pos_cfg).sample()
    assert len(pos_eps) == 150
    hit = 0
    for ep in pos_eps:
        if any(
            any(t.relation == ep.anchor_type for t in corpus.document(d).triples)
            for d in ep.query_doc_ids
        ):
            hit += 1
    assert hit == len(pos_eps)

    report(4, f"byte-identical reruns; anchor spread {max(counts.values()) - min(counts.values())}; "
              f"disjoint support/query; ensure-positive {hit}/{len(pos_eps)}")


# ---------------------------------------------------------------------------
# 5. Head numerics


def test_criterion_5_head_numerics():
    # (a) hand case: ln 2 at rel. tol 1e-9
    loss, grads = atl_loss(Logits({"r": 0.0}, 0.0, ("learned", 0)), {"r"})
    assert loss == pytest.approx(math.log(2), rel=1e-9)

    # (b) finite-difference agreement over >= 100 random episodes at 64-bit
    variants = [
        {},
        {"use_sie": True},
        {"use_sbn": True},
        {"use_sie": True, "use_sbn": True},
        {"use_sbn": True, "domain": "cross_domain"},
    ]
    eps_step = 1e-6
    shuffler = random.Random(0)
    episodes_checked = 0
    worst = 0.0
    for trial in range(105):
        episode, features = random_episode(1000 + trial, d=4, n_types=2,
                                           n_support=1 + trial % 2, n_query=2)
        state = ModelState.create(4, h=5, m=3, seed=trial, **variants[trial % len(variants)])
        state.nota_initialized = True
        _, grads = episode_loss_and_gradients(episode, features, state)
        for name, arr in state.parameters().items():
            entries = list(np.ndindex(arr.shape))
            shuffler.shuffle(entries)
            for idx in entries[:3]:
                orig = arr[idx]
                arr[idx] = orig + eps_step
                up, _ = episode_loss_and_gradients(episode, features, state)
                arr[idx] = orig - eps_step
                down, _ = episode_loss_and_gradients(episode, features, state)
                arr[idx] = orig
                fd = (up - down) / (2 * eps_step)
                denom = max(abs(fd), abs(grads[name][idx]))
                if denom > 1e-7:
                    rel = abs(fd - grads[name][idx]) / denom
                    worst = max(worst, rel)
                    assert rel <= 1e-5, f"episode {trial}, {name}[{idx}]"
                else:
                    assert abs(fd - grads[name][idx]) <= 1e-7
        episodes_checked += 1
    assert episodes_checked >= 100

    # (c) SIE == prototype mode when every type has exactly one support instance
    for trial in range(20):
        episode, features = random_episode(2000 + trial, d=4, n_types=3, n_support=1, n_query=2)
        proto_state = ModelState.create(4, h=5, m=3, seed=trial)
        sie_state = ModelState.create(4, h=5, m=3, seed=trial, use_sie=True)
        proto_state.nota_initialized = sie_state.nota_initialized = True
        preds_p = [predicted_sets(f) for f in score_episode(episode, features, proto_state)]
        preds_s = [predicted_sets(f) for f in score_episode(episode, features, sie_state)]
        assert preds_p == preds_s

    # (d) SBN top-k equals a brute-force sort
    for trial in range(20):
        episode, features = random_episode(3000 + trial, d=4, n_types=2, n_support=1,
                                           n_query=0, n_entities=5)
        state = ModelState.create(4, h=6, m=3, seed=trial)
        state.nota_initialized = True
        index = build_support_index(episode, features, state)
        protos = prototypes(index)
        anchors = np.stack([protos[t] for t in index.types])
        k = min(3, len(index.nota_proj))
        idx, vecs = sbn_sample(index, anchors, k)
        expected = set()
        for row in anchors @ index.nota_proj.T:
            order = sorted(range(len(row)), key=lambda i: (-row[i], i))
            expected.update(order[:k])
        assert set(idx) == expected
        assert np.array_equal(vecs, index.nota_proj[list(idx)])

    report(5, f"ln2 exact; FD over {episodes_checked} episodes worst rel {worst:.2e}; "
              "SIE==prototype at K=1; SBN top-k == full sort")


# ---------------------------------------------------------------------------
# 6. Evaluation oracle


def test_criterion_6_evaluation_oracle():
    acc = ConfusionAccumulator()
    table = [
        ({"a"}, {"a"}), (set(), {"a"}), ({"b"}, set()), ({"b"}, {"b"}), ({"a"}, {"a", "b"}),
    ]
    for pred, gold in table:
        acc.add_pair(frozenset(pred), frozenset(gold))
    acc.add_episode()
    rep = acc.report()
    assert rep.per_type["a"].f1 == pytest.approx(0.8)
    assert rep.per_type["b"].f1 == pytest.approx(0.5)
    assert rep.macro_f1 == pytest.approx(0.65)

    # permutation invariance of full evaluation over episode order
    corpus, train_types, _ = build_separable_corpus(SyntheticSpec(n_docs=60, seed=23))
    features = FeatureExtractor(corpus, EncoderSpec("builtin_hash", d=16, seed=0), "mention_mean")
    cfg = SamplerConfig(episode_count=25, seed=2, strategy=STRATEGY_TEST)
    episodes = EpisodeSampler(corpus, train_types, cfg).sample()
    state = ModelState.create(16, h=8, m=4, seed=0, pooling="mention_mean")
    state.nota_initialized = True
    assert evaluate(state, episodes, features) == evaluate(state, list(reversed(episodes)), features)

    report(6, "hand fixture macro F1 = 0.65 exactly; episode-order permutation invariant")


# ---------------------------------------------------------------------------
# 7. Desk-scale learning smoke


def test_criterion_7_learning_smoke():
    corpus, train_types, dev_types = build_separable_corpus(
        SyntheticSpec(n_docs=400, seed=5, dev_doc_fraction=0.25)
    )
    parts = partition_by_types(corpus, {"train": train_types, "dev": dev_types})
    spec = EncoderSpec("builtin_hash", d=64, seed=2)
    tfeats = FeatureExtractor(parts["train"], spec, "mention_mean")
    dfeats = FeatureExtractor(parts["dev"], spec, "mention_mean")

    dev_cfg = SamplerConfig(n_support_docs=1, episode_count=200, seed=99,
                            strategy=STRATEGY_TRAIN_ENSURE_POSITIVE, queries_per_episode=3)
    dev_eps = EpisodeSampler(parts["dev"], dev_types, dev_cfg).sample()

    cfg = TrainConfig(
        total_episodes=2000, warmup_steps=100, learning_rate=0.02,
        eval_interval=500, seed=0,
        sampler=SamplerConfig(n_support_docs=1, episode_count=1, seed=0,
                              strategy=STRATEGY_TRAIN_ENSURE_POSITIVE,
                              queries_per_episode=3, max_episode_schema=1),
    )
    state = ModelState.create(64, h=128, m=20, seed=0, init="identity", pooling="mention_mean")
    result = train(cfg, parts["train"], train_types, dev_eps, state, tfeats, dev_features=dfeats)

    baseline = evaluate(BaselineModel(pooling="mention_mean"), dev_eps, dfeats)

    assert result.best_dev_f1 >= 0.9, f"trained head reached only {result.best_dev_f1:.4f}"
    assert baseline.macro_f1 < 0.9
    assert baseline.macro_f1 < result.best_dev_f1

    report(7, f"trained dev macro F1 {result.best_dev_f1:.3f} >= 0.9 within 2000 episodes; "
              f"baseline {baseline.macro_f1:.3f} stays below")


# ---------------------------------------------------------------------------
# 8. Explicit non-reproducibility of the published end-to-end magnitudes


def test_criterion_8_non_reproducibility_notice():
    # The published end-to-end scores (e.g. 7.05% 1-Doc in-domain macro F1,
    # 2.85% cross-domain with SIE+SBN, 45.75% recall at full support scale)
    # require fine-tuning a large pretrained language model over 50k episodes.
    # The head trained over frozen features cannot and must not be gated on
    # them; criteria 4-7 stand in. A directional check on exported real
    # embeddings (trained head beats the untrained baseline) can be run via
    # the CLI when such an exchange file is available; it is reported, never
    # gated.
    excluded = {
        "in_domain_1doc_f1": 0.0705,
        "cross_domain_sie_sbn_1doc_f1": 0.0285,
        "full_support_recall": 0.4575,
    }
    assert all(0 < v < 1 for v in excluded.values())
    report(8, "published end-to-end magnitudes excluded from gating "
              f"({', '.join(f'{k}={v:.2%}' for k, v in excluded.items())}); "
              "directional real-embedding check is non-gating")
