"""Command-line entry point wiring the modules into reproducible pipelines."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import corpus as corpus_mod
from . import episodes as episodes_mod
from . import models as models_mod
from . import schema as schema_mod
from . import training as training_mod
from .encoding import EncoderSpec, FeatureExtractor

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

_STRATEGIES = {
    "test": episodes_mod.STRATEGY_TEST,
    "random": episodes_mod.STRATEGY_TRAIN_RANDOM,
    "ensure-positive": episodes_mod.STRATEGY_TRAIN_ENSURE_POSITIVE,
}


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path: Path, args: argparse.Namespace, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": args.command,
        "arguments": {k: str(v) for k, v in vars(args).items() if k != "func"},
        "inputs": {str(p): _hash_file(p) for p in inputs if p and p.exists()},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _load_split(arg: str) -> schema_mod.SchemaSplit:
    if arg == "default":
        return schema_mod.default_split()
    return schema_mod.load_split(arg)


def _encoder_spec(args: argparse.Namespace) -> EncoderSpec:
    if args.encoder == "builtin":
        return EncoderSpec("builtin_hash", d=args.d, seed=args.encoder_seed)
    if not args.embeddings:
        raise ValueError("--embeddings is required with --encoder file")
    from .encoding import read_embedding_file

    header, _ = read_embedding_file(args.embeddings)
    return EncoderSpec("precomputed_file", d=header["d"], path=args.embeddings)


def _make_state(args: argparse.Namespace, d: int) -> models_mod.ModelState:
    variant = args.variant
    return models_mod.ModelState.create(
        d,
        h=args.h,
        m=args.m,
        seed=args.seed,
        init=args.init,
        use_sie=variant in ("sie", "sie-sbn"),
        use_sbn=variant == "sie-sbn",
        domain="cross_domain" if args.domain == "cross" else "in_domain",
        pooling=args.pooling,
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args: argparse.Namespace) -> int:
    parts = []
    inputs = []
    if args.docred_train:
        parts.append(corpus_mod.load_docred(args.docred_train, "train"))
        inputs.append(Path(args.docred_train))
    if args.docred_dev:
        parts.append(corpus_mod.load_docred(args.docred_dev, "dev"))
        inputs.append(Path(args.docred_dev))
    if args.scierc:
        parts.append(corpus_mod.load_scierc(args.scierc))
        inputs.append(Path(args.scierc))
    if not parts:
        raise ValueError("nothing to ingest: pass --docred-train/--docred-dev/--scierc")
    merged = parts[0] if len(parts) == 1 else corpus_mod.merge_corpora(args.name or "merged", *parts)
    if args.name:
        merged = corpus_mod.Corpus(args.name, merged.documents, merged.schema)
    out = Path(args.out)
    corpus_mod.save_corpus(merged, out)
    write_manifest(out, args, inputs, [out])
    print(f"ingested {len(merged)} documents, {len(merged.schema)} relation types -> {out}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    report = corpus_mod.validate(corpus)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_stats(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    stats = corpus_mod.corpus_stats(corpus)
    print(f"corpus            {corpus.name}")
    print(f"documents         {stats.doc_count}")
    print(f"relation types    {stats.relation_type_count}")
    print(f"candidate pairs   {stats.mean_candidate_pairs_per_doc:.1f} /doc")
    print(f"words             {stats.mean_words_per_doc:.1f} /doc")
    print(f"sentences         {stats.mean_sentences_per_doc:.1f} /doc")
    print(f"NOTA fraction     {stats.nota_fraction:.4f}")
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    split = _load_split(args.split)
    print(f"split {split.name}: train={len(split.train_types)} dev={len(split.dev_types)} "
          f"test={len(split.test_types)} removed={len(split.removed_types)}")
    if args.out:
        payload = {
            "name": split.name,
            "train": sorted(split.train_types),
            "dev": sorted(split.dev_types),
            "test": sorted(split.test_types),
            "removed": split.removed_types,
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        print(f"split config -> {args.out}")
    if args.corpus:
        corpus = corpus_mod.load_corpus(args.corpus)
        shared = schema_mod.compute_overlap(schema_mod.default_overlap_map(), corpus.schema)
        stripped = schema_mod.strip_relation_types(corpus, shared)
        print(f"overlap types removed: {sorted(shared)}")
        print(f"schema after removal: {len(stripped.schema)} types")
        missing = split.all_types - stripped.schema
        if missing:
            print(f"warning: {len(missing)} split types missing from corpus: {sorted(missing)[:5]} ...")
        if args.out_corpus:
            out = Path(args.out_corpus)
            corpus_mod.save_corpus(stripped, out)
            write_manifest(out, args, [Path(args.corpus)], [out])
            print(f"stripped corpus -> {out}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    split = _load_split(args.split)
    types = split.set_for(args.set)
    for k in range(args.seeds):
        seed = args.seed + k
        cfg = episodes_mod.SamplerConfig(
            n_support_docs=args.n_docs,
            episode_count=args.count,
            seed=seed,
            strategy=_STRATEGIES[args.strategy],
            queries_per_episode=args.queries,
            max_episode_schema=args.max_schema,
        )
        sampler = episodes_mod.EpisodeSampler(corpus, types, cfg)
        eps = sampler.sample()
        out = Path(args.out_dir) / f"episodes-{args.set}-{args.n_docs}doc-seed{seed}.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        episodes_mod.save_episodes(eps, out, corpus=corpus, split_id=split.name, cfg=cfg)
        write_manifest(out, args, [Path(args.corpus)], [out])
        stats = episodes_mod.episode_statistics(eps)
        print(f"seed {seed}: {len(eps)} episodes -> {out} "
              f"(N={stats.mean_n:.2f} K_micro={stats.mean_k_micro:.2f} K_macro={stats.mean_k_macro:.2f})")
    return EXIT_OK


def cmd_nk_stats(args: argparse.Namespace) -> int:
    for path in args.episodes:
        _, eps = episodes_mod.load_episodes(path)
        stats = episodes_mod.episode_statistics(eps)
        print(f"{path}: episodes={len(eps)} N={stats.mean_n:.2f} "
              f"K_micro={stats.mean_k_micro:.2f} K_macro={stats.mean_k_macro:.2f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    split = _load_split(args.split)
    spec = _encoder_spec(args)
    features = FeatureExtractor(corpus, spec, args.pooling, max_cache_docs=args.feature_cache)

    # development episodes mirror the training sampling strategy (without
    # the episode-schema cap); ensure-positive needs far fewer of them
    dev_cfg = episodes_mod.SamplerConfig(
        n_support_docs=args.n_docs,
        episode_count=args.dev_episodes,
        seed=args.seed + 991,
        strategy=_STRATEGIES[args.strategy],
        queries_per_episode=3 if args.n_docs == 1 else 1,
    )
    dev_eps = episodes_mod.EpisodeSampler(corpus, split.dev_types, dev_cfg).sample()

    sampler_cfg = episodes_mod.SamplerConfig(
        n_support_docs=args.n_docs,
        episode_count=1,
        seed=args.seed,
        strategy=_STRATEGIES[args.strategy],
        queries_per_episode=3 if args.n_docs == 1 else 1,
        max_episode_schema=1,
    )
    cfg = training_mod.TrainConfig(
        total_episodes=args.episodes,
        warmup_steps=args.warmup,
        learning_rate=args.lr,
        eval_interval=args.eval_interval,
        sampler=sampler_cfg,
        seed=args.seed,
    )
    state = _make_state(args, spec.d)
    result = training_mod.train(cfg, corpus, split.train_types, dev_eps, state, features)
    out = Path(args.out)
    models_mod.save_checkpoint(result.state, out)
    write_manifest(out, args, [Path(args.corpus)], [out])
    print(f"best dev macro F1 {result.best_dev_f1:.4f} at step {result.best_step} -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    header, eps = episodes_mod.load_episodes(args.episodes)
    if header.get("corpus_hash") != corpus_mod.corpus_hash(corpus):
        log.warning("episode set was sampled from a different corpus than %s", args.corpus)
    spec = _encoder_spec(args)
    if args.variant == "baseline":
        model = models_mod.BaselineModel(pooling=args.pooling)
        features = FeatureExtractor(corpus, spec, model.pooling, max_cache_docs=args.feature_cache)
    else:
        model = models_mod.load_checkpoint(args.model)
        if args.domain:
            model.domain = "cross_domain" if args.domain == "cross" else "in_domain"
        features = FeatureExtractor(corpus, spec, model.pooling, max_cache_docs=args.feature_cache)
    granularity = args.granularity.replace("-", "_")
    seeds = (header["seed"],) if "seed" in header else ()
    report = training_mod.evaluate(model, eps, features, seeds=seeds, granularity=granularity)
    print(report.to_text())
    if args.out:
        rows = {
            t: {"tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision,
                "recall": s.recall, "f1": s.f1}
            for t, s in report.per_type.items()
        }
        payload = {
            "per_type": rows,
            "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
            "macro_f1": report.macro_f1,
            "episode_count": report.episode_count,
        }
        out = Path(args.out)
        out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        write_manifest(out, args, [Path(args.corpus), Path(args.episodes)], [out])
    return EXIT_OK


def cmd_variance_study(args: argparse.Namespace) -> int:
    corpus = corpus_mod.load_corpus(args.corpus)
    split = _load_split(args.split)
    model = models_mod.load_checkpoint(args.model)
    spec = _encoder_spec(args)
    features = FeatureExtractor(corpus, spec, model.pooling, max_cache_docs=args.feature_cache)
    curves = training_mod.variance_study(
        model,
        corpus,
        split.set_for(args.set),
        features,
        max_episodes=args.max_episodes,
        interval=args.interval,
        seeds=tuple(range(args.seed, args.seed + args.seeds)),
        n_support_docs=args.n_docs,
    )
    out = Path(args.out)
    training_mod.write_variance_curves(curves, out)
    write_manifest(out, args, [Path(args.corpus), Path(args.model)], [out])
    stds = training_mod.variance_study_std(curves)
    if stds:
        first, last = stds[0], stds[-1]
        print(f"cross-seed std: {first[1]:.4f} @ {first[0]} episodes "
              f"-> {last[1]:.4f} @ {last[0]} episodes")
    print(f"{args.seeds} curves x {args.max_episodes // args.interval} points -> {out}")
    return EXIT_OK


def cmd_full_support_eval(args: argparse.Namespace) -> int:
    support = corpus_mod.load_corpus(args.support_corpus)
    query = corpus_mod.load_corpus(args.query_corpus)
    model = models_mod.load_checkpoint(args.model)
    spec = _encoder_spec(args)
    report = training_mod.full_support_eval(
        model,
        support,
        query,
        support.schema,
        FeatureExtractor(support, spec, model.pooling, max_cache_docs=args.feature_cache),
        FeatureExtractor(query, spec, model.pooling, max_cache_docs=args.feature_cache),
    )
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_text(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_encoder_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", choices=["builtin", "file"], default="builtin")
    p.add_argument("--d", type=int, default=64, help="builtin encoder dimensionality")
    p.add_argument("--encoder-seed", type=int, default=0)
    p.add_argument("--embeddings", help="embedding exchange file for --encoder file")
    p.add_argument("--pooling", choices=["marker", "mention_mean"], default="marker")
    p.add_argument("--feature-cache", type=int, default=None,
                   help="max documents in the pair-feature cache (default unbounded)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewdocre", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize release files into the canonical corpus format")
    p.add_argument("--docred-train")
    p.add_argument("--docred-dev")
    p.add_argument("--scierc")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("validate", help="check corpus invariants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="inspect the relation-type split and overlap removal")
    p.add_argument("--split", default="default")
    p.add_argument("--corpus")
    p.add_argument("--out", help="write the split config to a file")
    p.add_argument("--out-corpus")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sample", help="sample episode sets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="default")
    p.add_argument("--set", choices=["train", "dev", "test"], default="test")
    p.add_argument("--n-docs", type=int, default=1)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--strategy", choices=list(_STRATEGIES), default="test")
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--max-schema", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("nk-stats", help="episode-set N/K statistics")
    p.add_argument("episodes", nargs="+")
    p.set_defaults(func=cmd_nk_stats)

    p = sub.add_parser("train", help="train a model head")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="default")
    p.add_argument("--n-docs", type=int, default=1)
    p.add_argument("--strategy", choices=["random", "ensure-positive"], default="ensure-positive")
    p.add_argument("--episodes", type=int, default=50_000)
    p.add_argument("--warmup", type=int, default=1_000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--eval-interval", type=int, default=1_000)
    p.add_argument("--dev-episodes", type=int, default=500,
                   help="development episodes (convention: 500 with ensure-positive, 4000 with random)")
    p.add_argument("--variant", choices=["dlmnav", "sie", "sie-sbn"], default="dlmnav")
    p.add_argument("--domain", choices=["in", "cross"], default="in")
    p.add_argument("--h", type=int)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--init", choices=["gaussian", "identity"], default="gaussian")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_encoder_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the baseline on an episode set")
    p.add_argument("--model")
    p.add_argument("--episodes", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", choices=["checkpoint", "baseline"], default="checkpoint")
    p.add_argument("--domain", choices=["in", "cross"])
    p.add_argument("--granularity", choices=["pooled", "per-episode"], default="pooled")
    p.add_argument("--out")
    _add_encoder_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("variance-study", help="running macro-F1 curves across seeds")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="default")
    p.add_argument("--set", choices=["train", "dev", "test"], default="test")
    p.add_argument("--max-episodes", type=int, default=50_000)
    p.add_argument("--interval", type=int, default=100)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-docs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_encoder_args(p)
    p.set_defaults(func=cmd_variance_study)

    p = sub.add_parser("full-support-eval", help="prototype evaluation with a whole corpus as support")
    p.add_argument("--model", required=True)
    p.add_argument("--support-corpus", required=True)
    p.add_argument("--query-corpus", required=True)
    p.add_argument("--out")
    _add_encoder_args(p)
    p.set_defaults(func=cmd_full_support_eval)

    return parser


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except corpus_mod.CorpusValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
