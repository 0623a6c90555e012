"""Command-line wrapper around the exporter."""

import argparse
import logging
import sys

from .exporter import AlignmentError, ExportConfig, ModelFetchError, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-export", description=__doc__)
    parser.add_argument("--corpus", required=True, help="canonical corpus file")
    parser.add_argument("--model", required=True, help="model path or hub identifier")
    parser.add_argument("--out", required=True, help="exchange file to write")
    parser.add_argument("--window", type=int, default=512, help="max corpus tokens per window")
    parser.add_argument("--stride", type=int, default=128, help="overlap between windows")
    parser.add_argument("--device", default="cpu")
    return parser


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args()
    cfg = ExportConfig(
        corpus_path=args.corpus,
        model_id=args.model,
        output_path=args.out,
        max_window_length=args.window,
        window_stride=args.stride,
        device=args.device,
    )
    try:
        summary = export_embeddings(cfg)
    except (ModelFetchError, AlignmentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    print(
        f"wrote {summary['documents']} documents "
        f"({summary['windowed_documents']} windowed, d={summary['d']}) -> {summary['output']}"
    )


if __name__ == "__main__":
    main()
