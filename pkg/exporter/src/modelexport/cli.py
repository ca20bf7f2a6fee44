"""Batch CLI for the exporter.

Examples:
    modelexport text-embeddings --model synthetic:seed=1 \
        --vocab vocab.txt --out table.emb --manifest table.manifest.json
    modelexport predictions --model synthetic:seed=1 --images refs.txt \
        --labels labels.json --k 5 --out preds.jsonl --manifest m.json
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import export
from .sources import resolve_source


def _read_lines(path: str) -> list[str]:
    return [
        line.strip()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelexport")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", required=True, help="model id, e.g. synthetic:seed=1")
        p.add_argument("--manifest", required=True)

    p = sub.add_parser("text-embeddings")
    common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("key-text-encoder")
    common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("key-classifier")
    common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("exemplars")
    common(p)
    p.add_argument("--vocab", required=True)
    p.add_argument("--refs", required=True, help="JSON: term -> [image refs]")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("vision-tokens")
    common(p)
    p.add_argument("--images", required=True, help="text file, one image ref per line")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("predictions")
    common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True, help="JSON: image ref -> [label indices]")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-confidence", type=float, default=None)
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        source = resolve_source(args.model)
        if args.command == "text-embeddings":
            manifest = export.export_text_embedding_table(
                source, args.vocab, args.out, args.manifest
            )
        elif args.command == "key-text-encoder":
            manifest = export.export_key_text_encoder(
                source, args.vocab, args.out, args.manifest
            )
        elif args.command == "key-classifier":
            manifest = export.export_classifier_head(
                source, args.vocab, args.out, args.manifest
            )
        elif args.command == "exemplars":
            refs = json.loads(Path(args.refs).read_text(encoding="utf-8"))
            manifest = export.export_exemplar_features(
                source, args.vocab, refs, args.out_dir, args.manifest
            )
        elif args.command == "vision-tokens":
            manifest = export.export_vision_tokens(
                source, _read_lines(args.images), args.out_dir, args.manifest
            )
        else:
            labels = json.loads(Path(args.labels).read_text(encoding="utf-8"))
            labels = {k: v if isinstance(v, list) else [v] for k, v in labels.items()}
            manifest = export.export_predictions(
                source,
                _read_lines(args.images),
                args.k,
                labels,
                args.out,
                args.manifest,
                max_confidence=args.max_confidence,
            )
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"outputs={len(manifest.outputs)} errors={len(manifest.errors)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
