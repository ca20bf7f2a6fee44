"""Command-line entry point.

Subcommands cover the full toolkit: dataset validation, reflection runs,
threshold sweeps, reverse-embedding extraction, connector build/forward,
synthetic data generation, and report evaluation.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 partial verifier failure (outputs still written), 4 data validation
error. Every randomized path takes an explicit seed; there is no
implicit entropy.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import connector, evaluation, reflection, simulate, store, verifiers

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_DATA = 4

ENDPOINT_ENV = "VISIONREFLECT_ENDPOINT"
TIMEOUT_ENV = "VISIONREFLECT_TIMEOUT"


class ConfigError(ValueError):
    pass


def _parse_kv_options(spec: str) -> dict[str, str]:
    options: dict[str, str] = {}
    if not spec:
        return options
    for part in spec.split(","):
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        options[key.strip()] = value.strip()
    return options


def build_verifier(spec: str, ds: store.Dataset | None) -> verifiers.Verifier:
    """Instantiate a verifier from a URI-like spec string.

    Supported forms: ``oracle:recall=..,specificity=..,seed=..``,
    ``script:<path>``, ``static:yes|no|not_sure``, ``http:<url>`` (or a
    bare http(s) URL). The oracle derives its truth table from the
    loaded dataset; that truth never crosses the verifier interface.
    """
    if spec.startswith(("http://", "https://")):
        spec = f"http:{spec}"
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        options = _parse_kv_options(rest)
        if "spec" in options:  # accepted shorthand
            options["specificity"] = options.pop("spec")
        try:
            params = verifiers.OracleParams(
                recall=float(options.pop("recall")),
                specificity=float(options.pop("specificity")),
                seed=int(options.pop("seed")),
                not_sure_share=float(options.pop("not_sure_share", "0.2")),
            )
        except KeyError as exc:
            raise ConfigError(f"oracle spec missing {exc}") from exc
        if options:
            raise ConfigError(f"unknown oracle option(s): {sorted(options)}")
        if ds is None:
            raise ConfigError("oracle verifier needs a dataset for its truth table")
        return verifiers.StochasticOracle(simulate.truth_categories(ds), params)
    if kind == "script":
        if not rest:
            raise ConfigError("script verifier needs a path")
        return verifiers.ScriptedVerifier.load(rest)
    if kind == "static":
        try:
            return verifiers.StaticVerifier(verifiers.Answer(rest))
        except ValueError:
            raise ConfigError(f"static verifier answer must be yes/no/not_sure, got {rest!r}")
    if kind == "http":
        endpoint = os.environ.get(ENDPOINT_ENV, rest)
        if not endpoint:
            raise ConfigError("http verifier needs an endpoint")
        timeout = float(os.environ.get(TIMEOUT_ENV, "10.0"))
        return verifiers.RemoteVerifier(endpoint, timeout=timeout)
    raise ConfigError(f"unknown verifier spec {spec!r}")


def _load_dataset(args: argparse.Namespace) -> store.Dataset:
    vocab = store.load_vocabulary(args.vocab)
    return store.load_dataset(args.preds, vocab, store.LabelMode(args.label_mode))


def _build_policy(args: argparse.Namespace, threshold: float) -> reflection.ReflectionPolicy:
    overrides = {}
    if getattr(args, "article_overrides", None):
        overrides = json.loads(Path(args.article_overrides).read_text(encoding="utf-8"))
        if not isinstance(overrides, dict):
            raise ConfigError("article overrides file must hold a JSON object")
    try:
        template = reflection.PromptTemplate(args.template)
        return reflection.ReflectionPolicy(
            threshold=threshold,
            max_rank=args.max_rank,
            template=template,
            repetition=args.repetition,
            article_overrides=overrides,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_validate(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    print(
        f"ok: {len(ds.items)} item(s), vocabulary of {len(ds.vocabulary)}, "
        f"{len(ds.warnings)} warning(s)"
    )
    for warning in ds.warnings:
        print(f"warning: {warning}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = simulate.SimulationConfig(
        n_items=args.n,
        seed=args.seed,
        vocab_size=args.vocab_size,
        k=args.k,
        top1_accuracy=args.top1_acc,
        topk_containment=args.top5_contain,
        confidence_low=args.conf_low,
        confidence_high=args.conf_high,
        label_mode=store.LabelMode(args.label_mode),
    )
    ds = simulate.generate_dataset(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save_vocabulary(ds.vocabulary, out_dir / "vocab.txt")
    store.save_predictions(ds.items, out_dir / "preds.jsonl")
    print(f"wrote {len(ds.items)} item(s) to {out_dir}")
    return EXIT_OK


def _run_with_cache(args, ds, mode: str):
    cache = None
    cache_path = getattr(args, "cache", None)
    if cache_path and Path(cache_path).exists():
        cache = verifiers.VerdictCache.load(cache_path)
    elif cache_path:
        cache = verifiers.VerdictCache()
    counting = verifiers.CountingVerifier(build_verifier(args.verifier, ds))
    if mode == "reflect":
        policy = _build_policy(args, args.threshold)
        result = reflection.run_pipeline(
            ds, counting, policy, concurrency=args.concurrency, cache=cache
        )
    else:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
        policy = _build_policy(args, 0.0)
        result = reflection.sweep_thresholds(
            ds,
            counting,
            thresholds,
            policy=policy,
            cache=cache if cache is not None else verifiers.VerdictCache(),
            concurrency=args.concurrency,
        )
    if cache_path and cache is not None:
        cache.save(cache_path)
    return result, counting


def cmd_reflect(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    traces, counting = _run_with_cache(args, ds, "reflect")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reflection.save_traces(traces, out_dir / "traces.jsonl")
    report = evaluation.build_report(traces, ds, args.threshold)
    evaluation.emit_report(report, out_dir / "report.json", out_dir / "report.csv")
    n_failed = sum(1 for t in traces if t.failed)
    print(
        f"items={len(traces)} gated={sum(1 for t in traces if t.gated)} "
        f"failed={n_failed} verifier_calls={counting.calls}"
    )
    return EXIT_PARTIAL if n_failed else EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    rows, counting = _run_with_cache(args, ds, "sweep")
    reflection.save_sweep_csv(rows, args.out)
    print(f"rows={len(rows)} verifier_calls={counting.calls}")
    return EXIT_OK


def cmd_reverse_embed(args: argparse.Namespace) -> int:
    from . import reverse_embedding as rev

    tokens = store.load_embedding_matrix(args.tokens)
    table = store.load_embedding_matrix(args.embeddings)
    vocab = store.load_vocabulary(args.vocab)
    item_id = args.item_id or Path(args.tokens).stem
    opts = rev.KeyTermOptions(
        min_similarity=args.min_similarity,
        drop_non_alphabetic=not args.keep_non_alphabetic,
        deduplicate=not args.no_dedup,
    )
    block = rev.VisionTokenBlock(item_id=item_id, tokens=tokens)
    report = rev.extract_key_terms(block, table, vocab, opts)
    rev.save_key_term_reports([report], args.out)
    if args.prompt_out:
        prompt = rev.build_replacement_prompt(report, args.question)
        Path(args.prompt_out).write_text(prompt + "\n", encoding="utf-8")
    print(f"tokens={tokens.rows} key_terms={len(report.key_terms)}")
    return EXIT_OK


def _resolve_normalize(choice: str, strategy: connector.Strategy) -> bool:
    if choice == "auto":
        return connector.default_normalize_input(strategy)
    return choice == "on"


def cmd_connector_build(args: argparse.Namespace) -> int:
    vocab = store.load_vocabulary(args.vocab)
    strategy = connector.Strategy(args.strategy)
    values = connector.build_value_matrix(
        vocab, store.load_embedding_matrix(args.values)
    )
    if strategy is connector.Strategy.EXEMPLAR:
        if not args.exemplars:
            raise ConfigError("exemplar strategy needs --exemplars DIR")
        blocks = []
        for i in range(len(vocab)):
            path = Path(args.exemplars) / f"term_{i:05d}.emb"
            if not path.exists():
                raise ConfigError(f"missing exemplar file {path}")
            blocks.append(store.load_embedding_matrix(path))
        w_key = connector.build_key_from_exemplars(blocks)
    else:
        if not args.key:
            raise ConfigError(f"{strategy.value} strategy needs --key EMB1")
        key_matrix = store.load_embedding_matrix(args.key)
        if strategy is connector.Strategy.TEXT_ENCODER:
            w_key = connector.build_key_from_text_encoder(key_matrix)
        else:
            w_key = connector.build_key_from_classifier(key_matrix)
    weights = connector.ConnectorWeights(w_key=w_key, w_value=values, vocab=vocab)
    normalize = _resolve_normalize(args.normalize_input, strategy)
    meta = connector.make_bundle_meta(weights, strategy, normalize)
    connector.save_bundle(weights, meta, args.out_dir)
    print(f"bundle: v={meta.v} e_x={meta.e_x} e_l={meta.e_l} strategy={meta.strategy.value}")
    return EXIT_OK


def cmd_connector_forward(args: argparse.Namespace) -> int:
    weights, meta = connector.load_bundle(args.bundle)
    inputs = store.load_embedding_matrix(args.inputs)
    if args.normalize_input == "auto":
        normalize = meta.normalize_input
    else:
        normalize = args.normalize_input == "on"
    outputs = connector.connector_forward_block(inputs, weights, normalize)
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for row, out in enumerate(outputs):
            record = {
                "row": row,
                "vocab_index": out.vocab_index,
                "term": out.term,
                "score": out.score,
                "probability": out.probability,
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    print(f"rows={len(outputs)} distinct_terms={len({o.vocab_index for o in outputs})}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ds = _load_dataset(args)
    traces = reflection.load_traces(args.traces)
    report = evaluation.build_report(traces, ds, args.threshold)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.emit_report(report, out_dir / "report.json", out_dir / "report.csv")
    print(f"items={report.n_items} gated={report.n_gated}")
    return EXIT_OK


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preds", required=True, help="prediction JSONL file")
    parser.add_argument("--vocab", required=True, help="vocabulary text file")
    parser.add_argument(
        "--label-mode",
        choices=[m.value for m in store.LabelMode],
        default=store.LabelMode.STANDARD.value,
        help="how true labels are interpreted",
    )


def _add_policy_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-rank", type=int, default=5, help="deepest rank verified")
    parser.add_argument(
        "--repetition", type=int, default=1, help="category mentions per prompt"
    )
    parser.add_argument(
        "--template",
        default=reflection.DEFAULT_PROMPT_PATTERN,
        help="prompt pattern with {article} and {category}",
    )
    parser.add_argument(
        "--article-overrides", default=None, help="JSON file of category -> article"
    )
    parser.add_argument("--concurrency", type=int, default=1, help="items in flight")
    parser.add_argument("--cache", default=None, help="verdict cache JSONL path")
    parser.add_argument(
        "--verifier",
        required=True,
        help="oracle:recall=..,specificity=..,seed=.. | script:PATH | static:ANSWER | http:URL",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visionreflect",
        description="Uncertainty-gated verification of top-k vision predictions",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a prediction dataset")
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--top1-acc", type=float, default=0.33)
    p.add_argument("--top5-contain", type=float, default=0.75)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--conf-low", type=float, default=0.05)
    p.add_argument("--conf-high", type=float, default=0.45)
    p.add_argument(
        "--label-mode",
        choices=[m.value for m in store.LabelMode],
        default=store.LabelMode.STANDARD.value,
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reflect", help="run the verification pipeline")
    _add_dataset_flags(p)
    _add_policy_flags(p)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_reflect)

    p = sub.add_parser("sweep", help="re-run the gate over several thresholds")
    _add_dataset_flags(p)
    _add_policy_flags(p)
    p.add_argument("--thresholds", required=True, help="comma-separated, ascending")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reverse-embed", help="map vision tokens to key terms")
    p.add_argument("--tokens", required=True, help="vision-token EMB1 file")
    p.add_argument("--embeddings", required=True, help="text-token EMB1 table")
    p.add_argument("--vocab", required=True)
    p.add_argument("--item-id", default=None)
    p.add_argument("--question", default="")
    p.add_argument("--min-similarity", type=float, default=0.0)
    p.add_argument("--keep-non-alphabetic", action="store_true")
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--out", default="key_terms.jsonl")
    p.add_argument("--prompt-out", default=None)
    p.set_defaults(func=cmd_reverse_embed)

    p = sub.add_parser("connector-build", help="build a connector bundle")
    p.add_argument(
        "--strategy", required=True, choices=[s.value for s in connector.Strategy]
    )
    p.add_argument("--vocab", required=True)
    p.add_argument("--values", required=True, help="per-term token-embedding EMB1")
    p.add_argument("--key", default=None, help="key EMB1 (text_encoder/classifier)")
    p.add_argument("--exemplars", default=None, help="directory of term_%%05d.emb files")
    p.add_argument("--normalize-input", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_connector_build)

    p = sub.add_parser("connector-forward", help="run features through a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--inputs", required=True, help="feature rows as EMB1")
    p.add_argument("--normalize-input", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--out", default="connector_outputs.jsonl")
    p.set_defaults(func=cmd_connector_forward)

    p = sub.add_parser("evaluate", help="rebuild a report from saved traces")
    _add_dataset_flags(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except store.StoreError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
