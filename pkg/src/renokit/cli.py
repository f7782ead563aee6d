"""Command-line entry point.

Exit codes: 0 success, 2 validation/config error, 3 stage failure,
4 request budget exhausted.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import __version__
from .dedup import DedupConfig, run_dedup
from .endpoint import ChatClient, EndpointConfig, OfflineTransport, ResponseArchive
from .errors import (
    BudgetExhausted,
    ConfigError,
    LexiconMissing,
    RenokitError,
    SchemaError,
    StageFailure,
    UnknownSchema,
    UnknownTokenizer,
)
from .evalharness import (
    EvalRunConfig,
    best_of_settings,
    load_dataset,
    run_eval,
    sweep_report,
)
from .filters import FilterConfig, run_filters
from .ingest import (
    SOURCE_KINDS,
    ingest_stream,
    read_documents,
    records_from_path,
    write_documents,
)
from .jsonl import read_json, read_jsonl, write_json, write_jsonl
from .mixer import MixPlan, build_mip, emit_trainer_config, mix, record_tokens
from .pipeline import run_pipeline, summarize_artifact
from .sftgen import batch_generate, load_template, read_instruction_samples, term_frequency_report
from .tokenizers import DEFAULT_TOKENIZER

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3
EXIT_BUDGET = 4

_VALIDATION_ERRORS = (ConfigError, SchemaError, UnknownSchema, UnknownTokenizer, LexiconMissing, ValueError)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renokit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"renokit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="extract clean documents from raw sources")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--kind", choices=SOURCE_KINDS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tokenizer", default=DEFAULT_TOKENIZER)
    p.add_argument("--stats", help="where to write ingest stats JSON")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("filter", help="apply sensitive/language/length filters")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", help="filter config JSON")

    p = sub.add_parser("dedup", help="exact, near-duplicate, and sentence dedup")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--config", help="dedup config JSON")
    p.add_argument("--tokenizer", default=DEFAULT_TOKENIZER)

    p = sub.add_parser("mix", help="build a ratio-controlled training set")
    p.add_argument("--domain", required=True)
    p.add_argument("--general")
    p.add_argument("--instructions", help="instruction JSONL (mip mode)")
    p.add_argument("--ratio", default="1:0")
    p.add_argument("--mode", default="dapt", choices=("dapt", "sft", "mip"))
    p.add_argument("--unit", default="tokens", choices=("tokens", "examples"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--allow-short", action="store_true")
    p.add_argument("--tokenizer", default=DEFAULT_TOKENIZER)

    p = sub.add_parser("emit-config", help="write trainer hyperparameters for a mode")
    p.add_argument("--mode", required=True, choices=("dapt", "sft", "mip"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="generate instruction data from knowledge docs")
    p.add_argument("--kind", required=True, choices=("one-turn", "multi-turn", "mcq"))
    p.add_argument("--knowledge", required=True)
    p.add_argument("--endpoint", required=True, help="endpoint config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, required=True, help="max requests to send")
    p.add_argument("--archive", help="raw-response archive dir (default: <out>.archive)")
    p.add_argument("--report", help="where to write the generation report")
    p.add_argument("--template", help="override prompt template file")
    p.add_argument("--categories", help="override category list file")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--replay-only", action="store_true", help="never touch the network; archive must be complete")

    p = sub.add_parser("eval", help="evaluate an endpoint on an MCQ dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--shots", default="0,5", help="comma-separated shot counts")
    p.add_argument("--out", required=True, help="best-setting report JSON")
    p.add_argument("--extraction", default="letter_regex", choices=("letter_regex", "option_logprob"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-model", help="model label for sweep tables")
    p.add_argument("--label-ratio", help="data-ratio label for sweep tables")

    p = sub.add_parser("sweep-report", help="tabulate eval reports by model and ratio")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--text", help="aligned text table output path")

    p = sub.add_parser("term-freq", help="term frequency table over instruction data")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stopwords", help="newline-delimited stop-word list")
    p.add_argument("--top", type=int, default=50)

    p = sub.add_parser("stats", help="summarize any toolkit artifact file")
    p.add_argument("path")

    p = sub.add_parser("run", help="run the full pipeline from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")

    return parser


def _cmd_ingest(args) -> int:
    records = []
    for path in args.inputs:
        records.extend(records_from_path(path, args.kind))
    docs, stats = ingest_stream(records, tokenizer=args.tokenizer, workers=args.workers)
    write_documents(args.out, docs)
    if args.stats:
        write_json(args.stats, stats.to_dict())
    print(f"ingested {stats.total_documents} docs, {stats.total_tokens} tokens ({stats.tokenizer}); "
          f"failures: {sum(stats.failures.values())}")
    return EXIT_OK


def _cmd_filter(args) -> int:
    cfg = FilterConfig.from_dict(read_json(args.config)) if args.config else FilterConfig()
    docs = read_documents(args.input)
    kept, report = run_filters(docs, cfg)
    write_documents(args.out, kept)
    write_json(args.report, report.to_dict())
    drops = ", ".join(f"{k}={v}" for k, v in report.dropped.items())
    print(f"retained {report.retained}/{report.input} (dropped: {drops})")
    return EXIT_OK


def _cmd_dedup(args) -> int:
    cfg = DedupConfig.from_dict(read_json(args.config)) if args.config else DedupConfig()
    docs = read_documents(args.input)
    unique, pairs, report = run_dedup(docs, cfg, tokenizer=args.tokenizer)
    write_documents(args.out, unique)
    write_jsonl(args.pairs, (p.to_dict() for p in pairs))
    drops = ", ".join(f"{k}={v}" for k, v in report.dropped.items())
    print(f"retained {report.retained}/{report.input} (dropped: {drops}); {report.pairs} near-dup pairs")
    return EXIT_OK


def _cmd_mix(args) -> int:
    domain = [obj for _, obj in read_jsonl(args.domain)]
    if args.mode == "mip":
        if args.general:
            raise ConfigError("mip mode takes no general data")
        if not args.instructions:
            raise ConfigError("mip mode requires --instructions")
        instructions = [s.to_dict() for s in read_instruction_samples(args.instructions)]
        mixed = build_mip(domain, instructions, seed=args.seed)
        write_jsonl(args.out, mixed)
        if args.report:
            write_json(args.report, {
                "mode": "mip",
                "seed": args.seed,
                "pretrain_count": len(domain),
                "instruction_count": len(instructions),
                "total_tokens": sum(record_tokens(r, args.tokenizer) for r in mixed),
                "tokenizer": args.tokenizer,
            })
        print(f"mip set: {len(mixed)} records")
        return EXIT_OK
    ratio_domain, ratio_general = MixPlan.parse_ratio(args.ratio)
    if ratio_domain != 1:
        raise ConfigError("ratio must have domain part 1")
    plan = MixPlan(ratio_general=ratio_general, mode=args.mode, seed=args.seed, unit=args.unit)
    general = [obj for _, obj in read_jsonl(args.general)] if args.general else []
    mixed, report = mix(domain, general, plan, tokenizer=args.tokenizer, allow_short=args.allow_short)
    write_jsonl(args.out, mixed)
    if args.report:
        write_json(args.report, report.to_dict())
    print(f"mixed {report.domain_count} domain + {report.general_count} general "
          f"(achieved ratio {report.achieved_ratio:.4f}, target 1:{ratio_general})")
    return EXIT_OK


def _cmd_emit_config(args) -> int:
    cfg = emit_trainer_config(args.mode, args.out)
    print(f"trainer config for {args.mode}: max_length={cfg.max_length}")
    return EXIT_OK


def _cmd_gen(args) -> int:
    kind = args.kind.replace("-", "_")
    endpoint = EndpointConfig.from_json(args.endpoint)
    transport = OfflineTransport() if args.replay_only else None
    client = ChatClient(endpoint, transport)
    docs = read_documents(args.knowledge)
    archive = ResponseArchive(args.archive or f"{args.out}.archive")
    template = load_template(kind, body_path=args.template, categories_path=args.categories)
    items, report = batch_generate(
        docs, [kind], client,
        budget=args.budget,
        archive=archive,
        templates={kind: template},
        lenient=args.lenient,
    )
    write_jsonl(args.out, (it.to_dict() for it in items))
    if args.report:
        write_json(args.report, report.to_dict())
    print(f"accepted {report.accepted}, rejected {report.rejected_total}, "
          f"sent {report.requests_sent}, replayed {report.replayed}")
    if report.budget_exhausted:
        raise BudgetExhausted("partial output written; rerun with the same archive to resume")
    return EXIT_OK


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    endpoint = EndpointConfig.from_json(args.endpoint)
    labels = {}
    if args.label_model:
        labels["model"] = args.label_model
    if args.label_ratio:
        labels["ratio"] = args.label_ratio
    reports = []
    for shots_text in args.shots.split(","):
        cfg = EvalRunConfig(
            shots=int(shots_text),
            extraction=args.extraction,
            seed=args.seed,
            endpoint=endpoint,
        )
        report = run_eval(dataset, cfg, labels=labels)
        print(f"shots={cfg.shots}: micro={report.overall_micro} macro={report.overall_macro}")
        reports.append(report)
    best = best_of_settings(reports)
    best.save(args.out)
    print(f"best setting: shots={best.config['shots']} micro={best.overall_micro}")
    return EXIT_OK


def _cmd_sweep_report(args) -> int:
    rows = []
    for path in args.runs:
        obj = read_json(path)
        rows.append({
            "model_label": obj.get("labels", {}).get("model") or obj.get("config", {}).get("model") or "model",
            "ratio_label": obj.get("labels", {}).get("ratio") or "-",
            "scores": {obj["dataset"]: obj["overall_micro"]},
        })
    merged: dict[tuple[str, str], dict] = {}
    for row in rows:
        key = (row["model_label"], row["ratio_label"])
        if key in merged:
            merged[key]["scores"].update(row["scores"])
        else:
            merged[key] = row
    out_rows, text = sweep_report(list(merged.values()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(out_rows[0]))
        writer.writeheader()
        writer.writerows(out_rows)
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_term_freq(args) -> int:
    samples = [obj for _, obj in read_jsonl(args.input)]
    stopwords = ()
    if args.stopwords:
        stopwords = tuple(
            w.strip() for w in Path(args.stopwords).read_text(encoding="utf-8").splitlines() if w.strip()
        )
    ranked = term_frequency_report(samples, stopwords=stopwords, top_k=args.top)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "count"])
        writer.writerows(ranked)
    for term, count in ranked[:10]:
        print(f"{term}\t{count}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    print(summarize_artifact(args.path))
    return EXIT_OK


def _cmd_run(args) -> int:
    manifest = run_pipeline(args.config, args.out_dir, resume=args.resume)
    print(f"pipeline complete: {len(manifest.records)} stage records in {manifest.path}")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "filter": _cmd_filter,
    "dedup": _cmd_dedup,
    "mix": _cmd_mix,
    "emit-config": _cmd_emit_config,
    "gen": _cmd_gen,
    "eval": _cmd_eval,
    "sweep-report": _cmd_sweep_report,
    "term-freq": _cmd_term_freq,
    "stats": _cmd_stats,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RenokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
