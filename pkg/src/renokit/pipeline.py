"""End-to-end pipeline runner with a digest-chained manifest.

Each stage records the sha256 of its inputs, outputs, and config in an
append-only manifest. A resumed run re-verifies those digests: a matching
stage is skipped, a tampered intermediate file is an error rather than a
silent recompute.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import __version__
from .dedup import DedupConfig, run_dedup
from .errors import BudgetExhausted, ConfigError, StageFailure, UnknownSchema
from .endpoint import ChatClient, EndpointConfig, ResponseArchive, utc_now_iso
from .evalharness import EvalRunConfig, best_of_settings, load_dataset, run_eval
from .filters import FilterConfig, run_filters
from .ingest import (
    DOMAIN_KINDS,
    SOURCE_KINDS,
    ingest_stream,
    read_documents,
    records_from_path,
    write_documents,
)
from .jsonl import read_json, read_jsonl, write_json, write_jsonl
from .mixer import MixPlan, build_mip, emit_trainer_config, mix, record_tokens
from .sftgen import DIFFICULTIES, batch_generate, load_template, read_instruction_samples
from .tokenizers import DEFAULT_TOKENIZER

STAGES = ("ingest", "filter", "dedup", "mix", "gen", "eval")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


@dataclass
class StageRecord:
    stage: str
    config_digest: str
    seed: int
    inputs: dict[str, str]
    outputs: dict[str, str]
    started: str
    finished: str

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StageRecord":
        return cls(**obj)


@dataclass
class PipelineManifest:
    path: Path
    version: str = __version__
    records: list[StageRecord] = field(default_factory=list)

    @classmethod
    def load_or_create(cls, path: str | Path) -> "PipelineManifest":
        path = Path(path)
        if path.exists():
            obj = read_json(path)
            return cls(
                path=path,
                version=obj.get("version", __version__),
                records=[StageRecord.from_dict(r) for r in obj.get("stages", [])],
            )
        return cls(path=path)

    def save(self) -> None:
        write_json(self.path, {"version": self.version, "stages": [r.to_dict() for r in self.records]})

    def append(self, record: StageRecord) -> None:
        self.records.append(record)
        self.save()

    def latest(self, stage: str) -> StageRecord | None:
        for record in reversed(self.records):
            if record.stage == stage:
                return record
        return None

    def output_digests(self) -> dict[str, str]:
        merged: dict[str, str] = {}
        for record in self.records:
            merged.update(record.outputs)
        return merged


def _doc_records(path: Path) -> list[dict]:
    return [obj for _, obj in read_jsonl(path)]


class PipelineRunner:
    """Executes ingest -> filter -> dedup -> mix (plus optional gen/eval)
    from one JSON config.

    `gen_transport` / `eval_transport` override the HTTP transport for the
    endpoint-backed stages; tests inject deterministic mocks there.
    """

    def __init__(
        self,
        config: dict,
        config_dir: Path,
        out_dir: Path,
        resume: bool = False,
        gen_transport=None,
        eval_transport=None,
    ):
        self.config = config
        self.config_dir = config_dir
        self.out_dir = Path(out_dir)
        self.resume = resume
        self.seed = int(config.get("seed", 0))
        self.tokenizer = config.get("tokenizer", DEFAULT_TOKENIZER)
        self.gen_transport = gen_transport
        self.eval_transport = eval_transport
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = PipelineManifest.load_or_create(self.out_dir / "manifest.json")

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.config_dir / p

    def _stage_digest(self, stage: str) -> str:
        scoped = {
            "stage_config": self.config.get(stage if stage != "filter" else "filters", {}),
            "seed": self.seed,
            "tokenizer": self.tokenizer,
            "version": __version__,
        }
        return config_digest(scoped)

    def _can_skip(self, stage: str, digest: str) -> bool:
        if not self.resume:
            return False
        record = self.manifest.latest(stage)
        if record is None or record.config_digest != digest:
            return False
        for path_str, want in {**record.inputs, **record.outputs}.items():
            path = Path(path_str)
            if not path.exists():
                return False
            if file_digest(path) != want:
                raise StageFailure(stage, f"digest mismatch for {path} (file changed since last run)")
        return True

    def _run_stage(self, stage: str, inputs: list[Path], action: Callable[[], list[Path]]) -> None:
        digest = self._stage_digest(stage)
        if self._can_skip(stage, digest):
            return
        started = utc_now_iso()
        try:
            outputs = action()
        except (StageFailure, BudgetExhausted):
            raise
        except Exception as exc:
            raise StageFailure(stage, str(exc)) from exc
        self.manifest.append(
            StageRecord(
                stage=stage,
                config_digest=digest,
                seed=self.seed,
                inputs={str(p): file_digest(p) for p in inputs},
                outputs={str(p): file_digest(p) for p in outputs},
                started=started,
                finished=utc_now_iso(),
            )
        )

    # --- stages -----------------------------------------------------------

    def stage_ingest(self) -> None:
        cfg = self.config.get("ingest")
        if not cfg or not cfg.get("inputs"):
            raise ConfigError("config.ingest.inputs is required")
        input_paths = []
        for spec in cfg["inputs"]:
            kind = spec.get("kind")
            if kind not in SOURCE_KINDS:
                raise ConfigError(f"ingest input kind must be one of {SOURCE_KINDS}, got {kind!r}")
            if "path" not in spec:
                raise ConfigError("every ingest input needs a 'path'")
            input_paths.append(self._resolve(spec["path"]))

        def action() -> list[Path]:
            records = []
            for spec, path in zip(cfg["inputs"], input_paths):
                records.extend(records_from_path(path, spec["kind"]))
            docs, stats = ingest_stream(records, tokenizer=self.tokenizer, workers=int(cfg.get("workers", 1)))
            docs_path = self.out_dir / "docs.jsonl"
            stats_path = self.out_dir / "ingest_stats.json"
            write_documents(docs_path, docs)
            write_json(stats_path, stats.to_dict())
            return [docs_path, stats_path]

        self._run_stage("ingest", input_paths, action)

    def stage_filter(self) -> None:
        cfg = self.config.get("filters", {})
        filter_cfg = FilterConfig.from_dict(
            {**cfg, "sensitive_word_list": self._resolve_opt(cfg.get("sensitive_word_list"))}
        )
        docs_path = self.out_dir / "docs.jsonl"

        def action() -> list[Path]:
            docs = read_documents(docs_path)
            kept, report = run_filters(docs, filter_cfg)
            kept_path = self.out_dir / "kept.jsonl"
            report_path = self.out_dir / "filter_report.json"
            write_documents(kept_path, kept)
            write_json(report_path, report.to_dict())
            return [kept_path, report_path]

        self._run_stage("filter", [docs_path], action)

    def _resolve_opt(self, rel: str | None) -> str | None:
        return str(self._resolve(rel)) if rel else None

    def stage_dedup(self) -> None:
        cfg = DedupConfig.from_dict(self.config.get("dedup", {}))
        kept_path = self.out_dir / "kept.jsonl"

        def action() -> list[Path]:
            docs = read_documents(kept_path)
            unique, pairs, report = run_dedup(docs, cfg, tokenizer=self.tokenizer)
            unique_path = self.out_dir / "unique.jsonl"
            pairs_path = self.out_dir / "dup_pairs.jsonl"
            report_path = self.out_dir / "dedup_report.json"
            write_documents(unique_path, unique)
            write_jsonl(pairs_path, (p.to_dict() for p in pairs))
            write_json(report_path, report.to_dict())
            return [unique_path, pairs_path, report_path]

        self._run_stage("dedup", [kept_path], action)

    def stage_mix(self) -> None:
        cfg = self.config.get("mix")
        if not cfg:
            return
        ratio_domain, ratio_general = MixPlan.parse_ratio(cfg.get("ratio", "1:0"))
        if ratio_domain != 1:
            raise ConfigError("mix ratio must have domain part 1")
        plan = MixPlan(
            ratio_general=ratio_general,
            mode=cfg.get("mode", "dapt"),
            seed=int(cfg.get("seed", self.seed)),
            unit=cfg.get("unit", "tokens"),
        )
        unique_path = self.out_dir / "unique.jsonl"
        inputs = [unique_path]
        instructions_path = self._resolve_opt(cfg.get("instructions"))
        if plan.mode == "mip":
            if not instructions_path:
                raise ConfigError("mix.instructions is required in mip mode")
            inputs.append(Path(instructions_path))

        def action() -> list[Path]:
            records = _doc_records(unique_path)
            domain = [r for r in records if r.get("source_kind") in DOMAIN_KINDS]
            general = [r for r in records if r.get("source_kind") == "general"]
            train_path = self.out_dir / "train.jsonl"
            report_path = self.out_dir / "mix_report.json"
            trainer_path = self.out_dir / "trainer_config.json"
            if plan.mode == "mip":
                instructions = [s.to_dict() for s in read_instruction_samples(instructions_path)]
                mixed = build_mip(domain, instructions, seed=plan.seed)
                report = {
                    "mode": "mip",
                    "seed": plan.seed,
                    "pretrain_count": len(domain),
                    "instruction_count": len(instructions),
                    "total_tokens": sum(record_tokens(r, self.tokenizer) for r in mixed),
                    "tokenizer": self.tokenizer,
                }
            else:
                mixed, mix_report = mix(
                    domain, general, plan,
                    tokenizer=self.tokenizer,
                    allow_short=bool(cfg.get("allow_short", False)),
                )
                report = mix_report.to_dict()
            write_jsonl(train_path, mixed)
            write_json(report_path, report)
            emit_trainer_config(plan.mode, trainer_path)
            return [train_path, report_path, trainer_path]

        self._run_stage("mix", inputs, action)

    def stage_gen(self) -> None:
        cfg = self.config.get("gen")
        if not cfg:
            return
        for key in ("endpoint", "budget"):
            if key not in cfg:
                raise ConfigError(f"gen.{key} is required")
        endpoint_path = self._resolve(cfg["endpoint"])
        endpoint = EndpointConfig.from_json(endpoint_path)
        kind = str(cfg.get("kind", "one_turn")).replace("-", "_")
        unique_path = self.out_dir / "unique.jsonl"

        def action() -> list[Path]:
            docs = read_documents(unique_path)
            domain_docs = [d for d in docs if d.source_kind in DOMAIN_KINDS]
            client = ChatClient(endpoint, self.gen_transport)
            archive = ResponseArchive(self.out_dir / "gen_archive")
            template = load_template(
                kind,
                body_path=self._resolve_opt(cfg.get("template")),
                categories_path=self._resolve_opt(cfg.get("categories")),
            )
            items, report = batch_generate(
                domain_docs, [kind], client,
                budget=int(cfg["budget"]),
                archive=archive,
                templates={kind: template},
                lenient=bool(cfg.get("lenient", False)),
            )
            sft_path = self.out_dir / "sft.jsonl"
            report_path = self.out_dir / "gen_report.json"
            write_jsonl(sft_path, (it.to_dict() for it in items))
            write_json(report_path, report.to_dict())
            if report.budget_exhausted:
                raise BudgetExhausted(
                    "generation budget exhausted; partial sft.jsonl written, archive is resumable"
                )
            return [sft_path, report_path]

        self._run_stage("gen", [unique_path, endpoint_path], action)

    def stage_eval(self) -> None:
        cfg = self.config.get("eval")
        if not cfg:
            return
        for key in ("dataset", "endpoint"):
            if key not in cfg:
                raise ConfigError(f"eval.{key} is required")
        dataset_path = self._resolve(cfg["dataset"])
        endpoint_path = self._resolve(cfg["endpoint"])
        endpoint = EndpointConfig.from_json(endpoint_path)
        shots_list = cfg.get("shots", [0, 5])

        def action() -> list[Path]:
            dataset = load_dataset(dataset_path)
            reports = []
            for shots in shots_list:
                run_cfg = EvalRunConfig(
                    shots=int(shots),
                    extraction=cfg.get("extraction", "letter_regex"),
                    seed=self.seed,
                    endpoint=endpoint,
                )
                reports.append(
                    run_eval(dataset, run_cfg, transport=self.eval_transport, labels=cfg.get("labels", {}))
                )
            best = best_of_settings(reports)
            report_path = self.out_dir / "eval_report.json"
            best.save(report_path)
            return [report_path]

        self._run_stage("eval", [dataset_path, endpoint_path], action)

    def run(self) -> PipelineManifest:
        self.stage_ingest()
        self.stage_filter()
        self.stage_dedup()
        self.stage_mix()
        self.stage_gen()
        self.stage_eval()
        return self.manifest


def run_pipeline(
    config_path: str | Path,
    out_dir: str | Path,
    resume: bool = False,
    gen_transport=None,
    eval_transport=None,
) -> PipelineManifest:
    config_path = Path(config_path)
    try:
        config = read_json(config_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read pipeline config {config_path}: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("pipeline config must be a JSON object")
    runner = PipelineRunner(
        config,
        config_path.parent,
        Path(out_dir),
        resume=resume,
        gen_transport=gen_transport,
        eval_transport=eval_transport,
    )
    return runner.run()


# --- artifact summaries -------------------------------------------------------


def _summarize_documents(rows: list[dict]) -> str:
    by_kind: dict[str, int] = {}
    by_status: dict[str, int] = {}
    tokens: dict[str, int] = {}
    for r in rows:
        by_kind[r["source_kind"]] = by_kind.get(r["source_kind"], 0) + 1
        by_status[r["status"]] = by_status.get(r["status"], 0) + 1
        tokens[r["source_kind"]] = tokens.get(r["source_kind"], 0) + int(r["token_count"])
    lines = [f"documents: {len(rows)}"]
    for kind in sorted(by_kind):
        lines.append(f"  {kind}: {by_kind[kind]} docs, {tokens[kind]} tokens")
    lines.append("status: " + ", ".join(f"{k}={v}" for k, v in sorted(by_status.items())))
    lines.append(f"total tokens: {sum(tokens.values())}")
    return "\n".join(lines)


def _summarize_mcq(rows: list[dict]) -> str:
    per: dict[str, dict] = {}
    types: dict[str, int] = {}
    for r in rows:
        bucket = per.setdefault(r["difficulty"], {"questions": 0, "subclasses": set()})
        bucket["questions"] += 1
        bucket["subclasses"].add(r["subclass"])
        types[r["question_type"]] = types.get(r["question_type"], 0) + 1
    canonical = [d for d in DIFFICULTIES if d in per] + sorted(set(per) - set(DIFFICULTIES))
    lines = [f"{'category':<20}{'subclasses':>12}{'questions':>12}"]
    total_sub = 0
    for diff in canonical:
        n_sub = len(per[diff]["subclasses"])
        total_sub += n_sub
        lines.append(f"{diff:<20}{n_sub:>12}{per[diff]['questions']:>12}")
    lines.append(f"{'TOTAL':<20}{total_sub:>12}{len(rows):>12}")
    lines.append("question types: " + ", ".join(f"{k}={v}" for k, v in sorted(types.items())))
    return "\n".join(lines)


def _summarize_instructions(rows: list[dict]) -> str:
    kinds: dict[str, int] = {}
    turns_total = 0
    categories: dict[str, int] = {}
    for r in rows:
        kinds[r["kind"]] = kinds.get(r["kind"], 0) + 1
        turns_total += len(r["turns"])
        if r.get("category"):
            categories[r["category"]] = categories.get(r["category"], 0) + 1
    lines = [f"instruction samples: {len(rows)}"]
    for kind in sorted(kinds):
        lines.append(f"  {kind}: {kinds[kind]}")
    lines.append(f"turns total: {turns_total}")
    if categories:
        top = sorted(categories.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
        lines.append("top categories: " + ", ".join(f"{c}={n}" for c, n in top))
    return "\n".join(lines)


def summarize_artifact(path: str | Path) -> str:
    """Human-readable summary of any toolkit artifact file."""
    path = Path(path)
    if path.suffix == ".jsonl":
        rows = [obj for _, obj in read_jsonl(path)]
        if not rows:
            raise UnknownSchema(f"{path}: empty file")
        first = rows[0]
        if {"doc_id", "text", "source_kind"} <= first.keys():
            return _summarize_documents(rows)
        if {"question", "options", "correct_option"} <= first.keys():
            return _summarize_mcq(rows)
        if {"kind", "turns"} <= first.keys():
            return _summarize_instructions(rows)
        if {"a", "b", "jaccard"} <= first.keys():
            return f"duplicate pairs: {len(rows)}"
        if {"id", "text"} <= first.keys():
            return f"training records: {len(rows)}"
        raise UnknownSchema(f"{path}: unrecognized JSONL schema (keys: {sorted(first)})")
    if path.suffix == ".json":
        obj = read_json(path)
        if not isinstance(obj, dict):
            raise UnknownSchema(f"{path}: expected a JSON object")
        if "stages" in obj:
            stages = ", ".join(r["stage"] for r in obj["stages"])
            return f"manifest: {len(obj['stages'])} stage records ({stages})"
        if "overall_micro" in obj:
            return (
                f"eval report: {obj.get('dataset')} items={obj.get('items_total')} "
                f"micro={obj.get('overall_micro')} macro={obj.get('overall_macro')}"
            )
        if "pairs" in obj and "dropped" in obj:
            dropped = ", ".join(f"{k}={v}" for k, v in obj["dropped"].items())
            return (
                f"dedup report: input={obj['input']} retained={obj['retained']} dropped: {dropped}; "
                f"tokens {obj['tokens_in']} -> {obj['tokens_out']}; {obj['pairs']} near-dup pairs"
            )
        if "dropped" in obj and "retained" in obj:
            dropped = ", ".join(f"{k}={v}" for k, v in obj["dropped"].items())
            return f"filter report: input={obj['input']} retained={obj['retained']} dropped: {dropped}"
        if "requests_sent" in obj and "accepted" in obj:
            rejected = ", ".join(f"{k}={v}" for k, v in obj.get("rejected", {}).items()) or "none"
            return (
                f"generation report: accepted={obj['accepted']} rejected: {rejected}; "
                f"sent={obj['requests_sent']} replayed={obj.get('replayed', 0)}"
            )
        if "achieved_ratio" in obj:
            return (
                f"mix report: mode={obj.get('mode')} ratio=1:{obj.get('ratio_general')} "
                f"achieved={obj.get('achieved_ratio'):.4f} seed={obj.get('seed')}"
            )
        if "max_length" in obj and "precision" in obj:
            return "trainer config: " + ", ".join(f"{k}={v}" for k, v in obj.items())
        if "tokenizer" in obj and "documents" in obj:
            return "ingest stats: " + json.dumps(obj, ensure_ascii=False)
        raise UnknownSchema(f"{path}: unrecognized JSON schema (keys: {sorted(obj)})")
    raise UnknownSchema(f"{path}: expected .json or .jsonl")
