from __future__ import annotations

import json

import pytest

from renokit.cli import main
from renokit.endpoint import EndpointConfig
from renokit.jsonl import read_json, read_jsonl, write_jsonl
from renokit.pipeline import PipelineManifest, run_pipeline, summarize_artifact
from renokit.errors import StageFailure, UnknownSchema

from fixture_data import write_evalhome, write_pipeline_fixture


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture()
def corpus_dir(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    (raw / "a.txt").write_text("第一篇正常长度的中文文章内容，覆盖装修流程说明。", encoding="utf-8")
    (raw / "b.txt").write_text("第二篇正常长度的中文文章内容，介绍防水施工要点。", encoding="utf-8")
    return raw


class TestStageCommands:
    def test_ingest_filter_dedup_mix_chain(self, tmp_path, corpus_dir):
        docs = tmp_path / "docs.jsonl"
        assert run_cli("ingest", "--in", corpus_dir, "--kind", "domain_book", "--out", docs,
                       "--stats", tmp_path / "stats.json") == 0
        assert len(list(read_jsonl(docs))) == 2

        kept = tmp_path / "kept.jsonl"
        cfg = tmp_path / "filters.json"
        cfg.write_text('{"min_effective_chars": 5, "min_language_ratio": 0.5}', encoding="utf-8")
        assert run_cli("filter", "--in", docs, "--out", kept, "--report", tmp_path / "fr.json",
                       "--config", cfg) == 0
        report = read_json(tmp_path / "fr.json")
        assert report["input"] == 2 and report["retained"] == 2

        unique = tmp_path / "unique.jsonl"
        assert run_cli("dedup", "--in", kept, "--out", unique, "--pairs", tmp_path / "pairs.jsonl") == 0

        general = tmp_path / "general.jsonl"
        write_jsonl(general, [{"id": f"g{i}", "text": "通用内容样例" * 10, "source_kind": "general"} for i in range(20)])
        train = tmp_path / "train.jsonl"
        assert run_cli("mix", "--domain", unique, "--general", general, "--ratio", "1:1",
                       "--mode", "dapt", "--seed", 7, "--out", train, "--report", tmp_path / "mix.json") == 0
        assert read_json(tmp_path / "mix.json")["seed"] == 7

    def test_mix_short_pool_is_stage_error_without_flag(self, tmp_path):
        domain = tmp_path / "d.jsonl"
        general = tmp_path / "g.jsonl"
        write_jsonl(domain, [{"id": "d1", "text": "字" * 100, "source_kind": "domain_book", "token_count": 100}])
        write_jsonl(general, [{"id": "g1", "text": "字" * 10, "source_kind": "general", "token_count": 10}])
        out = tmp_path / "t.jsonl"
        assert run_cli("mix", "--domain", domain, "--general", general, "--ratio", "1:5",
                       "--mode", "dapt", "--out", out) == 3
        assert run_cli("mix", "--domain", domain, "--general", general, "--ratio", "1:5",
                       "--mode", "dapt", "--out", out, "--allow-short") == 0

    def test_emit_config(self, tmp_path):
        out = tmp_path / "trainer.json"
        assert run_cli("emit-config", "--mode", "sft", "--out", out) == 0
        assert read_json(out)["max_length"] == 1536

    def test_mix_mip_mode(self, tmp_path):
        domain = tmp_path / "d.jsonl"
        sft = tmp_path / "s.jsonl"
        write_jsonl(domain, [{"id": "d1", "text": "领域语料内容", "source_kind": "domain_book", "token_count": 6}])
        write_jsonl(sft, [{
            "kind": "one_turn",
            "turns": [{"role": "user", "content": "问？"}, {"role": "assistant", "content": "答。"}],
            "knowledge_id": "d1",
        }])
        out = tmp_path / "mip.jsonl"
        assert run_cli("mix", "--mode", "mip", "--domain", domain, "--instructions", sft,
                       "--seed", 3, "--out", out, "--report", tmp_path / "r.json") == 0
        rows = [obj for _, obj in read_jsonl(out)]
        assert {r["origin"] for r in rows} == {"pretrain", "instruction"}

    def test_mix_mip_rejects_general(self, tmp_path):
        domain = tmp_path / "d.jsonl"
        write_jsonl(domain, [{"id": "d1", "text": "x", "source_kind": "domain_book"}])
        assert run_cli("mix", "--mode", "mip", "--domain", domain, "--general", domain,
                       "--out", tmp_path / "o.jsonl") == 2


class TestStatsCommand:
    def test_mcq_stats_table(self, tmp_path, capsys):
        path = write_evalhome(tmp_path / "evalhome.jsonl")
        assert run_cli("stats", path) == 0
        out = capsys.readouterr().out
        assert "113" in out
        assert "25" in out
        assert "TOTAL" in out

    def test_unknown_schema_exit_code(self, tmp_path):
        weird = tmp_path / "w.jsonl"
        write_jsonl(weird, [{"mystery": 1}])
        assert run_cli("stats", weird) == 2

    def test_summaries_cover_artifacts(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        run_pipeline(config, tmp_path / "out")
        for name in ("docs.jsonl", "kept.jsonl", "unique.jsonl", "train.jsonl",
                     "filter_report.json", "dedup_report.json", "mix_report.json",
                     "trainer_config.json", "manifest.json", "ingest_stats.json",
                     "dup_pairs.jsonl"):
            assert summarize_artifact(tmp_path / "out" / name)
        assert "dedup report" in summarize_artifact(tmp_path / "out" / "dedup_report.json")

    def test_unknown_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"foo": 1}', encoding="utf-8")
        with pytest.raises(UnknownSchema):
            summarize_artifact(path)


class TestTermFreqCommand:
    def test_writes_csv(self, tmp_path):
        sft = tmp_path / "sft.jsonl"
        write_jsonl(sft, [{
            "kind": "one_turn",
            "turns": [{"role": "user", "content": "地板 地板 水电"}],
            "knowledge_id": "k",
        }])
        out = tmp_path / "terms.csv"
        assert run_cli("term-freq", "--in", sft, "--out", out) == 0
        assert out.read_text(encoding="utf-8").splitlines()[1] == "地板,2"


class TestPipelineRun:
    def test_manifest_chain_and_counts(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        manifest = run_pipeline(config, tmp_path / "out")
        assert [r.stage for r in manifest.records] == ["ingest", "filter", "dedup", "mix"]
        # chained: filter input digest equals ingest docs.jsonl output digest
        by_stage = {r.stage: r for r in manifest.records}
        docs_path = str(tmp_path / "out" / "docs.jsonl")
        assert by_stage["filter"].inputs[docs_path] == by_stage["ingest"].outputs[docs_path]

    def test_rerun_identical_digests(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        m1 = run_pipeline(config, tmp_path / "out1")
        m2 = run_pipeline(config, tmp_path / "out2")
        d1 = {k.replace("out1", ""): v for k, v in m1.output_digests().items()}
        d2 = {k.replace("out2", ""): v for k, v in m2.output_digests().items()}
        assert d1 == d2

    def test_resume_skips_everything(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        m1 = run_pipeline(config, tmp_path / "out")
        n_records = len(m1.records)
        m2 = run_pipeline(config, tmp_path / "out", resume=True)
        assert len(m2.records) == n_records
        assert m2.output_digests() == m1.output_digests()

    def test_tampered_intermediate_detected_on_resume(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        run_pipeline(config, tmp_path / "out")
        kept = tmp_path / "out" / "kept.jsonl"
        kept.write_text(kept.read_text(encoding="utf-8") + '{"doc_id": "x", "text": "t", "source_kind": "general", "token_count": 1, "char_count": 1}\n', encoding="utf-8")
        with pytest.raises(StageFailure, match="digest mismatch"):
            run_pipeline(config, tmp_path / "out", resume=True)

    def test_cli_run_and_exit_codes(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        assert run_cli("run", "--config", config, "--out-dir", tmp_path / "out") == 0
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        assert run_cli("run", "--config", bad, "--out-dir", tmp_path / "out2") == 2

    def test_stage_failure_exit_code(self, tmp_path):
        config_path = tmp_path / "p.json"
        config_path.write_text(json.dumps({
            "seed": 1,
            "ingest": {"inputs": [{"path": "missing.txt", "kind": "domain_book"}]},
        }), encoding="utf-8")
        assert run_cli("run", "--config", config_path, "--out-dir", tmp_path / "out") == 3

    def test_manifest_records_seed_and_version(self, tmp_path):
        config = write_pipeline_fixture(tmp_path)
        manifest = run_pipeline(config, tmp_path / "out")
        assert all(r.seed == 42 for r in manifest.records)
        loaded = PipelineManifest.load_or_create(tmp_path / "out" / "manifest.json")
        assert [r.stage for r in loaded.records] == [r.stage for r in manifest.records]

    def _full_config(self, tmp_path):
        config_path = write_pipeline_fixture(tmp_path)
        EndpointConfig(
            base_url="http://mock.invalid", model_name="mock-model",
            max_retries=0, backoff=(0.0,),
        ).to_json(tmp_path / "ep.json")
        write_evalhome(tmp_path / "evalhome.jsonl")
        config = json.loads(config_path.read_text(encoding="utf-8"))
        config["gen"] = {"kind": "mcq", "endpoint": "ep.json", "budget": 100}
        config["eval"] = {"dataset": "evalhome.jsonl", "endpoint": "ep.json", "shots": [0]}
        config_path.write_text(json.dumps(config, ensure_ascii=False, indent=2), encoding="utf-8")
        return config_path

    def test_optional_gen_and_eval_stages(self, tmp_path):
        from mocks import ConstantTransport, ScriptedTransport

        config_path = self._full_config(tmp_path)
        mcq = json.dumps({
            "question": "知识点判断？",
            "question_type": "单选",
            "candidate_options": {k: f"选{k}" for k in "ABCD"},
            "answer": {"correct_option": "A", "reason": "依据"},
        }, ensure_ascii=False)
        manifest = run_pipeline(
            config_path, tmp_path / "out",
            gen_transport=ScriptedTransport(lambda m: mcq),
            eval_transport=ConstantTransport("答案：A"),
        )
        assert [r.stage for r in manifest.records] == ["ingest", "filter", "dedup", "mix", "gen", "eval"]
        sft_rows = [obj for _, obj in read_jsonl(tmp_path / "out" / "sft.jsonl")]
        domain_docs = [
            obj for _, obj in read_jsonl(tmp_path / "out" / "unique.jsonl")
            if obj["source_kind"] != "general"
        ]
        assert len(sft_rows) == len(domain_docs)
        report = read_json(tmp_path / "out" / "eval_report.json")
        assert report["items_total"] == 113

    def test_gen_budget_exhaustion_exit_code_4(self, tmp_path):
        config_path = self._full_config(tmp_path)
        config = json.loads(config_path.read_text(encoding="utf-8"))
        config["gen"]["budget"] = 2
        del config["eval"]
        config_path.write_text(json.dumps(config, ensure_ascii=False), encoding="utf-8")
        # unreachable endpoint is irrelevant: budget dies first on fresh requests
        assert run_cli("run", "--config", config_path, "--out-dir", tmp_path / "out") == 4
        assert (tmp_path / "out" / "sft.jsonl").exists()


class TestEvalAndSweepCommands:
    def _endpoint_file(self, tmp_path):
        path = tmp_path / "ep.json"
        EndpointConfig(base_url="http://localhost:9", model_name="m", max_retries=0, backoff=(0.0,)).to_json(path)
        return path

    def test_eval_degrades_without_endpoint(self, tmp_path):
        # unreachable endpoint: every item becomes an abstention, exit stays 0
        dataset = write_evalhome(tmp_path / "evalhome.jsonl")
        out = tmp_path / "report.json"
        assert run_cli("eval", "--dataset", dataset, "--endpoint", self._endpoint_file(tmp_path),
                       "--shots", "0", "--out", out) == 0
        report = read_json(out)
        assert report["degraded"] is True
        assert report["overall_micro"] == 0.0

    def test_sweep_report_from_run_files(self, tmp_path):
        runs = []
        for i, (ratio, score) in enumerate([("1:0", 47.79), ("1:1", 50.44), ("1:10", 53.98)]):
            path = tmp_path / f"run{i}.json"
            path.write_text(json.dumps({
                "dataset": "evalhome",
                "overall_micro": score,
                "labels": {"model": "base", "ratio": ratio},
                "config": {"model": "m"},
            }), encoding="utf-8")
            runs.append(path)
        out_csv = tmp_path / "table.csv"
        out_txt = tmp_path / "table.txt"
        assert run_cli("sweep-report", "--runs", *runs, "--out", out_csv, "--text", out_txt) == 0
        assert "*53.98" in out_txt.read_text(encoding="utf-8")
        assert "True" in out_csv.read_text(encoding="utf-8")


class TestGenCommand:
    def test_replay_only_without_archive_classifies_endpoint_errors(self, tmp_path):
        docs = tmp_path / "docs.jsonl"
        write_jsonl(docs, [{
            "doc_id": "k1", "text": "知识内容样例。", "source_kind": "domain_book",
            "token_count": 6, "char_count": 7, "status": "retained", "reason": None,
        }])
        ep = tmp_path / "ep.json"
        EndpointConfig(base_url="http://mock.invalid", model_name="m").to_json(ep)
        out = tmp_path / "sft.jsonl"
        report_path = tmp_path / "gen_report.json"
        assert run_cli("gen", "--kind", "mcq", "--knowledge", docs, "--endpoint", ep,
                       "--out", out, "--budget", 5, "--replay-only", "--report", report_path) == 0
        report = read_json(report_path)
        assert report["rejected"] == {"EndpointError": 1}
        assert report["accepted"] == 0
