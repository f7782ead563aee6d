from __future__ import annotations

import json

import pytest

from renokit.endpoint import EndpointConfig
from renokit.errors import (
    DatasetMismatch,
    ExemplarLeakage,
    ExemplarShortfall,
    LogprobUnsupported,
    SchemaError,
)
from renokit.evalharness import (
    EvalRunConfig,
    best_of_settings,
    build_prompt,
    extract_answer,
    load_dataset,
    round_pct,
    run_eval,
    select_exemplars,
    sweep_report,
)
from renokit.jsonl import write_jsonl

from fixture_data import build_evalhome_rows
from mocks import ConstantTransport, FailingTransport, GoldAnswerTransport


def endpoint_cfg(concurrency: int = 4) -> EndpointConfig:
    return EndpointConfig(base_url="http://mock.invalid", model_name="mock-model", concurrency_limit=concurrency)


def eval_cfg(shots: int = 0, **kwargs) -> EvalRunConfig:
    return EvalRunConfig(shots=shots, endpoint=endpoint_cfg(), **kwargs)


class TestLoadDataset:
    def test_evalhome_shape(self, evalhome):
        stats = evalhome.stats()
        assert stats["total"] == 113
        assert stats["per_difficulty"]["fundamentals"] == {"subclasses": 6, "questions": 22}
        assert stats["per_difficulty"]["expertise"] == {"subclasses": 17, "questions": 87}
        assert stats["per_difficulty"]["innovative_design"] == {"subclasses": 2, "questions": 4}
        assert stats["subclasses"] == 25

    def test_single_item_file(self, tmp_path):
        row = build_evalhome_rows()[0]
        path = tmp_path / "one.jsonl"
        write_jsonl(path, [row])
        assert len(load_dataset(path)) == 1

    def test_missing_gold_is_schema_error_with_line(self, tmp_path):
        rows = build_evalhome_rows()[:3]
        del rows[1]["correct_option"]
        path = tmp_path / "broken.jsonl"
        write_jsonl(path, rows)
        with pytest.raises(SchemaError) as err:
            load_dataset(path)
        assert err.value.line == 2

    def test_bad_split_rejected(self, tmp_path):
        row = build_evalhome_rows()[0]
        row["split"] = "train"
        path = tmp_path / "split.jsonl"
        write_jsonl(path, [row])
        with pytest.raises(SchemaError):
            load_dataset(path)


class TestBuildPrompt:
    def test_zero_shot_single_block(self, evalhome):
        entry = evalhome.entries[10]
        (msg,) = build_prompt(entry.item, [], 0)
        assert msg["content"].count("答案：") == 1
        assert msg["content"].rstrip().endswith("答案：")

    def test_five_shot_blocks(self, evalhome):
        entry = evalhome.entries[10]
        exemplars = select_exemplars(evalhome, entry, 5)
        (msg,) = build_prompt(entry.item, exemplars, 5)
        # 5 worked exemplars with answers, one open target
        assert msg["content"].count("答案：") == 6
        for ex in exemplars:
            assert f"答案：{ex.correct_option}" in msg["content"]

    def test_leakage_detected(self, evalhome):
        entry = evalhome.entries[0]
        with pytest.raises(ExemplarLeakage):
            build_prompt(entry.item, [entry.item], 1)

    def test_shortfall(self, evalhome):
        entry = evalhome.entries[0]
        with pytest.raises(ExemplarShortfall):
            build_prompt(entry.item, [], 3)

    def test_select_exemplars_skips_scored_item(self, evalhome):
        dev_entry = evalhome.entries[0]
        assert dev_entry.split == "dev"
        exemplars = select_exemplars(evalhome, dev_entry, 5)
        assert len(exemplars) == 5
        assert all(ex.question != dev_entry.item.question for ex in exemplars)


class TestExtractAnswer:
    OPTS = {"A": "1", "B": "2", "C": "3", "D": "4"}

    def test_plain_letter(self):
        assert extract_answer("答案是B。", self.OPTS) == "B"

    def test_first_match_wins(self):
        assert extract_answer("A和B都有道理", self.OPTS) == "A"

    def test_abstain(self):
        assert extract_answer("无法判断", self.OPTS) is None

    def test_embedded_ascii_ignored(self):
        assert extract_answer("BANANA CACHE 里没有答案", self.OPTS) is None

    def test_letter_after_english_word(self):
        assert extract_answer("the answer: C", self.OPTS) == "C"

    def test_restricted_key_set(self):
        assert extract_answer("C还是A？", {"A": "对", "B": "错"}) == "A"

    def test_logprob_argmax(self):
        scores = {"A": -2.0, "B": -0.5, "C": -1.0, "D": -3.0}
        assert extract_answer("", self.OPTS, mode="option_logprob", scores=scores) == "B"

    def test_logprob_without_scores(self):
        with pytest.raises(LogprobUnsupported):
            extract_answer("", self.OPTS, mode="option_logprob")


class TestRunEval:
    def test_all_gold_is_100(self, evalhome):
        transport = GoldAnswerTransport(evalhome, {e.item_id for e in evalhome.entries})
        report = run_eval(evalhome, eval_cfg(), transport=transport)
        assert report.overall_micro == 100.0
        assert report.overall_macro == 100.0

    def test_always_wrong_letter_is_0(self, evalhome):
        report = run_eval(evalhome, eval_cfg(), transport=ConstantTransport("E选项"))
        assert report.overall_micro == 0.0
        assert all(r["extracted"] == "abstain" for r in report.per_item)

    def test_78_of_113_micro(self, evalhome):
        correct = {e.item_id for e in evalhome.entries[:78]}
        report = run_eval(evalhome, eval_cfg(), transport=GoldAnswerTransport(evalhome, correct))
        assert report.overall_micro == 69.03

    def test_category_counts_sum_to_overall(self, evalhome):
        correct = {e.item_id for e in evalhome.entries[::3]}
        report = run_eval(evalhome, eval_cfg(), transport=GoldAnswerTransport(evalhome, correct))
        assert sum(v["correct"] for v in report.per_category.values()) == len(correct)
        assert sum(v["total"] for v in report.per_category.values()) == 113
        weighted = sum(v["correct"] for v in report.per_category.values()) / 113
        assert report.overall_micro == round(10000 * weighted) / 100

    def test_five_shot_no_leakage_and_deterministic(self, evalhome):
        transport = GoldAnswerTransport(evalhome, {e.item_id for e in evalhome.entries[:50]})
        cfg = eval_cfg(shots=5)
        r1 = run_eval(evalhome, cfg, transport=transport)
        r2 = run_eval(evalhome, cfg, transport=transport)
        assert r1.to_dict() == r2.to_dict()

    def test_endpoint_failure_degrades_not_aborts(self, evalhome):
        report = run_eval(evalhome, eval_cfg(), transport=FailingTransport("down"))
        assert report.degraded
        assert report.overall_micro == 0.0
        assert all(r["extracted"] == "abstain" for r in report.per_item)

    def test_abstain_counts_in_denominator(self, evalhome):
        transport = GoldAnswerTransport(evalhome, {e.item_id for e in evalhome.entries[:78]}, abstain_wrong=True)
        report = run_eval(evalhome, eval_cfg(), transport=transport)
        assert report.overall_micro == 69.03

    def test_report_notes_flag_conventions(self, evalhome):
        report = run_eval(evalhome, eval_cfg(), transport=ConstantTransport("A"))
        assert any("convention" in note for note in report.notes)

    def test_rounding_rule(self):
        assert round_pct(78, 113) == 69.03
        assert round_pct(61, 113) == 53.98
        assert round_pct(1, 3) == 33.33
        assert round_pct(0, 113) == 0.0
        assert round_pct(113, 113) == 100.0


class TestBestOfSettings:
    def fake_report(self, evalhome, micro: float, shots: int):
        transport = ConstantTransport("A")
        report = run_eval(evalhome, eval_cfg(shots=shots), transport=transport)
        report.overall_micro = micro
        return report

    def test_max_wins(self, evalhome):
        r0 = self.fake_report(evalhome, 40.0, 0)
        r5 = self.fake_report(evalhome, 46.0, 5)
        assert best_of_settings([r0, r5]) is r5

    def test_single_report(self, evalhome):
        r0 = self.fake_report(evalhome, 40.0, 0)
        assert best_of_settings([r0]) is r0

    def test_tie_prefers_fewer_shots(self, evalhome):
        r0 = self.fake_report(evalhome, 40.0, 0)
        r5 = self.fake_report(evalhome, 40.0, 5)
        assert best_of_settings([r5, r0]) is r0

    def test_dataset_mismatch(self, evalhome, tmp_path):
        r0 = self.fake_report(evalhome, 40.0, 0)
        rows = build_evalhome_rows()[:5]
        path = tmp_path / "tiny.jsonl"
        write_jsonl(path, rows)
        tiny = load_dataset(path)
        other = run_eval(tiny, eval_cfg(), transport=ConstantTransport("A"))
        with pytest.raises(DatasetMismatch):
            best_of_settings([r0, other])


class TestSweepReport:
    ROWS = [
        {"model_label": "base", "ratio_label": "1:0", "scores": {"evalhome": 47.79}},
        {"model_label": "base", "ratio_label": "1:1", "scores": {"evalhome": 50.44}},
        {"model_label": "base", "ratio_label": "1:2", "scores": {"evalhome": 44.24}},
        {"model_label": "base", "ratio_label": "1:5", "scores": {"evalhome": 36.28}},
        {"model_label": "base", "ratio_label": "1:10", "scores": {"evalhome": 53.98}},
    ]

    def test_max_flag_on_best_row(self):
        out_rows, text = sweep_report(self.ROWS)
        flagged = [r["ratio"] for r in out_rows if r["evalhome_best"]]
        assert flagged == ["1:10"]
        assert "*53.98" in text

    def test_single_row_trivially_flagged(self):
        out_rows, _ = sweep_report(self.ROWS[:1])
        assert out_rows[0]["evalhome_best"]

    def test_ties_all_flagged(self):
        rows = [
            {"model_label": "m", "ratio_label": "1:0", "scores": {"ds": 50.0}},
            {"model_label": "m", "ratio_label": "1:5", "scores": {"ds": 50.0}},
        ]
        out_rows, _ = sweep_report(rows)
        assert all(r["ds_best"] for r in out_rows)

    def test_groups_scoped_per_model(self):
        rows = self.ROWS + [{"model_label": "chat", "ratio_label": "1:5", "scores": {"evalhome": 60.17}}]
        out_rows, _ = sweep_report(rows)
        base_best = [r for r in out_rows if r["model"] == "base" and r["evalhome_best"]]
        chat_best = [r for r in out_rows if r["model"] == "chat" and r["evalhome_best"]]
        assert [r["ratio"] for r in base_best] == ["1:10"]
        assert [r["ratio"] for r in chat_best] == ["1:5"]


def test_report_json_roundtrip(evalhome, tmp_path):
    transport = GoldAnswerTransport(evalhome, {e.item_id for e in evalhome.entries[:61]})
    report = run_eval(evalhome, eval_cfg(), transport=transport, labels={"model": "m", "ratio": "1:10"})
    assert report.overall_micro == 53.98
    path = tmp_path / "report.json"
    report.save(path)
    loaded = json.loads(path.read_text(encoding="utf-8"))
    assert loaded["overall_micro"] == 53.98
    assert loaded["labels"] == {"model": "m", "ratio": "1:10"}
    assert len(loaded["per_item"]) == 113
