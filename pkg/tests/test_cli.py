import json

import pytest

from asqa import aqa_closed
from asqa.cli import read_config_file, run
from asqa.evaluation import judge_request
from asqa.llm import MockLlmClient

from conftest import build_cli_inputs, write_jsonl


def summary(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


@pytest.fixture
def inputs(tmp_path):
    return build_cli_inputs(tmp_path)


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == 2

    def test_missing_required_flag(self):
        assert run(["gen-closed", "--out", "x"]) == 2

    def test_missing_input_is_terminal(self, tmp_path):
        s = tmp_path / "s.txt"
        assert run(["gen-closed", "--manifest", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--summary", str(s)]) == 1
        assert summary(s)["status"] == "error"

    def test_bad_manifest_header(self, tmp_path):
        bad = tmp_path / "m.jsonl"
        bad.write_text('{"clip_id": "a", "split": "train"}\n')
        assert run(["sample", "--manifest", str(bad), "--out", str(tmp_path / "o"), "--summary", str(tmp_path / "s")]) == 1

    def test_live_llm_without_credential(self, inputs, tmp_path, monkeypatch):
        monkeypatch.delenv("ASQA_LLM_API_KEY", raising=False)
        args = ["gen-open", "--manifest", str(inputs["manifest"]), "--out", str(tmp_path / "o"), "--summary", str(tmp_path / "s")]
        assert run(args) == 1


class TestPipeline:
    def test_ingest_drops_test_split(self, inputs, tmp_path):
        s = tmp_path / "s.txt"
        assert run(["ingest", "--manifest", str(inputs["manifest"]), "--out", str(tmp_path / "i.jsonl"), "--summary", str(s)]) == 0
        got = summary(s)
        assert (got["records_in"], got["excluded_eval"], got["records_out"]) == ("12", "1", "11")
        assert {"command", "seed", "config_hash", "status"} <= set(got)

    def test_gen_closed_deterministic(self, inputs, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.jsonl"
            assert run(["gen-closed", "--manifest", str(inputs["manifest"]), "--seed", "7", "--out", str(out), "--summary", str(tmp_path / "s")]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        rows = [json.loads(l) for l in outs[0].decode().splitlines()]
        assert all(r["audio_id"] != "clip011" for r in rows)
        pools = aqa_closed.load_pools()
        assert all(r["question"] in pools[aqa_closed.Task(r["task"])].paraphrases for r in rows)

    def test_seed_changes_questions(self, inputs, tmp_path):
        texts = []
        for seed in ("1", "2"):
            out = tmp_path / f"{seed}.jsonl"
            run(["gen-closed", "--manifest", str(inputs["manifest"]), "--seed", seed, "--out", str(out), "--summary", str(tmp_path / "s")])
            texts.append(out.read_text())
        assert texts[0] != texts[1]

    def test_gen_open_with_mock(self, inputs, tmp_path):
        s = tmp_path / "s.txt"
        args = ["gen-open", "--manifest", str(inputs["manifest"]), "--mock-llm", str(inputs["mock"]), "--out", str(tmp_path / "o.jsonl"), "--rejects", str(tmp_path / "r.jsonl"), "--jobs", "3", "--summary", str(s)]
        assert run(args) == 0
        got = summary(s)
        assert (got["tuples"], got["rejects"], got["failed"]) == ("22", "11", "0")

    def test_config_file_overrides_defaults(self, inputs, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# pinned\nseed = 7\ntasks = gender,emotion\n")
        out = tmp_path / "o.jsonl"
        s = tmp_path / "s.txt"
        assert run(["gen-closed", "--config-file", str(cfg), "--manifest", str(inputs["manifest"]), "--out", str(out), "--summary", str(s)]) == 0
        assert summary(s)["seed"] == "7"
        assert {json.loads(l)["task"] for l in out.read_text().splitlines()} == {"gender", "emotion"}

    def test_config_file_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("frobs = 3\n")
        assert run(["plan", "--config-file", str(cfg), "--out", str(tmp_path / "p")]) == 2

    def test_features_sample_plan_chain(self, inputs, tmp_path):
        feat, sampled, plan = tmp_path / "f.jsonl", tmp_path / "s.jsonl", tmp_path / "plan.jsonl"
        s = tmp_path / "sum.txt"
        assert run(["features", "--manifest", str(inputs["manifest"]), "--out", str(feat), "--references-out", str(tmp_path / "refs.jsonl"), "--summary", str(s)]) == 0
        assert run(["sample", "--manifest", str(feat), "--no-filter-speech", "--k", "3", "--out", str(sampled), "--summary", str(s)]) == 1  # music clips carry no labels
        assert run(["sample", "--manifest", str(feat), "--out", str(sampled), "--summary", str(s)]) == 0
        closed = tmp_path / "c.jsonl"
        run(["gen-closed", "--manifest", str(feat), "--out", str(closed), "--summary", str(s)])
        assert run(["plan", "--out", str(plan), "--aqa", str(closed), "--stage-dir", str(tmp_path / "stages"), "--summary", str(s)]) == 0
        assert len(plan.read_text().splitlines()) == 3
        stage1 = [json.loads(l) for l in (tmp_path / "stages" / "stage1.jsonl").read_text().splitlines()]
        assert stage1 and all(r["task"] not in ("asr", "audio_caption") for r in stage1)

    def test_eval_and_judge(self, tmp_path):
        preds = write_jsonl(tmp_path / "p.jsonl", [{"clip_id": "a", "task": "gender", "model_output": "a woman", "gold": "female"}])
        assert run(["eval", "--predictions", str(preds), "--out", str(tmp_path / "e.jsonl"), "--summary", str(tmp_path / "s")]) == 0
        assert json.loads((tmp_path / "e.jsonl").read_text().splitlines()[0])["value"] == 1.0

        mock_dir = tmp_path / "mock"
        mock_dir.mkdir()
        mock = MockLlmClient(mock_dir)
        rows = [{"question": f"Q{i}?", "response": f"R{i}"} for i in range(4)]
        for i, r in enumerate(rows):
            mock.record(judge_request(r["question"], r["response"]), "No" if i == 0 else "Yes")
        pairs = write_jsonl(tmp_path / "pairs.jsonl", rows)
        args = ["judge", "--pairs", str(pairs), "--mock-llm", str(mock_dir), "--out", str(tmp_path / "j.jsonl"), "--transcript", str(tmp_path / "t.jsonl"), "--summary", str(tmp_path / "s")]
        assert run(args) == 0
        assert summary(tmp_path / "s")["follow_rate"] == "0.75"
        assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 4

    def test_tltr_check_toy(self, tmp_path, capsys):
        assert run(["tltr-check", "--config", "toy", "--summary", str(tmp_path / "s")]) == 0
        assert "tltr output shape [2, 16]" in capsys.readouterr().out

    def test_tltr_check_unknown_config(self, tmp_path):
        assert run(["tltr-check", "--config", "huge", "--summary", str(tmp_path / "s")]) == 2


def test_read_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("a-b = 1\n\n# comment\nc=x y # trailing\n")
    assert read_config_file(p) == {"a_b": "1", "c": "x y"}
