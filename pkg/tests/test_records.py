import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from asqa.records import (
    AQATuple,
    ClipRecord,
    Dataset,
    Endedness,
    EvalSplitLeak,
    ManifestError,
    MetaRecord,
    Provenance,
    Split,
    Task,
    assert_no_eval_split,
    dumps_aqa,
    dumps_manifest,
    exclude_eval_splits,
    is_question_form,
    parse_manifest,
    parse_split,
    read_aqa,
)

from conftest import make_entry

HEADER = json.dumps({"schema": "asqa-manifest/1", "dataset": "audioset"})


def manifest(*rows: dict, header: str = HEADER) -> str:
    return "\n".join([header, *(json.dumps(r) for r in rows)]) + "\n"


class TestParseManifest:
    def test_normalizes_aliases(self):
        text = manifest({"clip_id": "a", "split": "eval", "labels": "Dog, Animal", "gender": "M", "transcript": "hi"})
        res = parse_manifest(text, "audioset")
        assert res.errors == []
        clip, meta = res.records[0]
        assert clip.split is Split.TEST
        assert clip.source_dataset is Dataset.AUDIOSET
        assert meta.audio_event_labels == ("Dog", "Animal")
        assert meta.speaker_gender == "male"
        assert meta.spoken_text == "hi"

    def test_alias_does_not_shadow_canonical_key(self):
        res = parse_manifest(manifest({"clip_id": "a", "split": "train", "spoken_text": "x", "text": "y"}), "custom")
        _, meta = res.records[0]
        assert meta.spoken_text == "x"
        assert meta.extra == {"text": "y"}

    def test_bad_records_are_reported_with_line_numbers(self):
        text = manifest(
            {"clip_id": "a", "split": "train"},
            {"split": "train"},
            {"clip_id": "c", "split": "train", "no_speech_prob": 1.5},
            {"clip_id": "d", "split": "holdout"},
        ) + "{not json\n"
        res = parse_manifest(text, "custom")
        assert [c.clip_id for c, _ in res.records] == ["a"]
        assert [e.line for e in res.errors] == [3, 4, 5, 6]
        assert "clip_id" in res.errors[0].message

    def test_sentiment_must_be_integer(self):
        res = parse_manifest(manifest({"clip_id": "a", "split": "train", "sentiment_score": 1.5}), "mosei")
        assert len(res.errors) == 1

    @pytest.mark.parametrize(
        "header",
        [
            "not json",
            json.dumps({"dataset": "x"}),
            json.dumps({"schema": "other/9"}),
            json.dumps({"clip_id": "a", "split": "train"}),
        ],
    )
    def test_header_problems_are_terminal(self, header):
        with pytest.raises(ManifestError):
            parse_manifest(header + "\n" + json.dumps({"clip_id": "b", "split": "train"}) + "\n", "custom")

    def test_round_trip(self):
        entries = [
            make_entry("a", audio_event_labels=("Dog",), spoken_text="hello there", no_speech_prob=0.1, sentiment_score=-2),
            make_entry("b", split="validation", music_genres=("Folk", "Pop"), lyrics="la la", extra={"title": "T"}),
        ]
        res = parse_manifest(dumps_manifest(entries), "custom")
        assert res.errors == []
        assert res.records == entries


class TestSplits:
    @pytest.mark.parametrize("raw,expected", [("eval", Split.TEST), ("Dev", Split.VALIDATION), ("balanced_train", Split.TRAIN)])
    def test_aliases(self, raw, expected):
        assert parse_split(raw) is expected

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            parse_split("holdout")

    @given(st.lists(st.sampled_from(list(Split)), max_size=30))
    def test_exclusion_removes_exactly_test(self, splits):
        clips = [ClipRecord(f"c{i}", Dataset.CUSTOM, s) for i, s in enumerate(splits)]
        kept = exclude_eval_splits(clips)
        assert kept == [c for c in clips if c.split is not Split.TEST]
        assert_no_eval_split(kept)

    def test_leak_detected(self):
        with pytest.raises(EvalSplitLeak):
            assert_no_eval_split([make_entry("x", split="test")])


class TestMetaValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"no_speech_prob": -0.1},
            {"sentiment_score": 4},
            {"speaker_gender": "other"},
            {"speaker_age_years": 0},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            MetaRecord("a", **kwargs)


class TestAQATuple:
    def test_invariants(self):
        with pytest.raises(ValueError):
            AQATuple("a", "Q?", "A", Task.OPEN_JOINT, Endedness.OPEN, Provenance.RULE)
        with pytest.raises(ValueError):
            AQATuple("a", "Q?", "A", Task.GENDER, Endedness.CLOSED, Provenance.LLM)
        with pytest.raises(ValueError):
            AQATuple("a", "  ", "A", Task.GENDER, Endedness.CLOSED, Provenance.RULE)
        AQATuple("a", "Q?", "A", Task.ASR, Endedness.CLOSED, Provenance.LLM)

    def test_json_keys(self):
        t = AQATuple("a", "Q?", "A.", Task.GENDER, Endedness.CLOSED, Provenance.RULE)
        d = json.loads(dumps_aqa([t]))
        assert list(d) == ["audio_id", "question", "answer", "task", "endedness", "provenance"]
        assert list(read_aqa(io.StringIO(dumps_aqa([t])))) == [t]

    @pytest.mark.parametrize("q,ok", [("What is it?", True), ("Describe the audio.", True), ("The audio.", False)])
    def test_question_form(self, q, ok):
        assert is_question_form(q) is ok
