from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from hypothesis import HealthCheck, settings

from asqa.llm import LlmRequest
from asqa.records import ClipRecord, Dataset, MetaRecord, Split

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def make_entry(clip_id: str, split: str = "train", dataset: str = "custom", **meta: Any):
    clip = ClipRecord(clip_id, Dataset(dataset), Split(split), audio_ref=meta.pop("audio_ref", ""))
    return clip, MetaRecord(clip_id=clip_id, **meta)


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


class ScriptedClient:
    """Chat client replaying a fixed list of replies (or exceptions) and logging requests."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests: list[LlmRequest] = []

    def complete(self, request: LlmRequest) -> str:
        self.requests.append(request)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def build_cli_inputs(root: Path, n_clips: int = 12) -> dict[str, Path]:
    """A small mixed manifest plus a mock-LLM directory answering every open-ended request."""
    from asqa import aqa_open
    from asqa.llm import MockLlmClient
    from asqa.records import dumps_manifest

    entries = []
    for i in range(n_clips):
        kind = i % 3
        meta: dict[str, Any] = {"no_speech_prob": 0.02 * i}
        if kind == 0:
            meta.update(audio_event_labels=("Dog", "Animal"), spoken_text=f"get him going number {i} now please")
        elif kind == 1:
            meta.update(spoken_text=f"hello my name is speaker {i}", speaker_gender="female", emotion="happy", sentiment_score=2, speaker_age_years=25 + i)
        else:
            meta.update(music_genres=("Folk", "Pop"), lyrics=f"la la {i}")
        entries.append(make_entry(f"clip{i:03d}", split="test" if i == n_clips - 1 else "train", **meta))
    manifest = root / "manifest.jsonl"
    manifest.write_bytes(dumps_manifest(entries))

    mock_dir = root / "mock"
    mock_dir.mkdir()
    mock = MockLlmClient(mock_dir)
    for _, meta in entries:
        flavor = aqa_open.infer_flavor(meta)
        req = aqa_open.make_request(meta, flavor, "gpt-3.5-turbo")
        mock.record(req, "\n".join(
            [
                json.dumps({"q": f"What is happening in {meta.clip_id}?", "a": "Something lively."}),
                json.dumps({"q": "Where could this be recorded?", "a": "Outdoors."}),
                "not json",
            ]
        ))  # fmt: skip
    return {"manifest": manifest, "mock": mock_dir}
