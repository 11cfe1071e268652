"""LLM-assisted open-ended QA generation: input rendering, prompting, and parsing."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence

from .aqa_closed import SPEED_WORDS, level_words
from .llm import BackoffGate, ChatClient, LlmRequest, call_llm, ordered_map
from .records import (
    AQATuple,
    Endedness,
    MetaRecord,
    Provenance,
    Task,
    is_question_form,
)


class Flavor(str, Enum):
    JOINT_AUDIO_SPEECH = "joint_audio_speech"
    SPEECH_ONLY = "speech_only"
    MUSIC = "music"


FLAVOR_TASK = {
    Flavor.JOINT_AUDIO_SPEECH: Task.OPEN_JOINT,
    Flavor.SPEECH_ONLY: Task.OPEN_SPEECH,
    Flavor.MUSIC: Task.OPEN_JOINT,
}


class MissingField(ValueError):
    def __init__(self, field_name: str, flavor: Flavor):
        super().__init__(f"{flavor.value} input needs {field_name}")
        self.field_name = field_name


def infer_flavor(meta: MetaRecord) -> Flavor | None:
    if meta.music_genres:
        return Flavor.MUSIC
    if meta.spoken_text and meta.audio_event_labels:
        return Flavor.JOINT_AUDIO_SPEECH
    if meta.spoken_text:
        return Flavor.SPEECH_ONLY
    return None


def render_gpt_input(meta: MetaRecord, flavor: Flavor | str) -> str:
    """Text surrogate of a clip's metadata. Absent optional fields are omitted."""
    flavor = Flavor(flavor)
    if flavor is Flavor.JOINT_AUDIO_SPEECH:
        if not meta.audio_event_labels:
            raise MissingField("audio_event_labels", flavor)
        if not meta.spoken_text:
            raise MissingField("spoken_text", flavor)
        labels = ", ".join(meta.audio_event_labels)
        return f'In the recording, background sound of {labels} and speech of "{meta.spoken_text}" is heard.'

    if flavor is Flavor.SPEECH_ONLY:
        if not meta.spoken_text:
            raise MissingField("spoken_text", flavor)
        style = meta.style
        parts = [f'Speech: "{meta.spoken_text}"']
        if meta.speaker_gender:
            parts.append(f"Speaker gender: {meta.speaker_gender.capitalize()}")
        if style and style.age_bin:
            parts.append(f"Speaker age: {level_words(style.age_bin)}")
        if style and style.pitch_bin:
            parts.append(f"Pitch: {level_words(style.pitch_bin)}")
        if style and style.energy_bin:
            parts.append(f"Volume: {level_words(style.energy_bin)}")
        if style and style.speed_bin:
            parts.append(f"Speed: {SPEED_WORDS[style.speed_bin]}")
        if meta.emotion:
            parts.append(f"Emotion: {meta.emotion}")
        return "; ".join(parts) + "."

    if not meta.music_genres:
        raise MissingField("music_genres", flavor)
    parts = [f"Music genre: {', '.join(meta.music_genres)}"]
    title = meta.extra.get("title")
    if title:
        parts.append(f"Music title: {title}")
    if meta.lyrics:
        parts.append(f'Music Lyrics: "{meta.lyrics}"')
    return "; ".join(parts)


_PROMPT_HEAD = (
    "Based on the following audio/speech, generate 10 different types of complex "
    "open-ended questions that require step-by-step thinking, and corresponding answers. "
    "Questions can be e.g., "
)
_PROMPT_TAIL = (
    " etc. Format each QA pair in a single line as a JSON dictionary "
    '(key "q" for question, key "a" for answer). Do not number the lines or add any other text.'
)
_EXAMPLE_QUESTIONS = {
    Flavor.JOINT_AUDIO_SPEECH: (
        "How are speech content and background sounds related? "
        "What can be inferred from the speech and the sounds together? "
        "Where could this audio be recorded?"
    ),
    Flavor.SPEECH_ONLY: (
        "What can we infer from the speech content and emotion? "
        "Why does the speaker talk in this style? "
        "What is the relationship between what is said and how it is said?"
    ),
    Flavor.MUSIC: (
        "What mood does this music convey? "
        "How do the lyrics relate to the melody and genre? "
        "Where would this music be appropriate to play?"
    ),
}


def build_prompt(flavor: Flavor | str) -> str:
    return _PROMPT_HEAD + _EXAMPLE_QUESTIONS[Flavor(flavor)] + " ..." + _PROMPT_TAIL


# ---------------------------------------------------------------------------
# parsing and validation


@dataclass(frozen=True)
class Reject:
    clip_id: str
    reason: str
    line: str

    def to_json(self) -> dict[str, str]:
        return {"clip_id": self.clip_id, "reason": self.reason, "line": self.line}


def _norm(s: str) -> str:
    return " ".join(s.casefold().split())


@dataclass
class QaValidator:
    """Quality gate; remembers accepted questions per clip to catch duplicates."""

    seen: dict[str, set[str]] = field(default_factory=dict)

    def check(self, clip_id: str, question: str, answer: str) -> str | None:
        """Return a reject reason, or None when the pair is acceptable."""
        if not question.strip():
            return "empty question"
        if not answer.strip():
            return "empty answer"
        if not is_question_form(question):
            return "not a question"
        if _norm(question) == _norm(answer):
            return "echo"
        if _norm(question) in self.seen.get(clip_id, set()):
            return "duplicate"
        return None

    def accept(self, clip_id: str, question: str) -> None:
        self.seen.setdefault(clip_id, set()).add(_norm(question))

    def validate(self, t: AQATuple) -> str | None:
        reason = self.check(t.clip_id, t.question, t.answer)
        if reason is None:
            self.accept(t.clip_id, t.question)
        return reason


def validate_qa(t: AQATuple, validator: QaValidator | None = None) -> str | None:
    return (validator or QaValidator()).validate(t)


_LEADING_ENUM = re.compile(r"^\s*(?:[-*•]|\d+[.):])\s*")


def _first(obj: dict, keys: Sequence[str]) -> str | None:
    for k in keys:
        if k in obj:
            v = obj[k]
            return v if isinstance(v, str) else str(v) if v is not None else ""
    return None


def parse_qa_lines(
    raw: str,
    clip_id: str,
    task: Task | str = Task.OPEN_JOINT,
    validator: QaValidator | None = None,
) -> tuple[list[AQATuple], list[Reject]]:
    """Parse one-JSON-object-per-line LLM output into open-ended tuples."""
    task = Task(task)
    validator = validator if validator is not None else QaValidator()
    accepted: list[AQATuple] = []
    rejects: list[Reject] = []
    for line in raw.splitlines():
        text = line.strip()
        if not text or text.startswith("```"):
            continue
        candidate = _LEADING_ENUM.sub("", text).rstrip(",")
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            rejects.append(Reject(clip_id, "not json", line))
            continue
        if not isinstance(obj, dict):
            rejects.append(Reject(clip_id, "not an object", line))
            continue
        q = _first(obj, ("q", "question", "Q", "Question"))
        a = _first(obj, ("a", "answer", "A", "Answer"))
        if q is None:
            rejects.append(Reject(clip_id, "missing question", line))
            continue
        if a is None:
            rejects.append(Reject(clip_id, "missing answer", line))
            continue
        q, a = q.strip(), a.strip()
        reason = validator.check(clip_id, q, a)
        if reason is not None:
            rejects.append(Reject(clip_id, reason, line))
            continue
        validator.accept(clip_id, q)
        accepted.append(AQATuple(clip_id, q, a, task, Endedness.OPEN, Provenance.LLM))
    return accepted, rejects


def write_rejects(rejects: Iterable[Reject], sink: IO[str]) -> int:
    n = 0
    for r in rejects:
        sink.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
        n += 1
    return n


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class OpenGenResult:
    tuples: list[AQATuple] = field(default_factory=list)
    rejects: list[Reject] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)


def make_request(meta: MetaRecord, flavor: Flavor, model_name: str, max_retries: int = 3) -> LlmRequest:
    return LlmRequest(
        system_or_task_prompt=build_prompt(flavor),
        user_input=render_gpt_input(meta, flavor),
        model_name=model_name,
        max_retries=max_retries,
    )


def gen_open_corpus(
    metas: Sequence[MetaRecord],
    client: ChatClient,
    flavor: Flavor | str | None = None,
    model_name: str = "gpt-3.5-turbo",
    jobs: int = 1,
    max_retries: int = 3,
    sleep=None,
) -> OpenGenResult:
    """Render, query, and parse every clip; output follows input order.

    ``flavor=None`` picks one per clip from the available metadata. A clip
    whose request ultimately fails is recorded in ``failed`` and skipped.
    """
    gate = BackoffGate() if sleep is None else BackoffGate(sleep=sleep)
    fixed = Flavor(flavor) if flavor is not None else None

    def work(meta: MetaRecord):
        fl = fixed or infer_flavor(meta)
        if fl is None:
            return "skip", "no usable metadata"
        try:
            req = make_request(meta, fl, model_name, max_retries)
        except MissingField as exc:
            return "skip", str(exc)
        kwargs = {"gate": gate}
        if sleep is not None:
            kwargs["sleep"] = sleep
        try:
            raw = call_llm(req, client, **kwargs)
        except Exception as exc:  # noqa: BLE001 - per-clip failure, batch continues
            return "fail", str(exc)
        return "ok", (raw, FLAVOR_TASK[fl])

    outcomes = ordered_map(work, list(metas), jobs)
    result = OpenGenResult()
    validator = QaValidator()
    for meta, (status, payload) in zip(metas, outcomes):
        if status == "skip":
            result.skipped.append((meta.clip_id, payload))
        elif status == "fail":
            result.failed.append((meta.clip_id, payload))
        else:
            raw, task = payload
            acc, rej = parse_qa_lines(raw, meta.clip_id, task, validator)
            result.tuples.extend(acc)
            result.rejects.extend(rej)
    return result
