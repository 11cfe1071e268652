"""Rule-based closed-ended question/answer generation from clip metadata."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .records import (
    CLOSED_TASKS,
    AQATuple,
    Endedness,
    Level,
    MetaRecord,
    Provenance,
    Task,
    is_question_form,
    meta_of,
)

AGE_WORDS = {
    Level.VERY_LOW: "very young",
    Level.LOW: "young",
    Level.MEDIUM: "middle-aged",
    Level.HIGH: "senior",
    Level.VERY_HIGH: "elderly",
}

SPEED_WORDS = {
    Level.VERY_LOW: "very slow",
    Level.LOW: "slow",
    Level.MEDIUM: "medium",
    Level.HIGH: "fast",
    Level.VERY_HIGH: "very fast",
}


def level_words(level: Level) -> str:
    return level.value.replace("_", " ")


@dataclass(frozen=True)
class QuestionPool:
    task: Task
    paraphrases: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.paraphrases:
            raise ValueError(f"empty question pool for {self.task.value}")
        for q in self.paraphrases:
            if not is_question_form(q):
                raise ValueError(f"pool entry is neither a question nor imperative: {q!r}")


def load_pools(path: str | Path | None = None) -> dict[Task, QuestionPool]:
    """Load a (task, question) JSON-lines pool file; defaults to the bundled pools."""
    if path is None:
        text = resources.files("asqa").joinpath("data/question_pools.jsonl").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    grouped: dict[Task, list[str]] = {}
    for line in text.splitlines():
        if line.strip():
            d = json.loads(line)
            grouped.setdefault(Task(d["task"]), []).append(d["question"])
    return {task: QuestionPool(task, tuple(qs)) for task, qs in grouped.items()}


def derive_rng(seed: int, *keys: str) -> random.Random:
    """Independent RNG stream per key tuple, so results never depend on processing order."""
    digest = hashlib.sha256("\x1f".join([str(seed), *keys]).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _capitalize(label: str) -> str:
    return label[:1].upper() + label[1:]


def _polarity(score: int) -> str:
    if score > 0:
        return "positive"
    if score < 0:
        return "negative"
    return "neutral"


def render_answer(meta: MetaRecord, task: Task) -> str | None:
    """Fixed answer template for a closed task, or None when the label is missing."""
    if task is Task.AUDIO_EVENTS:
        return ", ".join(meta.audio_event_labels) + "." if meta.audio_event_labels else None
    if task is Task.AUDIO_CAPTION:
        return meta.caption or None
    if task is Task.ASR:
        return meta.spoken_text.strip() if meta.spoken_text and meta.spoken_text.strip() else None
    if task is Task.EMOTION:
        if not meta.emotion:
            return None
        if meta.sentiment_score is None:
            return f"{_capitalize(meta.emotion)}."
        s = meta.sentiment_score
        return f"{_capitalize(meta.emotion)}, with a sentiment score of {s} ({_polarity(s)})."
    if task is Task.MUSIC_GENRE:
        return ", ".join(meta.music_genres) + "." if meta.music_genres else None
    if task is Task.GENDER:
        return f"{_capitalize(meta.speaker_gender)}." if meta.speaker_gender else None
    if task is Task.AGE:
        if meta.speaker_age_years is None:
            return None
        years = int(round(meta.speaker_age_years))
        age_bin = meta.style.age_bin if meta.style else None
        suffix = f" ({AGE_WORDS[age_bin]})" if age_bin else ""
        return f"The speaker is around {years} years old{suffix}."
    if task is Task.SPEECH_STYLE:
        st = meta.style
        if st is None:
            return None
        parts = []
        if st.pitch_bin:
            parts.append(f"{level_words(st.pitch_bin)} pitch")
        if st.energy_bin:
            parts.append(f"{level_words(st.energy_bin)} volume")
        if st.speed_bin:
            parts.append(f"{SPEED_WORDS[st.speed_bin]} speed")
        return _capitalize(", ".join(parts)) + "." if parts else None
    raise ValueError(f"unknown closed task {task!r}")


def gen_closed(meta: MetaRecord, task: Task | str, pool: QuestionPool, seed: int) -> AQATuple | None:
    task = Task(task)
    if task not in CLOSED_TASKS:
        raise ValueError(f"{task.value} is not a closed-ended task")
    if pool.task is not task:
        raise ValueError(f"pool for {pool.task.value} used with task {task.value}")
    answer = render_answer(meta, task)
    if answer is None:
        return None
    question = derive_rng(seed, meta.clip_id, task.value).choice(pool.paraphrases)
    return AQATuple(
        clip_id=meta.clip_id,
        question=question,
        answer=answer,
        task=task,
        endedness=Endedness.CLOSED,
        provenance=Provenance.RULE,
    )


def gen_closed_corpus(
    metas: Iterable[MetaRecord],
    tasks: Sequence[Task | str],
    pools: Mapping[Task, QuestionPool],
    seed: int,
    asr_cap: int | None = None,
) -> list[AQATuple]:
    """One tuple per (meta, applicable task); ASR tuples subsampled to ``asr_cap``."""
    tasks = [Task(t) for t in tasks]
    missing = [t.value for t in tasks if t not in pools]
    if missing:
        raise ValueError(f"no question pool for: {', '.join(missing)}")
    out = []
    for m in metas:
        m = meta_of(m)
        for t in tasks:
            tup = gen_closed(m, t, pools[t], seed)
            if tup is not None:
                out.append(tup)
    if asr_cap is not None:
        asr_idx = [i for i, t in enumerate(out) if t.task is Task.ASR]
        if len(asr_idx) > asr_cap:
            keep = set(derive_rng(seed, "asr-cap").sample(asr_idx, asr_cap))
            out = [t for i, t in enumerate(out) if t.task is not Task.ASR or i in keep]
    return out
