"""Corpus record types, manifest parsing and AQA serialization.

Manifests are line-delimited JSON. The first non-blank line is a header
object carrying a ``schema`` key; every following line is one clip.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import IO, Any, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "asqa-manifest/1"


class Dataset(str, Enum):
    AS_STRONG = "as_strong"
    AUDIOSET = "audioset"
    VGGSOUND = "vggsound"
    FSD50K = "fsd50k"
    AUDIOCAPS = "audiocaps"
    FREESOUND = "freesound"
    CLOTHO = "clotho"
    SOUNDBIBLE = "soundbible"
    IEMOCAP = "iemocap"
    LIBRITTS = "libritts"
    VOXCELEB2 = "voxceleb2"
    MOSEI = "mosei"
    FMA = "fma"
    CUSTOM = "custom"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Task(str, Enum):
    AUDIO_EVENTS = "audio_events"
    AUDIO_CAPTION = "audio_caption"
    ASR = "asr"
    EMOTION = "emotion"
    GENDER = "gender"
    AGE = "age"
    SPEECH_STYLE = "speech_style"
    MUSIC_GENRE = "music_genre"
    OPEN_AUDIO = "open_audio"
    OPEN_SPEECH = "open_speech"
    OPEN_JOINT = "open_joint"


OPEN_TASKS = frozenset({Task.OPEN_AUDIO, Task.OPEN_SPEECH, Task.OPEN_JOINT})
CLOSED_TASKS = frozenset(t for t in Task if t not in OPEN_TASKS)


class Endedness(str, Enum):
    CLOSED = "closed"
    OPEN = "open"


class Provenance(str, Enum):
    RULE = "rule"
    LLM = "llm"


class Level(str, Enum):
    """Five-step quantization scale, ordered low to high."""

    VERY_LOW = "very_low"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    VERY_HIGH = "very_high"

    @property
    def rank(self) -> int:
        return _LEVEL_ORDER.index(self)

    @classmethod
    def from_rank(cls, k: int) -> "Level":
        return _LEVEL_ORDER[k]


_LEVEL_ORDER = list(Level)

_SPLIT_ALIASES = {
    "train": Split.TRAIN,
    "training": Split.TRAIN,
    "unbalanced_train": Split.TRAIN,
    "balanced_train": Split.TRAIN,
    "validation": Split.VALIDATION,
    "valid": Split.VALIDATION,
    "val": Split.VALIDATION,
    "dev": Split.VALIDATION,
    "development": Split.VALIDATION,
    "test": Split.TEST,
    "eval": Split.TEST,
    "evaluation": Split.TEST,
}


def parse_split(value: str) -> Split:
    try:
        return _SPLIT_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown split {value!r}") from None


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    source_dataset: Dataset
    split: Split
    audio_ref: str = ""
    duration_s: float | None = None
    sample_rate_hz: int | None = None

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise ValueError("clip_id must be non-empty")
        if self.duration_s is not None and self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.sample_rate_hz is not None and self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be > 0")


@dataclass(frozen=True)
class SpeechStyle:
    pitch_hz: float | None = None
    energy_rms: float | None = None
    speed_wps: float | None = None
    pitch_bin: Level | None = None
    energy_bin: Level | None = None
    speed_bin: Level | None = None
    age_bin: Level | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v.value if isinstance(v, Level) else v
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SpeechStyle":
        kwargs: dict[str, Any] = {}
        for f in fields(cls):
            if d.get(f.name) is None:
                continue
            v = d[f.name]
            kwargs[f.name] = Level(v) if f.name.endswith("_bin") else float(v)
        return cls(**kwargs)


@dataclass(frozen=True)
class WordStamp:
    word: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class MetaRecord:
    clip_id: str
    audio_event_labels: tuple[str, ...] = ()
    caption: str | None = None
    spoken_text: str | None = None
    no_speech_prob: float | None = None
    word_timestamps: tuple[WordStamp, ...] | None = None
    speaker_gender: str | None = None
    speaker_age_years: float | None = None
    emotion: str | None = None
    sentiment_score: int | None = None
    music_genres: tuple[str, ...] | None = None
    lyrics: str | None = None
    style: SpeechStyle | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=True)

    def __post_init__(self) -> None:
        if self.no_speech_prob is not None and not 0.0 <= self.no_speech_prob <= 1.0:
            raise ValueError("no_speech_prob must lie in [0, 1]")
        if self.sentiment_score is not None and not -3 <= self.sentiment_score <= 3:
            raise ValueError("sentiment_score must lie in [-3, 3]")
        if self.speaker_gender is not None and self.speaker_gender not in ("male", "female"):
            raise ValueError(f"speaker_gender must be male/female, got {self.speaker_gender!r}")
        if self.speaker_age_years is not None and self.speaker_age_years <= 0:
            raise ValueError("speaker_age_years must be > 0")
        if self.word_timestamps:
            prev_start = 0.0
            for w in self.word_timestamps:
                if w.start_s < 0 or w.end_s < w.start_s or w.start_s < prev_start:
                    raise ValueError(f"bad word timestamp for {w.word!r}")
                prev_start = w.start_s


Entry = tuple[ClipRecord, MetaRecord]


def _is_imperative(question: str) -> bool:
    first = question.strip().split(maxsplit=1)
    return bool(first) and first[0].strip(",.:;").lower() in IMPERATIVE_VERBS


IMPERATIVE_VERBS = frozenset(
    """identify write describe tell transcribe name classify give list provide
    determine state estimate predict guess label specify report summarize
    explain recognize detect caption categorize infer suggest convert spell
    indicate point mention analyze analyse assess characterize share select
    choose rate find output repeat recount note""".split()
)


def is_question_form(question: str) -> bool:
    """True when ``question`` ends with '?' or opens with an imperative verb."""
    q = question.strip()
    return q.endswith("?") or _is_imperative(q)


@dataclass(frozen=True)
class AQATuple:
    clip_id: str
    question: str
    answer: str
    task: Task
    endedness: Endedness
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise ValueError("clip_id must be non-empty")
        if not self.question.strip():
            raise ValueError("empty question")
        if not self.answer.strip():
            raise ValueError("empty answer")
        if self.endedness is Endedness.OPEN:
            if self.provenance is not Provenance.LLM:
                raise ValueError("open-ended tuples must come from the LLM")
            if self.task not in OPEN_TASKS:
                raise ValueError(f"task {self.task.value} is not open-ended")
        else:
            if self.task in OPEN_TASKS:
                raise ValueError(f"task {self.task.value} is not closed-ended")
            if self.provenance is Provenance.LLM and self.task is not Task.ASR:
                raise ValueError("closed-ended tuples are rule-generated (ASR excepted)")

    def to_json(self) -> dict[str, str]:
        return {
            "audio_id": self.clip_id,
            "question": self.question,
            "answer": self.answer,
            "task": self.task.value,
            "endedness": self.endedness.value,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "AQATuple":
        return cls(
            clip_id=d["audio_id"],
            question=d["question"],
            answer=d["answer"],
            task=Task(d["task"]),
            endedness=Endedness(d["endedness"]),
            provenance=Provenance(d["provenance"]),
        )


# ---------------------------------------------------------------------------
# manifest parsing


@dataclass(frozen=True)
class RecordError:
    line: int
    message: str


@dataclass
class ParseResult:
    records: list[Entry] = field(default_factory=list)
    errors: list[RecordError] = field(default_factory=list)
    header: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict[str, int]:
        return {"records": len(self.records), "errors": len(self.errors)}


class ManifestError(ValueError):
    """Terminal manifest problem (bad or missing header)."""


_CLIP_FIELDS = ("audio_ref", "duration_s", "sample_rate_hz")
_META_FIELDS = tuple(f.name for f in fields(MetaRecord) if f.name not in ("clip_id", "extra"))

# source-label spellings seen in the public datasets -> MetaRecord field
_COMMON_ALIASES = {
    "labels": "audio_event_labels",
    "events": "audio_event_labels",
    "audio_events": "audio_event_labels",
    "transcript": "spoken_text",
    "text": "spoken_text",
    "asr_text": "spoken_text",
    "gender": "speaker_gender",
    "age": "speaker_age_years",
    "sentiment": "sentiment_score",
    "genres": "music_genres",
    "genre": "music_genres",
    "path": "audio_ref",
    "wav": "audio_ref",
    "audio": "audio_ref",
    "duration": "duration_s",
    "sample_rate": "sample_rate_hz",
    "sr": "sample_rate_hz",
}

_DATASET_ALIASES: dict[Dataset, dict[str, str]] = {
    Dataset.AUDIOCAPS: {"caption_text": "caption"},
    Dataset.CLOTHO: {"caption_1": "caption"},
    Dataset.IEMOCAP: {"emotion_label": "emotion"},
    Dataset.MOSEI: {"sentiment_label": "sentiment_score"},
    Dataset.FMA: {"track_genres": "music_genres", "lyric": "lyrics"},
}

_GENDER_ALIASES = {"m": "male", "male": "male", "man": "male", "f": "female", "female": "female", "woman": "female"}


def _as_labels(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return tuple(str(v) for v in value)


def _meta_value(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name in ("audio_event_labels", "music_genres"):
        return _as_labels(value)
    if name == "word_timestamps":
        stamps = []
        for item in value:
            if isinstance(item, dict):
                stamps.append(WordStamp(str(item["word"]), float(item["start"]), float(item["end"])))
            else:
                w, s, e = item
                stamps.append(WordStamp(str(w), float(s), float(e)))
        return tuple(stamps)
    if name == "speaker_gender":
        try:
            return _GENDER_ALIASES[str(value).strip().lower()]
        except KeyError:
            raise ValueError(f"unknown gender {value!r}") from None
    if name == "sentiment_score":
        score = float(value)
        if score != round(score):
            raise ValueError(f"sentiment_score must be an integer, got {value!r}")
        return int(score)
    if name in ("no_speech_prob", "speaker_age_years"):
        return float(value)
    if name == "style":
        return SpeechStyle.from_dict(value)
    return str(value)


def _normalize_keys(obj: dict[str, Any], kind: Dataset) -> dict[str, Any]:
    aliases = {**_COMMON_ALIASES, **_DATASET_ALIASES.get(kind, {})}
    out: dict[str, Any] = {}
    for k, v in obj.items():
        canon = aliases.get(k, k)
        # an alias never shadows a canonical key; it stays as an extra field
        if canon == k or canon in obj or canon in out:
            out[k] = v
        else:
            out[canon] = v
    return out


def _parse_entry(obj: dict[str, Any], kind: Dataset) -> Entry:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    obj = _normalize_keys(obj, kind)
    clip_id = obj.pop("clip_id", None)
    if not clip_id:
        raise ValueError("missing clip_id")
    if "split" not in obj:
        raise ValueError("missing split")
    split = parse_split(obj.pop("split"))
    source = obj.pop("source_dataset", kind.value)
    duration = obj.pop("duration_s", None)
    sr = obj.pop("sample_rate_hz", None)
    clip = ClipRecord(
        clip_id=str(clip_id),
        source_dataset=Dataset(source),
        split=split,
        audio_ref=str(obj.pop("audio_ref", "") or ""),
        duration_s=None if duration is None else float(duration),
        sample_rate_hz=None if sr is None else int(sr),
    )
    kwargs = {name: _meta_value(name, obj.pop(name)) for name in _META_FIELDS if name in obj}
    meta = MetaRecord(clip_id=clip.clip_id, extra=obj, **kwargs)
    return clip, meta


def parse_manifest(data: bytes | str, dataset_kind: Dataset | str) -> ParseResult:
    """Parse a canonical manifest into (ClipRecord, MetaRecord) pairs.

    Bad lines become :class:`RecordError` entries (1-based line numbers) and
    parsing continues. A missing or malformed header raises ManifestError.
    """
    kind = Dataset(dataset_kind)
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    result = ParseResult()
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if not header_seen:
            try:
                header = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: header is not JSON: {exc}") from None
            if not isinstance(header, dict) or "schema" not in header:
                raise ManifestError(f"line {lineno}: first line must be a header with a 'schema' key")
            if header["schema"] != MANIFEST_SCHEMA:
                raise ManifestError(f"line {lineno}: unsupported schema {header['schema']!r}")
            result.header = header
            header_seen = True
            continue
        try:
            obj = json.loads(line)
            result.records.append(_parse_entry(obj, kind))
        except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
            result.errors.append(RecordError(lineno, str(exc)))
    if result.errors:
        logger.warning("manifest: %d records, %d errors", len(result.records), len(result.errors))
    return result


def _entry_to_json(clip: ClipRecord, meta: MetaRecord) -> dict[str, Any]:
    out: dict[str, Any] = {
        "clip_id": clip.clip_id,
        "split": clip.split.value,
        "source_dataset": clip.source_dataset.value,
    }
    if clip.audio_ref:
        out["audio_ref"] = clip.audio_ref
    if clip.duration_s is not None:
        out["duration_s"] = clip.duration_s
    if clip.sample_rate_hz is not None:
        out["sample_rate_hz"] = clip.sample_rate_hz
    for name in _META_FIELDS:
        v = getattr(meta, name)
        if v is None:
            continue
        if name == "audio_event_labels":
            if v:
                out[name] = list(v)
        elif name == "music_genres":
            out[name] = list(v)
        elif name == "word_timestamps":
            out[name] = [[w.word, w.start_s, w.end_s] for w in v]
        elif name == "style":
            out[name] = v.to_dict()
        else:
            out[name] = v
    out.update(meta.extra)
    return out


def write_manifest(entries: Iterable[Entry], sink: IO[str], dataset_kind: Dataset | str = Dataset.CUSTOM) -> int:
    kind = Dataset(dataset_kind)
    sink.write(json.dumps({"schema": MANIFEST_SCHEMA, "dataset": kind.value}) + "\n")
    n = 0
    for clip, meta in entries:
        sink.write(json.dumps(_entry_to_json(clip, meta), ensure_ascii=False) + "\n")
        n += 1
    return n


def dumps_manifest(entries: Iterable[Entry], dataset_kind: Dataset | str = Dataset.CUSTOM) -> bytes:
    buf = io.StringIO()
    write_manifest(entries, buf, dataset_kind)
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# split hygiene


class EvalSplitLeak(RuntimeError):
    """A test-split record reached a training pipeline stage."""


def _split_of(item: Any) -> Split:
    if isinstance(item, tuple):
        item = item[0]
    return item.split


def exclude_eval_splits(records: Sequence[Any]) -> list[Any]:
    """Keep only train/validation records, preserving order.

    Accepts ClipRecords or (ClipRecord, MetaRecord) pairs.
    """
    return [r for r in records if _split_of(r) is not Split.TEST]


def assert_no_eval_split(records: Iterable[Any]) -> None:
    for r in records:
        if _split_of(r) is Split.TEST:
            clip = r[0] if isinstance(r, tuple) else r
            raise EvalSplitLeak(f"test-split clip {clip.clip_id!r} reached a training stage")


def meta_of(item: Any) -> MetaRecord:
    return item[1] if isinstance(item, tuple) else item


# ---------------------------------------------------------------------------
# AQA output


def write_aqa(tuples: Iterable[AQATuple], sink: IO[str]) -> int:
    n = 0
    for t in tuples:
        sink.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
        n += 1
    return n


def read_aqa(source: IO[str] | str) -> Iterator[AQATuple]:
    lines = source.splitlines() if isinstance(source, str) else source
    for line in lines:
        if line.strip():
            yield AQATuple.from_json(json.loads(line))


def dumps_aqa(tuples: Iterable[AQATuple]) -> str:
    buf = io.StringIO()
    write_aqa(tuples, buf)
    return buf.getvalue()
