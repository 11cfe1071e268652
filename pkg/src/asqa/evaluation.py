"""Scoring for closed-ended outputs and the instruction-following judge."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .llm import BackoffGate, ChatClient, LlmConfigError, LlmError, LlmRequest, call_llm, ordered_map

logger = logging.getLogger(__name__)

METRICS = ("acc", "macro_f1", "wer", "mae", "follow_rate")


@dataclass(frozen=True)
class EvalResult:
    task: str
    metric_name: str
    value: float
    n: int

    def __post_init__(self) -> None:
        if self.metric_name not in METRICS:
            raise ValueError(f"unknown metric {self.metric_name!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.value < 0 or (self.metric_name in ("acc", "macro_f1", "follow_rate") and self.value > 1):
            raise ValueError(f"{self.metric_name}={self.value} out of range")

    def to_json(self) -> dict[str, Any]:
        return {"task": self.task, "metric_name": self.metric_name, "value": self.value, "n": self.n}


# ---------------------------------------------------------------------------
# extraction

_MALE = r"male|males|man|men|boy|boys|masculine|gentleman|gentlemen|guy"
_FEMALE = r"female|females|woman|women|girl|girls|feminine|lady|ladies"
_GENDER_RE = re.compile(rf"\b(?:(?P<m>{_MALE})|(?P<f>{_FEMALE}))\b", re.IGNORECASE)
_NUMBER_RE = re.compile(r"(?<![\w.])(\d+(?:\.\d+)?)")
_QUOTED_RE = re.compile(r'"([^"]+)"|“([^”]+)”|``(.+?)\'\'')

_TASK_ALIASES = {"caption": "audio_caption", "audio_caption": "audio_caption", "asr": "asr", "gender": "gender", "age": "age"}


def extract_prediction(output_text: str, task: str) -> str | float | None:
    """Pull the prediction out of free-form model output; None when unparseable."""
    kind = _TASK_ALIASES.get(task)
    if kind is None:
        raise ValueError(f"no extraction rule for task {task!r}")
    text = output_text.strip()
    if kind == "gender":
        m = _GENDER_RE.search(text)
        if m is None:
            return None
        return "male" if m.group("m") else "female"
    if kind == "age":
        m = _NUMBER_RE.search(text)
        if m is None:
            return None
        value = float(m.group(1))
        return int(value) if value.is_integer() else value
    m = _QUOTED_RE.search(text)
    if m:
        return next(g for g in m.groups() if g is not None).strip()
    return text or None


# ---------------------------------------------------------------------------
# similarity classification


class Embedder(Protocol):
    def __call__(self, texts: Sequence[str]) -> np.ndarray: ...


class TrigramEmbedder:
    """Deterministic offline embedder: hashed character trigrams, L2-normalized."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        padded = f"  {' '.join(text.lower().split())} "
        for i in range(len(padded) - 2):
            h = hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest()
            v[int.from_bytes(h, "little") % self.dim] += 1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts]) if texts else np.zeros((0, self.dim))


class HttpEmbedder:
    """OpenAI-compatible ``/embeddings`` provider."""

    def __init__(
        self,
        model: str = "text-embedding-ada-002",
        base_url: str | None = None,
        api_key_env: str = "ASQA_LLM_API_KEY",
        transport: httpx.BaseTransport | None = None,
    ):
        key = os.environ.get(api_key_env, "").strip()
        if not key:
            raise LlmConfigError(f"missing credential: set {api_key_env}")
        self.model = model
        self.base_url = (base_url or os.environ.get("ASQA_LLM_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self._client = httpx.Client(headers={"Authorization": f"Bearer {key}"}, transport=transport)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._client.post(f"{self.base_url}/embeddings", json={"model": self.model, "input": list(texts)})
        if resp.status_code >= 400:
            raise LlmError(f"embedding request failed: {resp.status_code}", status=resp.status_code)
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        return np.array([d["embedding"] for d in data], dtype=np.float64)


def cosine_scores(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    cn = np.linalg.norm(candidates, axis=1)
    denom = qn * cn
    dots = candidates @ query
    return np.divide(dots, denom, out=np.zeros_like(dots, dtype=np.float64), where=denom > 0)


def classify_by_similarity(output_text: str, label_set: Sequence[str], embedder: Embedder) -> str:
    """Label whose embedding has the highest cosine with the output; ties -> first label."""
    if not label_set:
        raise ValueError("label_set must be non-empty")
    vecs = np.asarray(embedder([output_text, *label_set]), dtype=np.float64)
    if vecs.shape[0] != len(label_set) + 1:
        raise LlmError("embedder returned the wrong number of vectors")
    scores = cosine_scores(vecs[0], vecs[1:])
    return label_set[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# metrics


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _words(x: Sequence[str] | str) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def wer(reference: Sequence[str] | str, hypothesis: Sequence[str] | str) -> float:
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(pairs: Iterable[tuple[Sequence[str] | str, Sequence[str] | str]]) -> float:
    edits = words = 0
    for ref, hyp in pairs:
        r = _words(ref)
        if not r:
            raise ValueError("reference must be non-empty")
        edits += edit_distance(r, _words(hyp))
        words += len(r)
    if not words:
        raise ValueError("no references")
    return edits / words


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("need at least one example")


def score_classification(preds: Sequence[Any], golds: Sequence[Any], label_set: Sequence[Any] | None = None) -> dict[str, float]:
    """Accuracy and macro-F1; classes with no support in preds or golds score F1 = 0."""
    _check_lengths(preds, golds)
    labels = list(dict.fromkeys(label_set if label_set is not None else golds))
    acc = sum(p == g for p, g in zip(preds, golds)) / len(golds)
    f1s = []
    for c in labels:
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        fp = sum(p == c and g != c for p, g in zip(preds, golds))
        fn = sum(p != c and g == c for p, g in zip(preds, golds))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return {"acc": acc, "macro_f1": sum(f1s) / len(f1s) if f1s else 0.0}


def score_regression_mae(preds: Sequence[float], golds: Sequence[float]) -> float:
    _check_lengths(preds, golds)
    return float(np.mean(np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(golds, dtype=np.float64))))


# ---------------------------------------------------------------------------
# predictions file -> EvalResults


@dataclass(frozen=True)
class Prediction:
    clip_id: str
    task: str
    model_output: str
    gold: Any


def read_predictions(source: IO[str]) -> list[Prediction]:
    out = []
    for line in source:
        if line.strip():
            d = json.loads(line)
            out.append(Prediction(d["clip_id"], d["task"], d["model_output"], d["gold"]))
    return out


@dataclass
class EvalReport:
    results: list[EvalResult] = field(default_factory=list)
    unparseable: dict[str, int] = field(default_factory=dict)


SIMILARITY_TASKS = ("audio_events", "emotion", "music_genre", "speech_style")


def evaluate_predictions(preds: Sequence[Prediction], embedder: Embedder | None = None) -> EvalReport:
    """Score predictions grouped by task with the task's protocol.

    ASR: extraction then corpus WER. Gender: extraction then acc and macro-F1.
    Age: extraction then MAE over parseable outputs. Caption: extraction then
    nearest-gold-caption retrieval accuracy. Other tasks: similarity
    classification against the set of gold labels seen for that task.
    """
    embedder = embedder or TrigramEmbedder()
    by_task: dict[str, list[Prediction]] = defaultdict(list)
    for p in preds:
        by_task[p.task].append(p)
    report = EvalReport()
    for task in sorted(by_task):
        items = by_task[task]
        n = len(items)
        golds = [p.gold for p in items]
        if task == "asr":
            hyps = [extract_prediction(p.model_output, "asr") or "" for p in items]
            report.unparseable[task] = sum(h == "" for h in hyps)
            report.results.append(EvalResult(task, "wer", corpus_wer(zip(golds, hyps)), n))
        elif task == "gender":
            ex = [extract_prediction(p.model_output, "gender") for p in items]
            report.unparseable[task] = sum(e is None for e in ex)
            scores = score_classification(ex, golds, ["male", "female"])
            report.results += [EvalResult(task, "acc", scores["acc"], n), EvalResult(task, "macro_f1", scores["macro_f1"], n)]
        elif task == "age":
            pairs = [(extract_prediction(p.model_output, "age"), float(p.gold)) for p in items]
            parsed = [(a, g) for a, g in pairs if a is not None]
            report.unparseable[task] = n - len(parsed)
            if parsed:
                mae = score_regression_mae([a for a, _ in parsed], [g for _, g in parsed])
                report.results.append(EvalResult(task, "mae", mae, len(parsed)))
        else:
            kind = "audio_caption" if task in ("audio_caption", "caption") else None
            labels = sorted(set(map(str, golds)))
            outs = []
            for p in items:
                text = p.model_output
                if kind:
                    text = extract_prediction(text, kind) or ""
                outs.append(classify_by_similarity(text, labels, embedder))
            scores = score_classification(outs, [str(g) for g in golds], labels)
            report.results.append(EvalResult(task, "acc", scores["acc"], n))
            if kind is None:
                report.results.append(EvalResult(task, "macro_f1", scores["macro_f1"], n))
    return report


def write_results(results: Iterable[EvalResult], sink: IO[str]) -> None:
    for r in results:
        sink.write(json.dumps(r.to_json()) + "\n")


# ---------------------------------------------------------------------------
# instruction-following judge

JUDGE_PROMPT = (
    "Below is a pair of question and response. Identify if the response directly "
    "answers the question and give a clear answer."
)

_YES = {"yes", "yeah", "yep", "true", "correct", "affirmative"}
_NO = {"no", "nope", "false", "incorrect", "negative", "not"}
_LEADING_WORD = re.compile(r"^[\W_]*([A-Za-z]+)")


def judge_request(question: str, response: str, model_name: str = "gpt-4", max_retries: int = 3) -> LlmRequest:
    return LlmRequest(
        system_or_task_prompt=JUDGE_PROMPT,
        user_input=f"Question: {question}\nResponse: {response}",
        model_name=model_name,
        max_retries=max_retries,
        temperature=0.0,
    )


def parse_verdict(text: str) -> bool | None:
    m = _LEADING_WORD.match(text)
    if not m:
        return None
    word = m.group(1).lower()
    if word in _YES:
        return True
    if word in _NO:
        return False
    return None


@dataclass
class JudgeLog:
    entries: list[dict[str, Any]] = field(default_factory=list)

    def write(self, sink: IO[str]) -> None:
        for e in self.entries:
            sink.write(json.dumps(e, ensure_ascii=False) + "\n")


def judge_follows(
    question: str,
    response: str,
    judge_client: ChatClient,
    log: JudgeLog | None = None,
    model_name: str = "gpt-4",
    **call_kwargs: Any,
) -> bool:
    """Ask the judge whether ``response`` answers ``question``. Unclear verdicts count as no."""
    raw = call_llm(judge_request(question, response, model_name), judge_client, **call_kwargs)
    verdict = parse_verdict(raw)
    if verdict is None:
        logger.warning("unparseable judge verdict: %r", raw[:80])
    if log is not None:
        log.entries.append(
            {"question": question, "response": response, "verdict": raw, "follows": bool(verdict), "parsed": verdict is not None}
        )
    return bool(verdict)


def follow_rate(
    pairs: Sequence[tuple[str, str]],
    judge_client: ChatClient,
    jobs: int = 1,
    log: JudgeLog | None = None,
    sleep: Callable[[float], None] | None = None,
    model_name: str = "gpt-4",
) -> float:
    if not pairs:
        raise ValueError("need at least one (question, response) pair")
    gate = BackoffGate() if sleep is None else BackoffGate(sleep=sleep)
    kwargs: dict[str, Any] = {"gate": gate}
    if sleep is not None:
        kwargs["sleep"] = sleep
    local_logs = [JudgeLog() for _ in pairs]

    def one(i: int) -> bool:
        q, r = pairs[i]
        return judge_follows(q, r, judge_client, local_logs[i], model_name, **kwargs)

    verdicts = ordered_map(one, range(len(pairs)), jobs)
    if log is not None:
        for l in local_logs:
            log.entries.extend(l.entries)
    return sum(verdicts) / len(verdicts)
