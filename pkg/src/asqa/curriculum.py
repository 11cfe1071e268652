"""Three-stage training curriculum and per-stage manifest filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import IO, Sequence

from .aqa_closed import derive_rng
from .records import AQATuple, Endedness, Task


class Component(str, Enum):
    PROJECTION = "projection"
    TLTR = "tltr"
    LORA = "lora"


class TaskScope(str, Enum):
    CLASSIFICATION_ONLY = "classification_only"
    ALL = "all"


CLASSIFICATION_TASKS = frozenset(
    {Task.AUDIO_EVENTS, Task.EMOTION, Task.GENDER, Task.AGE, Task.SPEECH_STYLE, Task.MUSIC_GENRE}
)


@dataclass(frozen=True)
class CurriculumStage:
    index: int
    trainable: frozenset[Component]
    task_scope: TaskScope
    sample_budget: int | None
    learning_rate: float
    epochs: int

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "trainable": sorted(c.value for c in self.trainable),
            "task_scope": self.task_scope.value,
            "sample_budget": self.sample_budget,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CurriculumStage":
        return cls(
            index=int(d["index"]),
            trainable=frozenset(Component(c) for c in d["trainable"]),
            task_scope=TaskScope(d["task_scope"]),
            sample_budget=d["sample_budget"],
            learning_rate=float(d["learning_rate"]),
            epochs=int(d["epochs"]),
        )


def build_plan() -> list[CurriculumStage]:
    everything = frozenset(Component)
    return [
        CurriculumStage(1, frozenset({Component.PROJECTION}), TaskScope.CLASSIFICATION_ONLY, 2_100_000, 1e-3, 2),
        CurriculumStage(2, everything, TaskScope.CLASSIFICATION_ONLY, 2_100_000, 2e-4, 2),
        CurriculumStage(3, everything, TaskScope.ALL, 9_600_000, 2e-4, 1),
    ]


def unlimited(stage: CurriculumStage) -> CurriculumStage:
    return replace(stage, sample_budget=None)


def in_scope(t: AQATuple, stage: CurriculumStage) -> bool:
    if stage.task_scope is TaskScope.ALL:
        return True
    return t.endedness is Endedness.CLOSED and t.task in CLASSIFICATION_TASKS


def _canonical_key(t: AQATuple) -> tuple[str, ...]:
    return (t.clip_id, t.task.value, t.question, t.answer, t.endedness.value, t.provenance.value)


def stage_filter(tuples: Sequence[AQATuple], stage: CurriculumStage, seed: int = 0) -> list[AQATuple]:
    """Tuples allowed at ``stage``, uniformly subsampled down to its budget.

    Selection is made on the canonically sorted candidates, so it does not
    depend on input order; survivors keep their input order.
    """
    kept = [(i, t) for i, t in enumerate(tuples) if in_scope(t, stage)]
    budget = stage.sample_budget
    if budget is not None and len(kept) > budget:
        canon = sorted(range(len(kept)), key=lambda j: _canonical_key(kept[j][1]))
        chosen = derive_rng(seed, "stage", str(stage.index)).sample(canon, budget)
        kept = [kept[j] for j in sorted(chosen)]
    return [t for _, t in kept]


def write_plan(stages: Sequence[CurriculumStage], sink: IO[str]) -> None:
    for s in stages:
        sink.write(json.dumps(s.to_json()) + "\n")


def read_plan(source: IO[str]) -> list[CurriculumStage]:
    return [CurriculumStage.from_json(json.loads(l)) for l in source if l.strip()]
