"""Vision-language prompt construction and training-batch assembly.

A prompt is {text guidance, example pair (source -> target), query}. For an
inverse task the example shows condition -> image and the query is the
condition of the denoising target; for a forward task everything is flipped
and the text is a fixed task label instead of a caption.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .corpus.store import Corpus
from .corpus.transforms import TRAINING_KINDS, TransformKind
from .diffusion import NoiseSchedule
from .vocab import FIXED_LABELS


class TaskId(enum.Enum):
    INV_DEPTH = "inv-depth"
    INV_HED = "inv-hed"
    INV_SEG = "inv-seg"
    FWD_DEPTH = "fwd-depth"
    FWD_HED = "fwd-hed"
    FWD_SEG = "fwd-seg"
    INV_CANNY = "inv-canny"
    INV_NORMAL = "inv-normal"
    INV_SCRIBBLE = "inv-scribble"
    FWD_CANNY = "fwd-canny"
    FWD_NORMAL = "fwd-normal"
    FWD_SCRIBBLE = "fwd-scribble"

    @property
    def inverse(self) -> bool:
        return self.value.startswith("inv-")

    @property
    def kind(self) -> TransformKind:
        return TransformKind(self.value.split("-", 1)[1])

    @property
    def held_out(self) -> bool:
        return self.kind not in TRAINING_KINDS


TRAINING_TASKS = (
    TaskId.INV_DEPTH,
    TaskId.INV_HED,
    TaskId.INV_SEG,
    TaskId.FWD_DEPTH,
    TaskId.FWD_HED,
    TaskId.FWD_SEG,
)

HELD_OUT_TASKS = tuple(t for t in TaskId if t.held_out)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class VisionLanguagePrompt:
    """Text guidance plus example pair plus query; None text means dropped.

    `example_kind`/`query_kind` record whether each image slot carries a
    condition map (the TransformKind) or a real image (None), so type
    alignment is checkable without re-deriving it.
    """

    text_guidance: str | None
    example_source: np.ndarray | None
    example_target: np.ndarray | None
    query: np.ndarray
    example_kind: TransformKind | None = None
    query_kind: TransformKind | None = None

    def without_text(self) -> "VisionLanguagePrompt":
        return replace(self, text_guidance=None)

    def without_images(self) -> "VisionLanguagePrompt":
        zero = np.zeros_like(self.query)
        src = None if self.example_source is None else zero
        tgt = None if self.example_target is None else zero
        return replace(self, example_source=src, example_target=tgt, query=zero)

    @property
    def type_aligned(self) -> bool:
        return self.example_source is None or self.example_kind == self.query_kind


@dataclass(frozen=True)
class PromptBatchItem:
    prompt: VisionLanguagePrompt
    target: np.ndarray
    task: TaskId | None  # None for base-phase items
    t: int
    eps: np.ndarray


def sample_task(rng: np.random.Generator) -> TaskId:
    """Uniform draw over the six training tasks."""
    return TRAINING_TASKS[int(rng.integers(len(TRAINING_TASKS)))]


def build_prompt(
    corpus: Corpus,
    query_id: int,
    example_id: int,
    task: TaskId,
    allow_held_out: bool = False,
) -> tuple[VisionLanguagePrompt, np.ndarray]:
    """Assemble the prompt and denoising target for one (query, example, task).

    Inverse task X: example (X(I2) -> I2), query X(I1), target I1, text = I1's
    caption. Forward task X: example (I2 -> X(I2)), query I1, target X(I1),
    text = the task's fixed label.
    """
    if query_id == example_id:
        raise PromptError("example record must differ from the query record")
    if task.held_out and not allow_held_out:
        raise PromptError(f"held-out task {task.value} requested in training mode")
    kind = task.kind
    query_img = corpus.image(query_id)
    example_img = corpus.image(example_id)
    example_cond = corpus.condition(example_id, kind)
    query_cond = corpus.condition(query_id, kind)
    if task.inverse:
        prompt = VisionLanguagePrompt(
            text_guidance=corpus.record(query_id).caption,
            example_source=example_cond,
            example_target=example_img,
            query=query_cond,
            example_kind=kind,
            query_kind=kind,
        )
        target = query_img
    else:
        prompt = VisionLanguagePrompt(
            text_guidance=FIXED_LABELS[kind.value],
            example_source=example_img,
            example_target=example_cond,
            query=query_img,
            example_kind=None,
            query_kind=None,
        )
        target = query_cond
    return prompt, target


def drop_text(prompt: VisionLanguagePrompt, p: float, rng: np.random.Generator) -> VisionLanguagePrompt:
    """With probability p replace the text guidance by the dropped marker."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        return prompt.without_text()
    return prompt


def _two_distinct(rng: np.random.Generator, ids: list[int]) -> tuple[int, int]:
    i, j = rng.choice(len(ids), size=2, replace=False)
    return ids[int(i)], ids[int(j)]


def make_batch(
    corpus: Corpus,
    batch_size: int,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    text_dropout_p: float = 0.10,
) -> list[PromptBatchItem]:
    """Draw one training batch of prompted denoising items.

    Per item: a task uniform over the six training tasks, two distinct train
    records (query and example donor), the prompt, text dropout, a uniform
    timestep in [1, T], and the target-shaped noise draw.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(corpus.train_ids) < 2:
        raise ValueError("corpus train split must contain at least two records")
    items = []
    for _ in range(batch_size):
        task = sample_task(rng)
        assert not task.held_out
        query_id, example_id = _two_distinct(rng, corpus.train_ids)
        prompt, target = build_prompt(corpus, query_id, example_id, task)
        prompt = drop_text(prompt, text_dropout_p, rng)
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(target.shape).astype(np.float32)
        items.append(PromptBatchItem(prompt=prompt, target=target, task=task, t=t, eps=eps))
    return items


def make_base_batch(
    corpus: Corpus,
    batch_size: int,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    text_dropout_p: float = 0.10,
) -> list[PromptBatchItem]:
    """Batch for base-phase text-to-image pretraining (no prompt images)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = []
    for _ in range(batch_size):
        rec_id = corpus.train_ids[int(rng.integers(len(corpus.train_ids)))]
        target = corpus.image(rec_id)
        caption = corpus.record(rec_id).caption if rng.random() >= text_dropout_p else None
        prompt = VisionLanguagePrompt(
            text_guidance=caption,
            example_source=None,
            example_target=None,
            query=target,
        )
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(target.shape).astype(np.float32)
        items.append(PromptBatchItem(prompt=prompt, target=target, task=None, t=t, eps=eps))
    return items


def make_single_task_batch(
    corpus: Corpus,
    batch_size: int,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    task: TaskId,
    text_dropout_p: float = 0.10,
) -> list[PromptBatchItem]:
    """Batch for the per-task baseline: one fixed task, query-only prompts."""
    if task.held_out:
        raise PromptError("baselines train only on training tasks")
    items = []
    for _ in range(batch_size):
        query_id, example_id = _two_distinct(rng, corpus.train_ids)
        prompt, target = build_prompt(corpus, query_id, example_id, task)
        prompt = replace(prompt, example_source=None, example_target=None, example_kind=None)
        prompt = drop_text(prompt, text_dropout_p, rng)
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(target.shape).astype(np.float32)
        items.append(PromptBatchItem(prompt=prompt, target=target, task=task, t=t, eps=eps))
    return items
