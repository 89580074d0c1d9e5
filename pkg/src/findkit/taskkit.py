"""Task unification: adapt raw samples into one shared example form for
referring-expression (REC), text-localization (LOC), and detection (DET)
queries, and compose training batches at fixed per-task ratios.

Batch composition is deterministic: every batch contains exactly the
per-stream counts implied by the mix weights. Streams shuffle and cycle
independently.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .datakit import Sample
from .geometry import Box

TASKS = ("DET", "LOC", "REC")

DEFAULT_LOC_PROMPT = "Find the X"
DEFAULT_DET_PROMPT = "Find all the objects"

_PLACEHOLDER = re.compile(r"\bX\b")


@dataclass
class TaskExample:
    """Adapted record consumed identically by all tasks."""

    image: np.ndarray
    query: str
    target_boxes: list[Box]
    target_category_ids: list[int]
    task: str
    image_id: int = -1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.target_boxes) != len(self.target_category_ids):
            raise ValueError("boxes and category ids must align")
        if self.task == "REC" and len(self.target_boxes) != 1:
            raise ValueError("REC example must have exactly one target box")
        if self.task == "LOC" and len(set(self.target_category_ids)) > 1:
            raise ValueError("LOC targets must share one category")


def fill_prompt(template: str, category_name: str) -> str:
    """Substitute the X placeholder with the category name."""
    if not _PLACEHOLDER.search(template):
        raise ValueError(f"localization prompt {template!r} has no X placeholder")
    return _PLACEHOLDER.sub(category_name, template)


def adapt_loc(
    sample: Sample,
    rng: np.random.Generator,
    prompt_template: str = DEFAULT_LOC_PROMPT,
    category_names: dict[int, str] | None = None,
    absent_category_prob: float = 0.0,
    all_category_ids: tuple[int, ...] = (),
) -> TaskExample | None:
    """Query one category present in the sample; its boxes are the targets.

    Returns None for empty samples (skip signal, not an error). With
    absent_category_prob > 0 an absent category may be queried instead,
    yielding a valid zero-target example (off by default).
    """
    present = sorted(set(sample.category_ids))
    if not present:
        return None
    if absent_category_prob > 0:
        absent = [c for c in all_category_ids if c not in present]
        if absent and rng.random() < absent_category_prob:
            cat = absent[int(rng.integers(len(absent)))]
            query = fill_prompt(prompt_template, _name(cat, category_names))
            return TaskExample(sample.image, query, [], [], "LOC", sample.image_id)
    cat = present[int(rng.integers(len(present)))]
    boxes = [b for b, c in zip(sample.boxes, sample.category_ids) if c == cat]
    query = fill_prompt(prompt_template, _name(cat, category_names))
    return TaskExample(sample.image, query, boxes, [cat] * len(boxes), "LOC", sample.image_id)


def _name(category_id: int, category_names: dict[int, str] | None) -> str:
    if category_names is None:
        from .datakit import CATEGORIES

        return CATEGORIES[category_id - 1]
    return category_names[category_id]


def adapt_det(sample: Sample, prompt: str = DEFAULT_DET_PROMPT) -> TaskExample:
    """Static prompt; every annotated object is a target."""
    return TaskExample(
        sample.image,
        prompt,
        list(sample.boxes),
        list(sample.category_ids),
        "DET",
        sample.image_id,
    )


def adapt_rec(sample: Sample) -> TaskExample:
    """The stored expression queries its single referent."""
    if sample.expression is None or sample.referent_index is None:
        raise ValueError(f"sample {sample.image_id} carries no referring expression")
    idx = sample.referent_index
    return TaskExample(
        sample.image,
        sample.expression,
        [sample.boxes[idx]],
        [sample.category_ids[idx]],
        "REC",
        sample.image_id,
    )


@dataclass(frozen=True)
class MixSpec:
    """Per-stream integer weights and the total batch size."""

    weights: tuple[tuple[str, int], ...]
    batch_size: int

    def __post_init__(self):
        if any(w <= 0 for _, w in self.weights):
            raise ValueError("mix weights must be positive")
        total = sum(w for _, w in self.weights)
        if self.batch_size % total:
            raise ValueError(f"batch size {self.batch_size} not divisible by weight sum {total}")

    @classmethod
    def parse(cls, text: str, batch_size: int, stream_names=TASKS) -> "MixSpec":
        """Parse '1:1:1'-style ratios, ordered as stream_names."""
        parts = [int(p) for p in text.split(":")]
        if len(parts) != len(stream_names):
            raise ValueError(f"mix {text!r} has {len(parts)} weights for {len(stream_names)} streams")
        return cls(tuple(zip(stream_names, parts)), batch_size)

    def counts(self) -> dict[str, int]:
        total = sum(w for _, w in self.weights)
        unit = self.batch_size // total
        return {name: w * unit for name, w in self.weights}


class _StreamCycler:
    """Independent per-epoch reshuffling cycle over one stream."""

    def __init__(self, items: list, rng: np.random.Generator):
        if not items:
            raise ValueError("empty stream")
        self.items = items
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self.order = [int(i) for i in self.rng.permutation(len(self.items))]
                self.pos = 0
            out.append(self.items[self.order[self.pos]])
            self.pos += 1
        return out


class BatchMixer:
    """Deterministic batch composer over independently cycling streams.

    Every batch holds exactly counts()[name] items from each stream, in
    spec order. The position state is serializable so training can resume
    mid-epoch from a checkpoint (the shared rng is snapshotted separately).
    """

    def __init__(self, streams: dict[str, list], spec: MixSpec, rng: np.random.Generator):
        names = [name for name, _ in spec.weights]
        missing = [n for n in names if n not in streams]
        if missing:
            raise ValueError(f"missing streams {missing}")
        self.spec = spec
        self.names = names
        self.cyclers = {name: _StreamCycler(streams[name], rng) for name in names}

    def next_batch(self) -> list:
        counts = self.spec.counts()
        batch = []
        for name in self.names:
            batch.extend((name, item) for item in self.cyclers[name].take(counts[name]))
        return batch

    def get_state(self) -> dict:
        return {name: {"order": list(c.order), "pos": c.pos} for name, c in self.cyclers.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self.cyclers[name].order = [int(i) for i in st["order"]]
            self.cyclers[name].pos = int(st["pos"])


def mix_batches(streams: dict[str, list], spec: MixSpec, rng: np.random.Generator):
    """Infinite iterator of batches of (stream_name, item) pairs."""
    mixer = BatchMixer(streams, spec, rng)
    while True:
        yield mixer.next_batch()
