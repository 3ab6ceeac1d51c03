"""Label-manipulation protocols applied to an in-context example order.

Every protocol rewrites the *displayed* labels (and sometimes the label
vocabulary) while leaving the inputs untouched. Scoring downstream always
targets the displayed relation, so a run under a transform measures how well
the model predicts the replacement relationship, not the original one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import TransformSpecError
from .verbalize import TaskDataset, build_prompt

CHANGEPOINT_MODES = ("default_to_flipped", "flipped_to_default", "alternating")


@dataclass(frozen=True)
class TransformSpec:
    """Serializable description of one label protocol.

    kinds:
      default            - labels as in the dataset
      randomize          - ``proportion`` of positions get labels drawn i.i.d.
                           from the empirical class marginal
      rotate             - y ← (y + direction) mod C (binary case == flip)
      replace            - swap the label vocabulary for ``replacement_names``
      changepoint        - piecewise default/rotated relation (three modes)
      prompt             - prepend a stock instruction, labels per ``inner``
      answer_in_context  - inject ``repetitions`` copies of the query into the
                           context, labels per ``inner`` (classic query mode)
    """

    kind: str = "default"
    proportion: float = 1.0
    direction: int = 1
    replacement_names: tuple[str, ...] | None = None
    mode: str = "default_to_flipped"
    changepoint: int | None = None
    alternating_start: str = "flipped"
    prompt_id: str | None = None
    repetitions: int = 0
    inner: "TransformSpec | None" = None

    def __post_init__(self):
        if self.kind == "randomize":
            if not 0.0 <= self.proportion <= 1.0:
                raise TransformSpecError(f"proportion must be in [0, 1], got {self.proportion}")
        elif self.kind == "rotate":
            if self.direction not in (1, -1):
                raise TransformSpecError(f"rotation direction must be ±1, got {self.direction}")
        elif self.kind == "replace":
            if not self.replacement_names:
                raise TransformSpecError("replace needs replacement_names")
            if len(set(self.replacement_names)) != len(self.replacement_names):
                raise TransformSpecError(
                    "replacement mapping must be a bijection (names repeat: "
                    f"{self.replacement_names})"
                )
        elif self.kind == "changepoint":
            if self.mode not in CHANGEPOINT_MODES:
                raise TransformSpecError(f"unknown changepoint mode {self.mode!r}")
            if self.changepoint is None or self.changepoint < 1:
                raise TransformSpecError("changepoint must be >= 1")
            if self.alternating_start not in ("flipped", "default"):
                raise TransformSpecError(
                    f"alternating_start must be 'flipped' or 'default', got {self.alternating_start!r}"
                )
        elif self.kind == "prompt":
            if self.prompt_id is None:
                raise TransformSpecError("prompt transform needs a prompt_id")
        elif self.kind == "answer_in_context":
            if self.repetitions < 0:
                raise TransformSpecError("repetitions must be >= 0")
        elif self.kind != "default":
            raise TransformSpecError(f"unknown transform kind {self.kind!r}")

    @property
    def label(self) -> str:
        """Filesystem-safe slug used for record/plot filenames."""
        if self.kind == "default":
            return "default"
        if self.kind == "randomize":
            return f"randomize_q{self.proportion:g}"
        if self.kind == "rotate":
            return "rotate" if self.direction == 1 else "rotate_back"
        if self.kind == "replace":
            return "replace_" + "-".join(self.replacement_names)
        if self.kind == "changepoint":
            short = {"default_to_flipped": "d2f", "flipped_to_default": "f2d", "alternating": "alt"}
            return f"changepoint_{short[self.mode]}_n{self.changepoint}"
        if self.kind == "prompt":
            return f"prompt_{self.prompt_id}_{self.inner_spec.label}"
        if self.kind == "answer_in_context":
            return f"repeat{self.repetitions}_{self.inner_spec.label}"
        raise TransformSpecError(self.kind)

    @property
    def inner_spec(self) -> "TransformSpec":
        return self.inner if self.inner is not None else TransformSpec()

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "randomize":
            out["proportion"] = self.proportion
        elif self.kind == "rotate":
            out["direction"] = self.direction
        elif self.kind == "replace":
            out["replacement_names"] = list(self.replacement_names)
        elif self.kind == "changepoint":
            out.update(mode=self.mode, changepoint=self.changepoint)
            if self.mode == "alternating":
                out["alternating_start"] = self.alternating_start
        elif self.kind == "prompt":
            out["prompt_id"] = self.prompt_id
        elif self.kind == "answer_in_context":
            out["repetitions"] = self.repetitions
        if self.inner is not None:
            out["inner"] = self.inner.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TransformSpec":
        data = dict(data)
        if "inner" in data and data["inner"] is not None:
            data["inner"] = cls.from_dict(data["inner"])
        if "replacement_names" in data and data["replacement_names"] is not None:
            data["replacement_names"] = tuple(data["replacement_names"])
        return cls(**data)


@dataclass(frozen=True)
class TransformResult:
    """Displayed labels for one assembled order."""

    displayed_strings: tuple[str, ...]
    displayed_labels: tuple[int, ...]
    class_names: tuple[str, ...]
    prompt_text: str | None = None


def relation_at(spec: TransformSpec, position: int) -> str:
    """Piecewise relation ('default' or 'flipped') at a 1-indexed position."""
    if spec.kind != "changepoint":
        raise TransformSpecError("relation_at is defined for changepoint transforms")
    n = spec.changepoint
    if spec.mode == "default_to_flipped":
        return "default" if position <= n else "flipped"
    if spec.mode == "flipped_to_default":
        return "flipped" if position <= n else "default"
    start, other = (
        ("flipped", "default") if spec.alternating_start == "flipped" else ("default", "flipped")
    )
    return start if position % 2 == 1 else other


def apply(
    spec: TransformSpec,
    dataset: TaskDataset,
    order: Sequence[int],
    rng: np.random.Generator,
) -> TransformResult:
    """Compute the displayed label for every position of ``order``.

    Deterministic given (spec, rng state); randomize draws replacement labels
    i.i.d. from the dataset's empirical class marginal for an exact
    ``round(proportion * N)`` count of uniformly chosen positions.
    """
    c = dataset.num_classes
    true = [dataset.examples[i][1] for i in order]
    names = dataset.class_names
    n = len(order)

    if spec.kind == "default":
        displayed = list(true)
    elif spec.kind == "randomize":
        k = round(spec.proportion * n)
        if k > n:
            raise TransformSpecError(f"cannot randomize {k} of {n} positions")
        displayed = list(true)
        chosen = rng.choice(n, size=k, replace=False)
        draws = rng.choice(c, size=k, replace=True, p=np.asarray(dataset.class_frequencies))
        for pos, lab in zip(chosen, draws):
            displayed[int(pos)] = int(lab)
    elif spec.kind == "rotate":
        displayed = [(y + spec.direction) % c for y in true]
    elif spec.kind == "replace":
        if len(spec.replacement_names) != c:
            raise TransformSpecError(
                f"replacement needs {c} names, got {len(spec.replacement_names)}"
            )
        displayed = list(true)
        names = spec.replacement_names
    elif spec.kind == "changepoint":
        displayed = [
            true[i] if relation_at(spec, i + 1) == "default" else (true[i] + 1) % c
            for i in range(n)
        ]
    elif spec.kind == "prompt":
        inner = apply(spec.inner_spec, dataset, order, rng)
        return TransformResult(
            displayed_strings=inner.displayed_strings,
            displayed_labels=inner.displayed_labels,
            class_names=inner.class_names,
            prompt_text=build_prompt(spec.prompt_id, dataset.class_names),
        )
    elif spec.kind == "answer_in_context":
        # repetitions change the order, not the label relation; see inject_repetitions
        return apply(spec.inner_spec, dataset, order, rng)
    else:
        raise TransformSpecError(f"unknown transform kind {spec.kind!r}")

    return TransformResult(
        displayed_strings=tuple(names[y] for y in displayed),
        displayed_labels=tuple(displayed),
        class_names=tuple(names),
        prompt_text=None,
    )


def schedule_counts(spec: TransformSpec, total: int) -> tuple[int, int]:
    """(default, flipped) relation counts over positions 1..total.

    At total = 2 × changepoint every mode has shown both relations equally
    often; the counts are computed by enumeration, not assumed.
    """
    if spec.kind != "changepoint":
        raise TransformSpecError("schedule_counts is defined for changepoint transforms")
    if total != 2 * spec.changepoint:
        raise TransformSpecError(
            f"balanced counts are defined at total = 2 x changepoint "
            f"({2 * spec.changepoint}), got {total}"
        )
    relations = [relation_at(spec, i) for i in range(1, total + 1)]
    return relations.count("default"), relations.count("flipped")


def inject_repetitions(
    order: Sequence[int],
    query_index: int,
    repetitions: int,
    rng: np.random.Generator,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Insert ``repetitions`` copies of the query example into the context.

    Each copy goes to a uniformly random insertion point; returns the
    augmented order and the final positions of the copies. The query must be
    held out of the context, and the augmented order deliberately repeats
    ``query_index``; assemble such orders with ``allow_repeats=True``.
    """
    if query_index in order:
        raise TransformSpecError("query example must not already be in the context")
    out = list(order)
    for _ in range(repetitions):
        out.insert(int(rng.integers(0, len(out) + 1)), query_index)
    positions = tuple(i for i, v in enumerate(out) if v == query_index)
    return tuple(out), positions
