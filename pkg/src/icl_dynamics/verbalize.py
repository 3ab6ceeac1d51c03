"""Datasets, templates, and prompt assembly.

Turns a labeled text dataset into a single prompt string while tracking the
character span of every label, so that token-level label positions can be
recovered later. All functions here are pure string manipulation; no
tokenizer is involved yet.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AssemblyError, DatasetError, TemplateError

FREQUENCY_TOLERANCE = 1e-12

_PLACEHOLDER_RE = re.compile(r"\{(text\d?)\}")


@dataclass(frozen=True)
class TaskDataset:
    """Ordered labeled examples plus the class vocabulary and its frequencies.

    ``examples`` holds ``(inputs, label)`` pairs where ``inputs`` is a tuple of
    one or two text fields and ``label`` indexes into ``class_names``.
    ``class_frequencies`` is the label marginal of the split the examples were
    drawn from; random-label transforms sample from it.
    """

    examples: tuple[tuple[tuple[str, ...], int], ...]
    class_names: tuple[str, ...]
    class_frequencies: tuple[float, ...]
    name: str = "task"

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise DatasetError("a task needs at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"class names must be pairwise distinct: {self.class_names}")
        if len(self.class_frequencies) != len(self.class_names):
            raise DatasetError("class_frequencies length must match class_names")
        total = sum(self.class_frequencies)
        if abs(total - 1.0) > FREQUENCY_TOLERANCE:
            raise DatasetError(f"class_frequencies sum to {total!r}, expected 1")
        if any(f < 0 for f in self.class_frequencies):
            raise DatasetError("class_frequencies must be non-negative")
        for i, (inputs, label) in enumerate(self.examples):
            if not 0 <= label < len(self.class_names):
                raise DatasetError(f"example {i}: label {label} out of range")
            if len(inputs) not in (1, 2):
                raise DatasetError(f"example {i}: expected 1 or 2 input fields, got {len(inputs)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_inputs(self) -> int:
        return len(self.examples[0][0]) if self.examples else 1

    def __len__(self) -> int:
        return len(self.examples)

    @classmethod
    def from_examples(
        cls,
        examples: Iterable[tuple[Sequence[str], int]],
        class_names: Sequence[str],
        class_frequencies: Sequence[float] | None = None,
        name: str = "task",
    ) -> "TaskDataset":
        """Build a dataset, deriving empirical frequencies when none are given."""
        exs = tuple((tuple(inputs), int(label)) for inputs, label in examples)
        if class_frequencies is None:
            if not exs:
                raise DatasetError("cannot derive frequencies from an empty dataset")
            counts = [0] * len(class_names)
            for _, label in exs:
                counts[label] += 1
            class_frequencies = tuple(c / len(exs) for c in counts)
        return cls(exs, tuple(class_names), tuple(class_frequencies), name=name)


def load_dataset(path: str | Path) -> TaskDataset:
    """Read a task from a UTF-8 JSONL file.

    The first line is a header record with ``class_names`` (in index order) and
    optionally ``name`` and ``class_frequencies``. Every following line is one
    example with ``text`` (or ``text1``/``text2``) and ``label`` (class index
    or class name).
    """
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: bad header line: {exc}") from exc
    if "class_names" not in header:
        raise DatasetError(f"{path}: header must list class_names")
    class_names = list(header["class_names"])
    name_to_idx = {n: i for i, n in enumerate(class_names)}

    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: bad record: {exc}") from exc
        if "text" in rec:
            inputs = (rec["text"],)
        elif "text1" in rec and "text2" in rec:
            inputs = (rec["text1"], rec["text2"])
        else:
            raise DatasetError(f"{path}:{lineno}: record needs 'text' or 'text1'/'text2'")
        label = rec.get("label")
        if isinstance(label, str):
            if label not in name_to_idx:
                raise DatasetError(f"{path}:{lineno}: unknown label {label!r}")
            label = name_to_idx[label]
        if label is None:
            raise DatasetError(f"{path}:{lineno}: record needs 'label'")
        examples.append((inputs, int(label)))

    return TaskDataset.from_examples(
        examples,
        class_names,
        header.get("class_frequencies"),
        name=header.get("name", path.stem),
    )


def save_dataset(dataset: TaskDataset, path: str | Path) -> None:
    """Write a task in the JSONL format read by :func:`load_dataset`."""
    path = Path(path)
    header = {
        "class_names": list(dataset.class_names),
        "class_frequencies": list(dataset.class_frequencies),
        "name": dataset.name,
    }
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inputs, label in dataset.examples:
            rec = {"text": inputs[0]} if len(inputs) == 1 else {"text1": inputs[0], "text2": inputs[1]}
            rec["label"] = label
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass(frozen=True)
class TemplateSpec:
    """How one example is rendered, split at the label.

    ``query_template`` renders everything up to and including the label cue
    (no trailing whitespace, so it doubles as the classic query rendering);
    the full example rendering is, character-exact,
    ``query_template ⊕ " " ⊕ label ⊕ separator``.
    """

    query_template: str
    label_cue: str = "Answer:"
    separator: str = "\n\n"
    prompt_prefix: str | None = None

    def __post_init__(self):
        if not self.query_template.endswith(self.label_cue):
            raise TemplateError(
                f"query template must end exactly at the label cue {self.label_cue!r}"
            )
        if self.query_template.count(self.label_cue) != 1:
            raise TemplateError("label cue must occur exactly once in the template")
        if self.num_inputs not in (1, 2):
            raise TemplateError(
                f"template must take 1 or 2 inputs, found placeholders "
                f"{_PLACEHOLDER_RE.findall(self.query_template)}"
            )

    @property
    def num_inputs(self) -> int:
        return len(set(_PLACEHOLDER_RE.findall(self.query_template)))

    @property
    def example_template(self) -> str:
        return self.query_template + " {label}" + self.separator

    def render_query(self, inputs: Sequence[str] | str) -> str:
        if isinstance(inputs, str):
            inputs = (inputs,)
        if len(inputs) != self.num_inputs:
            raise TemplateError(
                f"template takes {self.num_inputs} input(s), got {len(inputs)}"
            )
        if self.num_inputs == 1:
            return self.query_template.format(text=inputs[0])
        return self.query_template.format(text1=inputs[0], text2=inputs[1])

    def render_example(self, inputs: Sequence[str] | str, label: str) -> str:
        return self.render_query(inputs) + " " + label + self.separator


def render_example(template: TemplateSpec, inputs: Sequence[str] | str, label_string: str) -> str:
    """Render one in-context example (template ∘ inputs ∘ label)."""
    return template.render_example(inputs, label_string)


SINGLE_SENTENCE = TemplateSpec("Sentence: '{text}'\nAnswer:")
SENTENCE_PAIR = TemplateSpec("Sentence 1: '{text1}'\nSentence 2: '{text2}'\nAnswer:")
QUESTION_PAIR = TemplateSpec("Question 1: '{text1}'\nQuestion 2: '{text2}'\nAnswer:")

TEMPLATES = {
    "single": SINGLE_SENTENCE,
    "sentence_pair": SENTENCE_PAIR,
    "question_pair": QUESTION_PAIR,
}


@dataclass(frozen=True)
class Segment:
    """Character spans of one rendered example inside the assembled text.

    ``[start, label_start)`` is everything before the label (including the
    cue and the single space after it), ``[label_start, label_end)`` is the
    label string itself, and ``[label_end, end)`` is the trailing separator.
    """

    start: int
    label_start: int
    label_end: int
    end: int

    @property
    def pre_label_span(self) -> tuple[int, int]:
        return (self.start, self.label_start)

    @property
    def label_span(self) -> tuple[int, int]:
        return (self.label_start, self.label_end)


@dataclass(frozen=True)
class AssembledInput:
    """A full prompt string with per-example segment bookkeeping."""

    text: str
    segments: tuple[Segment, ...]
    prompt_span: tuple[int, int] | None
    example_order: tuple[int, ...]

    def label_text(self, i: int) -> str:
        seg = self.segments[i]
        return self.text[seg.label_start : seg.label_end]


def assemble(
    dataset: TaskDataset,
    order: Sequence[int],
    labels: Sequence[int],
    template: TemplateSpec,
    prompt: str | None = None,
    class_names: Sequence[str] | None = None,
    allow_repeats: bool = False,
) -> AssembledInput:
    """Concatenate the examples named by ``order`` into one prompt.

    ``labels`` are the displayed class indices per position (possibly
    overridden by a transform) and ``class_names`` the effective names they
    index (defaults to the dataset's). Sampling is without replacement, so
    ``order`` must not repeat indices, except for answer-in-context runs,
    which deliberately repeat the query (``allow_repeats=True``).
    """
    if len(order) == 0:
        raise AssemblyError("cannot assemble an empty example order")
    if not allow_repeats and len(set(order)) != len(order):
        raise AssemblyError("example order contains duplicates")
    if len(labels) != len(order):
        raise AssemblyError(f"{len(labels)} labels for {len(order)} positions")
    names = tuple(class_names) if class_names is not None else dataset.class_names
    if prompt is None:
        prompt = template.prompt_prefix

    parts: list[str] = []
    pos = 0
    prompt_span = None
    if prompt:
        parts.append(prompt)
        prompt_span = (0, len(prompt))
        pos = len(prompt)

    segments: list[Segment] = []
    for idx, lab in zip(order, labels):
        inputs, _ = dataset.examples[idx]
        label_string = names[lab]
        query = template.render_query(inputs)
        rendered = query + " " + label_string + template.separator
        label_start = pos + len(query) + 1
        segments.append(
            Segment(
                start=pos,
                label_start=label_start,
                label_end=label_start + len(label_string),
                end=pos + len(rendered),
            )
        )
        parts.append(rendered)
        pos += len(rendered)

    return AssembledInput(
        text="".join(parts),
        segments=tuple(segments),
        prompt_span=prompt_span,
        example_order=tuple(order),
    )


def _mapping_sentence(pairs: list[tuple[str, str]]) -> str:
    clauses = [f"{old} means {new}" for old, new in pairs]
    if len(clauses) == 2:
        return " and ".join(clauses)
    return ", ".join(clauses[:-1]) + " and " + clauses[-1]


def build_prompt(kind: str, class_names: Sequence[str]) -> str:
    """One of the three stock instruction prompts, with the task's own label
    names substituted into the 'instruct' variant."""
    if kind == "instruct":
        rotated = list(class_names[1:]) + [class_names[0]]
        body = _mapping_sentence(list(zip(class_names, rotated)))
    elif kind == "ignore":
        body = "ignore all prior knowledge"
    elif kind == "invert":
        body = "flip the meaning for all answers"
    else:
        raise TemplateError(f"unknown prompt kind {kind!r}; expected instruct/ignore/invert")
    return f"In the following, {body}. "


PROMPT_KINDS = ("instruct", "ignore", "invert")
