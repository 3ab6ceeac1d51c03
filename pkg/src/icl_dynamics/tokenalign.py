"""Resolve class names to in-context tokens and locate label positions.

Whitespace handling is the whole point here: common subword vocabularies
merge a preceding space into the label token, so the id of a label tokenized
on its own ("naked") is generally NOT the id that appears in the prompt.
Both resolution and indexing therefore work through the cue: the label's
first token is whatever follows the tokenized cue, and a label's position is
the token length of the text prefix that ends exactly at its cue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import LabelCollisionError, MisalignmentError, TokenAlignmentError
from .verbalize import AssembledInput, TemplateSpec


class SupportsTokenize(Protocol):
    def tokenize(self, text: str) -> list[int]: ...


@dataclass(frozen=True)
class LabelTokenMap:
    """Per-class token ids as they appear in context.

    ``first_token_ids[c]`` is the scored token for class ``c``;
    ``token_sequences[c]`` is the full in-context id sequence (first token
    plus continuations for multi-token labels). ``naked_token_ids`` records
    how each name tokenizes without a preceding space: diagnostic only,
    never used for scoring.
    """

    class_names: tuple[str, ...]
    first_token_ids: tuple[int, ...]
    token_sequences: tuple[tuple[int, ...], ...]
    naked_token_ids: tuple[tuple[int, ...], ...]

    @property
    def num_classes(self) -> int:
        return len(self.first_token_ids)


def resolve_label_tokens(
    tokenizer: SupportsTokenize,
    template: TemplateSpec,
    class_names: Sequence[str],
) -> LabelTokenMap:
    """Find each class's first in-context token via the label cue.

    For class ``c`` the prompt contains ``cue + " " + name_c``, so the scored
    token is ``tokenize(cue + " " + name_c)[P]`` with ``P = len(tokenize(cue))``.
    Raises if the tokenizer rewrites the cue when the label follows (prefix
    instability) or if two classes share a first token.
    """
    cue = template.label_cue
    cue_ids = list(tokenizer.tokenize(cue))
    first_ids: list[int] = []
    sequences: list[tuple[int, ...]] = []
    naked: list[tuple[int, ...]] = []
    for name in class_names:
        full = list(tokenizer.tokenize(cue + " " + name))
        if full[: len(cue_ids)] != cue_ids:
            raise TokenAlignmentError(
                f"tokenizer is not prefix-stable at the cue for label {name!r}: "
                f"{full[: len(cue_ids)]} != {cue_ids}"
            )
        tail = full[len(cue_ids) :]
        if not tail:
            raise TokenAlignmentError(f"label {name!r} contributes no token after the cue")
        first_ids.append(tail[0])
        sequences.append(tuple(tail))
        naked.append(tuple(tokenizer.tokenize(name)))

    seen: dict[int, str] = {}
    for name, tid in zip(class_names, first_ids):
        if tid in seen:
            raise LabelCollisionError(
                f"classes {seen[tid]!r} and {name!r} share first token {tid}; "
                "label predictions would be indistinguishable"
            )
        seen[tid] = name

    return LabelTokenMap(
        class_names=tuple(class_names),
        first_token_ids=tuple(first_ids),
        token_sequences=tuple(sequences),
        naked_token_ids=tuple(naked),
    )


@dataclass(frozen=True)
class LabelPositionIndex:
    """Token indices of each example's first label token, in prompt order."""

    positions: tuple[int, ...]
    expected_token_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.positions)


def index_label_positions(
    full_tokens: Sequence[int],
    assembled: AssembledInput,
    tokenizer: SupportsTokenize,
    label_map: LabelTokenMap,
    displayed_labels: Sequence[int],
) -> LabelPositionIndex:
    """Map every label's character span to its token position.

    Position i is the token length of the text up to and including example
    i's cue (the space before the label is excluded; it merges into the
    label token on space-merging vocabularies). Each prefix tokenization is
    checked against ``full_tokens`` and the token found at the position must
    be the expected class token; any mismatch aborts loudly.
    """
    full = list(full_tokens)
    if len(displayed_labels) != len(assembled.segments):
        raise MisalignmentError(
            f"{len(displayed_labels)} displayed labels for "
            f"{len(assembled.segments)} segments"
        )
    positions: list[int] = []
    expected: list[int] = []
    for i, seg in enumerate(assembled.segments):
        # label_start - 1 drops the single space between cue and label
        prefix = assembled.text[: seg.label_start - 1]
        prefix_ids = list(tokenizer.tokenize(prefix))
        pos = len(prefix_ids)
        if full[:pos] != prefix_ids:
            raise MisalignmentError(
                f"example {i}: tokenization of the prompt prefix is not a "
                f"prefix of the full token sequence",
                example_index=i,
            )
        if pos >= len(full):
            raise MisalignmentError(
                f"example {i}: label position {pos} beyond sequence length {len(full)}",
                example_index=i,
            )
        want = label_map.first_token_ids[displayed_labels[i]]
        got = full[pos]
        if got != want:
            raise MisalignmentError(
                f"example {i}: token {got} at position {pos}, expected label "
                f"token {want} ({label_map.class_names[displayed_labels[i]]!r})",
                example_index=i,
            )
        if positions and pos <= positions[-1]:
            raise MisalignmentError(
                f"example {i}: positions not strictly increasing", example_index=i
            )
        positions.append(pos)
        expected.append(want)
    return LabelPositionIndex(positions=tuple(positions), expected_token_ids=tuple(expected))


def continuation_confidence(
    backend,
    full_tokens: Sequence[int],
    index: LabelPositionIndex,
    label_map: LabelTokenMap,
    displayed_labels: Sequence[int],
) -> list[list[float]]:
    """Probability of each continuation token of multi-token labels.

    Report-only diagnostic: for every occurrence of a label encoded as more
    than one token, queries the backend for the probability of each
    continuation token given everything before it. Returns one (possibly
    empty) list per example.
    """
    positions: list[int] = []
    token_ids: list[int] = []
    owners: list[tuple[int, int]] = []
    for i, pos in enumerate(index.positions):
        seq = label_map.token_sequences[displayed_labels[i]]
        for j, tid in enumerate(seq[1:], start=1):
            positions.append(pos + j)
            token_ids.append(tid)
            owners.append((i, j - 1))

    out: list[list[float]] = [[] for _ in index.positions]
    if not positions:
        return out
    unique_ids = sorted(set(token_ids))
    col = {tid: k for k, tid in enumerate(unique_ids)}
    logprobs = backend.logprobs(list(full_tokens), positions, unique_ids)
    for row, ((i, _), tid) in enumerate(zip(owners, token_ids)):
        out[i].append(float(np.exp(logprobs[row][col[tid]])))
    return out
