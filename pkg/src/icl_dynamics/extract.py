"""Label-prediction curves from a single teacher-forced pass.

One forward pass over an N-example prompt yields the next-token distribution
at every label position, i.e. the model's prediction for example i given the
first i-1 examples *as observed* (conditioned on the displayed labels, never
on its own outputs). Restricting each distribution to the classes' first
label tokens and renormalizing turns those N positions into the full
learning curve at context sizes 0..N-1 for the price of one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateDistributionError
from .tokenalign import LabelPositionIndex, LabelTokenMap
from .verbalize import AssembledInput, TemplateSpec

LOG_FLOOR = -80.0


@dataclass(frozen=True)
class PositionDistributions:
    """Log-probabilities of the label tokens at each requested position.

    ``logprobs[i, c]`` is the full-softmax natural-log probability of class
    c's first token at position ``positions[i]``.
    """

    logprobs: np.ndarray
    positions: tuple[int, ...]
    token_ids: tuple[int, ...]

    def __post_init__(self):
        m = np.asarray(self.logprobs, dtype=float)
        if m.shape != (len(self.positions), len(self.token_ids)):
            raise ValueError(f"logprobs shape {m.shape} does not match positions x token_ids")
        if m.size and np.nanmax(m) > 1e-9:
            raise ValueError("log-probabilities must be <= 0")
        object.__setattr__(self, "logprobs", m)

    def __len__(self) -> int:
        return len(self.positions)


def gather_label_distributions(
    backend, tokens: Sequence[int], index: LabelPositionIndex, label_map: LabelTokenMap
) -> PositionDistributions:
    """The one scoring call of a run: all label positions, all label tokens."""
    matrix = backend.logprobs(list(tokens), list(index.positions), list(label_map.first_token_ids))
    return PositionDistributions(
        logprobs=np.asarray(matrix, dtype=float),
        positions=tuple(index.positions),
        token_ids=tuple(label_map.first_token_ids),
    )


@dataclass(frozen=True)
class DynamicsCurve:
    """Per-context-size class predictions for one run.

    Row i is the renormalized class distribution predicted for example i+1
    after i in-context examples; ``displayed_labels[i]`` is the target it is
    scored against (the label shown in the prompt, i.e. the active
    transform's relation). ``raw_probs`` keeps the unrenormalized label-token
    probabilities, and ``joint_loglik`` the sum of log target probabilities
    (the run-level joint, reported but not interpreted).
    """

    probs: np.ndarray
    raw_probs: np.ndarray
    displayed_labels: tuple[int, ...]
    floored_positions: tuple[int, ...]
    joint_loglik: float

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def renormalize(raw: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Restrict-and-renormalize with the underflow floor.

    Probabilities below exp(LOG_FLOOR) are floored before renormalizing so a
    single vanished class cannot produce 0/0; rows where *every* class
    vanished are reported as degenerate by the caller.
    """
    floored_rows = [int(i) for i in np.flatnonzero((raw < math.exp(LOG_FLOOR)).any(axis=1))]
    clipped = np.maximum(raw, math.exp(LOG_FLOOR))
    return clipped / clipped.sum(axis=1, keepdims=True), floored_rows


def extract_curve(
    dists: PositionDistributions,
    index: LabelPositionIndex,
    label_map: LabelTokenMap,
    displayed_labels: Sequence[int],
) -> DynamicsCurve:
    """Turn per-position label-token log-probs into the learning curve."""
    n = len(dists)
    if len(index) != n or len(displayed_labels) != n:
        raise ValueError(
            f"positions ({len(index)}), distributions ({n}) and labels "
            f"({len(displayed_labels)}) must align"
        )
    raw = np.exp(dists.logprobs)
    dead = np.flatnonzero((dists.logprobs < LOG_FLOOR).all(axis=1))
    if dead.size:
        pos = int(dead[0])
        raise DegenerateDistributionError(
            f"all label tokens have ~zero probability at token position "
            f"{index.positions[pos]} (curve point {pos}); the prompt is "
            f"probably misindexed",
            position=index.positions[pos],
        )
    probs, floored = renormalize(raw)
    targets = np.asarray(displayed_labels, dtype=int)
    joint = float(np.log(probs[np.arange(n), targets]).sum())
    return DynamicsCurve(
        probs=probs,
        raw_probs=raw,
        displayed_labels=tuple(int(t) for t in targets),
        floored_positions=tuple(floored),
        joint_loglik=joint,
    )


def classic_query_predict(
    context: AssembledInput | None,
    query_inputs: Sequence[str] | str,
    backend,
    template: TemplateSpec,
    label_map: LabelTokenMap,
) -> np.ndarray:
    """One query prediction the conventional way: context + query rendering.

    The query is rendered without its label and with no trailing whitespace
    (a trailing space would tokenize into an extra token that never occurs
    before in-context labels, silently shifting the prediction). An empty
    context gives the zero-shot prediction.
    """
    text = (context.text if context is not None else "") + template.render_query(query_inputs)
    tokens = backend.tokenize(text)
    matrix = np.asarray(
        backend.logprobs(tokens, [len(tokens)], list(label_map.first_token_ids)), dtype=float
    )
    raw = np.exp(matrix)
    if (matrix < LOG_FLOOR).all():
        raise DegenerateDistributionError(
            "all label tokens have ~zero probability at the query position",
            position=len(tokens),
        )
    probs, _ = renormalize(raw.reshape(1, -1))
    return probs[0]
