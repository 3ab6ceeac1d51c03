"""Shared fixtures: synthetic tasks and reference backends.

The sentiment task is a balanced binary dataset whose latent class is
carried by a marker word ("awful"/"great"), so the Bayesian reference
backend has a deterministic feature rule and every prediction it makes is
checkable against closed-form posteriors.
"""

from __future__ import annotations

import numpy as np
import pytest

from icl_dynamics import TEMPLATES, TaskDataset, assemble
from icl_dynamics.backends import (
    BayesianMappingLM,
    EchoLM,
    ReferenceTokenizer,
    marker_feature,
)
from icl_dynamics.extract import extract_curve, gather_label_distributions
from icl_dynamics.runner import collect_words, content_words
from icl_dynamics.tokenalign import index_label_positions, resolve_label_tokens

TOPICS = [
    "film", "plot", "acting", "score", "cast", "pacing", "dialog", "ending",
    "style", "tone", "rhythm", "visuals", "theme", "edit", "sound", "set",
    "story", "lead", "humor", "finale", "montage", "angle", "color", "frame",
]


def make_sentiment_dataset(n_per_class: int = 24) -> TaskDataset:
    topics = [TOPICS[i % len(TOPICS)] + ("" if i < len(TOPICS) else str(i)) for i in range(n_per_class)]
    rows = []
    for w in topics:
        rows.append(((f"the {w} was awful",), 0))
        rows.append(((f"the {w} was great",), 1))
    return TaskDataset.from_examples(rows, ("negative", "positive"), name="toy-sentiment")


@pytest.fixture(scope="session")
def sentiment_dataset() -> TaskDataset:
    return make_sentiment_dataset()


@pytest.fixture(scope="session")
def single_template():
    return TEMPLATES["single"]


@pytest.fixture(scope="session")
def sentiment_tokenizer(sentiment_dataset, single_template):
    return ReferenceTokenizer(collect_words(sentiment_dataset, single_template, extra=["N/A"]))


def make_bayesian_lm(dataset, template, tokenizer, prior=0.5, noise=0.1, token_limit=4096):
    return BayesianMappingLM(
        tokenizer,
        template,
        dataset.class_names,
        marker_feature(["awful", "great"]),
        prior_identity=prior,
        noise=noise,
        content_words=content_words(dataset),
        token_limit=token_limit,
    )


def make_echo_lm(dataset, template, tokenizer, emit_probs=None, token_limit=4096):
    return EchoLM(
        tokenizer,
        template,
        dataset.class_names,
        emit_probs if emit_probs is not None else dataset.class_frequencies,
        content_words(dataset),
        token_limit=token_limit,
    )


@pytest.fixture()
def bayes_lm(sentiment_dataset, single_template, sentiment_tokenizer):
    return make_bayesian_lm(sentiment_dataset, single_template, sentiment_tokenizer)


@pytest.fixture()
def echo_lm(sentiment_dataset, single_template, sentiment_tokenizer):
    return make_echo_lm(sentiment_dataset, single_template, sentiment_tokenizer)


def run_single_pass(dataset, template, backend, order, displayed_labels, class_names=None, prompt=None):
    """Assemble -> tokenize -> index -> one logprobs call -> curve."""
    assembled = assemble(
        dataset, order, displayed_labels, template, prompt=prompt, class_names=class_names
    )
    label_map = resolve_label_tokens(
        backend, template, class_names if class_names is not None else dataset.class_names
    )
    tokens = backend.tokenize(assembled.text)
    index = index_label_positions(tokens, assembled, backend, label_map, displayed_labels)
    dists = gather_label_distributions(backend, tokens, index, label_map)
    curve = extract_curve(dists, index, label_map, displayed_labels)
    return assembled, label_map, tokens, index, curve


def posterior_identity(n_consistent: int, n_inconsistent: int, prior: float, noise: float) -> float:
    w_id = prior * (1 - noise) ** n_consistent * noise**n_inconsistent
    w_fl = (1 - prior) * noise**n_consistent * (1 - noise) ** n_inconsistent
    return w_id / (w_id + w_fl)


def predictive_match(n_consistent: int, n_inconsistent: int, prior: float, noise: float) -> float:
    """Closed-form probability that the next displayed label equals the latent class."""
    q = posterior_identity(n_consistent, n_inconsistent, prior, noise)
    return q * (1 - noise) + (1 - q) * noise


def balanced_order(dataset: TaskDataset, n: int, rng: np.random.Generator | None = None) -> list[int]:
    """n example indices alternating class 0 / class 1."""
    by_class = {0: [], 1: []}
    for i, (_, label) in enumerate(dataset.examples):
        by_class[label].append(i)
    order = []
    for j in range(n):
        order.append(by_class[j % 2][j // 2])
    return order
