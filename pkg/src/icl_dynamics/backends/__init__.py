"""Model-access contract and its implementations.

A backend exposes tokenization and teacher-forced log-probabilities under
the full-vocabulary softmax. ``logprobs(tokens, positions, token_ids)``
returns a (len(positions), len(token_ids)) matrix of natural-log values
where row i is the next-token distribution at ``positions[i]``, i.e. it
conditions on ``tokens[:positions[i]]`` only (prefix purity). Position
``len(tokens)`` is valid and denotes the generation slot after the input.
"""

from typing import Protocol, Sequence, runtime_checkable

import numpy as np


@runtime_checkable
class Backend(Protocol):
    vocab_size: int
    token_limit: int

    def tokenize(self, text: str) -> list[int]: ...

    def detokenize(self, token_ids: Sequence[int]) -> str: ...

    def logprobs(
        self,
        tokens: Sequence[int],
        positions: Sequence[int],
        token_ids: Sequence[int],
    ) -> np.ndarray: ...


from .reference import (  # noqa: E402
    BayesianMappingLM,
    EchoLM,
    ReferenceTokenizer,
    bayes_predict,
    marker_feature,
)
from .remote import RemoteBackend, RemoteConfig  # noqa: E402

__all__ = [
    "Backend",
    "BayesianMappingLM",
    "EchoLM",
    "ReferenceTokenizer",
    "RemoteBackend",
    "RemoteConfig",
    "bayes_predict",
    "marker_feature",
]
