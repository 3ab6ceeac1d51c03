"""Deterministic reference backends used as test oracles.

``ReferenceTokenizer`` is a word-level tokenizer over a closed vocabulary
whose "merge" mode reproduces the boundary behavior of subword vocabularies:
a space followed by a known word becomes a single space-prefixed token with
its own id, a trailing space stays a standalone token, and the bare word has
a different id. That is exactly the trap that makes naive label-token lookup
wrong on real models.

``EchoLM`` emits a fixed class distribution at every label slot (set it to
the class frequencies and it *is* the guessing baseline). ``BayesianMappingLM``
does exact posterior inference over a latent label mapping: an idealized
learner with a closed-form predictive, which makes every curve it produces
checkable by hand.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Sequence

import numpy as np

from ..errors import PermanentBackendError
from ..verbalize import TemplateSpec

NEG_INF = float("-inf")

_TOKEN_PIECES = re.compile(r"[A-Za-z0-9_]+|[^A-Za-z0-9_]", re.DOTALL)

_MODES = ("merge", "merge_shared", "plain", "cue_merge")


class ReferenceTokenizer:
    """Closed-vocabulary word tokenizer with configurable boundary behavior.

    modes:
      merge        - " word" is one token, id distinct from bare "word"
                     (Falcon-style: the naked id never appears in context)
      merge_shared - " word" merges but shares the bare word's id
                     (LLaMa-style: naked and in-context ids coincide)
      plain        - every word/space/punctuation piece is its own token
      cue_merge    - adversarial: ": word" collapses into one token, breaking
                     prefix stability at the cue/label boundary

    ``pinned_ids`` lets tests fix specific piece ids (e.g. to mirror a real
    vocabulary's numbers).
    """

    def __init__(
        self,
        words: Sequence[str],
        mode: str = "merge",
        pinned_ids: dict[str, int] | None = None,
    ):
        if mode not in _MODES:
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        pieces: list[str] = ["<unk>", " ", "\n", "\t"]
        for ch in ":'\",.!?;()-":
            pieces.append(ch)
        for w in words:
            if not _TOKEN_PIECES.fullmatch(w) or not w[0].isalnum():
                raise ValueError(f"vocabulary words must be plain words, got {w!r}")
            pieces.append(w)
            if mode in ("merge", "cue_merge"):
                pieces.append(" " + w)
            if mode == "cue_merge":
                pieces.append(": " + w)

        pinned = dict(pinned_ids or {})
        used = set(pinned.values())
        if len(used) != len(pinned):
            raise ValueError("pinned ids must be distinct")
        self._id_of: dict[str, int] = {}
        next_id = 0
        for piece in pieces:
            if piece in self._id_of:
                continue
            if piece in pinned:
                self._id_of[piece] = pinned[piece]
                continue
            while next_id in used:
                next_id += 1
            self._id_of[piece] = next_id
            used.add(next_id)
            next_id += 1
        for piece, pid in pinned.items():
            if piece not in self._id_of:
                self._id_of[piece] = pid
        self._piece_of = {i: p for p, i in self._id_of.items()}
        self.unk_id = self._id_of["<unk>"]
        self.vocab_size = max(self._id_of.values()) + 1

    def _merge(self, raw: list[str]) -> list[str]:
        out: list[str] = []
        i = 0
        while i < len(raw):
            if (
                self.mode == "cue_merge"
                and raw[i] == ":"
                and i + 2 < len(raw)
                and raw[i + 1] == " "
                and (": " + raw[i + 2]) in self._id_of
            ):
                out.append(": " + raw[i + 2])
                i += 3
                continue
            if (
                self.mode in ("merge", "merge_shared", "cue_merge")
                and raw[i] == " "
                and i + 1 < len(raw)
                and raw[i + 1][0].isalnum()
            ):
                out.append(" " + raw[i + 1])
                i += 2
                continue
            out.append(raw[i])
            i += 1
        return out

    def pieces(self, text: str) -> list[str]:
        return self._merge(_TOKEN_PIECES.findall(text))

    def _piece_id(self, piece: str) -> int:
        if piece in self._id_of:
            return self._id_of[piece]
        if self.mode == "merge_shared" and piece.startswith(" ") and piece[1:] in self._id_of:
            return self._id_of[piece[1:]]
        return self.unk_id

    def tokenize(self, text: str) -> list[int]:
        return [self._piece_id(p) for p in self.pieces(text)]

    def piece_to_id(self, piece: str) -> int:
        tid = self._piece_id(piece)
        if tid == self.unk_id and piece != "<unk>":
            raise KeyError(piece)
        return tid

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return "".join(self._piece_of.get(int(t), "<unk>") for t in token_ids)


def marker_feature(markers: Sequence[str]) -> Callable[[str], int]:
    """Latent-class rule: the class whose marker word occurs in the segment.

    Markers are matched as whole words; the last class whose marker appears
    wins, and a segment without any marker is class 0.
    """
    patterns = [re.compile(rf"\b{re.escape(m)}\b") for m in markers]

    def feature(segment_text: str) -> int:
        latent = 0
        for c, pat in enumerate(patterns):
            if pat.search(segment_text):
                latent = c
        return latent

    return feature


def bayes_predict(
    pairs: Sequence[tuple[int, int]],
    query_feature: int,
    prior_identity: float = 0.5,
    noise: float = 0.1,
) -> np.ndarray:
    """Exact binary predictive over a latent identity/flip label mapping.

    Each observed pair is (latent class, displayed label); a pair is
    consistent with the identity hypothesis iff the two agree. Returns the
    predictive distribution over the *displayed* label of a query with the
    given latent class:

        P(identity | D) ∝ prior · ∏ [(1-noise) if consistent else noise]
        P(y = z | D)    = P(identity | D)·(1-noise) + P(flip | D)·noise
    """
    w_id = prior_identity
    w_fl = 1.0 - prior_identity
    for latent, displayed in pairs:
        if displayed == latent:
            w_id *= 1.0 - noise
            w_fl *= noise
        else:
            w_id *= noise
            w_fl *= 1.0 - noise
    q = w_id / (w_id + w_fl)
    p_match = q * (1.0 - noise) + (1.0 - q) * noise
    out = np.empty(2)
    out[query_feature] = p_match
    out[1 - query_feature] = 1.0 - p_match
    return out


class _ParsedExample:
    __slots__ = ("segment_start", "cue_end", "label_start", "label_end", "label_class", "alphabet")

    def __init__(self, segment_start, cue_end, label_start, label_end, label_class, alphabet):
        self.segment_start = segment_start
        self.cue_end = cue_end
        self.label_start = label_start
        self.label_end = label_end
        self.label_class = label_class
        self.alphabet = alphabet


class _TemplateLM:
    """Shared plumbing for the reference language models.

    Parses a token sequence into (input segment, label) blocks using the
    template's cue, then answers position-wise next-token queries:

      * label slot (prefix ends with the cue): subclass predictive over the
        classes' first label tokens;
      * inside a multi-token label, or inside the separator right after a
        completed label: the structurally forced next token, probability 1;
      * anywhere else: uniform over the content vocabulary.

    ``alias_class_names`` registers additional label alphabets (replacement
    names such as A/B) that the model recognizes alongside the primary names;
    at a label slot the predictive mass is split evenly across alphabets, so
    restrict-and-renormalize over any single alphabet recovers the predictive
    exactly. Everything is computed from the tokens before the queried
    position, so the models are prefix-pure by construction.
    """

    def __init__(
        self,
        tokenizer: ReferenceTokenizer,
        template: TemplateSpec,
        class_names: Sequence[str],
        content_words: Sequence[str],
        token_limit: int = 4096,
        alias_class_names: Sequence[Sequence[str]] = (),
    ):
        self.tokenizer = tokenizer
        self.template = template
        self.class_names = tuple(class_names)
        self.token_limit = int(token_limit)
        self.vocab_size = tokenizer.vocab_size
        self._cue_ids = tuple(tokenizer.tokenize(template.label_cue))
        self._sep_ids = tuple(tokenizer.tokenize(template.separator))

        self.class_name_sets: list[tuple[str, ...]] = [tuple(class_names)]
        for alias in alias_class_names:
            alias = tuple(alias)
            if len(alias) != len(self.class_names):
                raise ValueError(f"alias {alias} does not match the class count")
            # A/B and B/A are the same vocabulary; the mapping is what the
            # learner infers, so only genuinely new name sets register
            if any(frozenset(alias) == frozenset(s) for s in self.class_name_sets):
                continue
            self.class_name_sets.append(alias)

        # in-context label sequence per (alphabet, class): what follows the cue
        self._label_seqs: list[list[tuple[int, ...]]] = []
        self._first_lookup: dict[int, tuple[int, int]] = {}
        for a, names in enumerate(self.class_name_sets):
            seqs = []
            for c, name in enumerate(names):
                full = tokenizer.tokenize(template.label_cue + " " + name)
                seq = tuple(full[len(self._cue_ids) :])
                if seq[0] in self._first_lookup:
                    raise ValueError(
                        f"label {name!r} shares its first token with another label"
                    )
                self._first_lookup[seq[0]] = (a, c)
                seqs.append(seq)
            self._label_seqs.append(seqs)

        self._content_ids = tuple(
            sorted({tokenizer.piece_to_id(w) for w in content_words})
        )
        if not self._content_ids:
            raise ValueError("content vocabulary must not be empty")

    # -- structure -----------------------------------------------------------

    def _parse(self, tokens: Sequence[int]) -> list[_ParsedExample]:
        toks = list(tokens)
        cue = list(self._cue_ids)
        p = len(cue)
        out: list[_ParsedExample] = []
        seg_start = 0
        i = 0
        while i + p <= len(toks):
            if toks[i : i + p] != cue:
                i += 1
                continue
            cue_end = i + p
            hit = self._first_lookup.get(toks[cue_end]) if cue_end < len(toks) else None
            if hit is None:
                out.append(_ParsedExample(seg_start, cue_end, cue_end, None, None, None))
                break
            alphabet, cls = hit
            seq = self._label_seqs[alphabet][cls]
            label_end = cue_end + len(seq)
            if tuple(toks[cue_end:label_end]) != seq:
                # first token matched but the continuation is cut off or foreign
                label_end = min(label_end, len(toks))
            out.append(_ParsedExample(seg_start, cue_end, cue_end, label_end, cls, alphabet))
            seg_start = label_end + len(self._sep_ids)
            i = seg_start
        return out

    def _completed_pairs(self, tokens, parsed, position, alphabet=None):
        pairs = []
        for ex in parsed:
            if ex.label_class is None or ex.label_end is None or ex.label_end > position:
                break
            if alphabet is not None and ex.alphabet != alphabet:
                continue
            segment_text = self.tokenizer.detokenize(self._segment_tokens(tokens, ex))
            pairs.append((self._feature(segment_text), ex.label_class))
        return pairs

    def _segment_tokens(self, tokens, ex: _ParsedExample):
        # the rendered input part, without the trailing cue
        return tokens[ex.segment_start : ex.cue_end - len(self._cue_ids)]

    def _feature(self, segment_text: str) -> int:
        raise NotImplementedError

    def _label_slot_probs(self, tokens, parsed, position, alphabet) -> np.ndarray:
        raise NotImplementedError

    # -- next-token distribution ---------------------------------------------

    def _distribution(self, tokens: list[int], parsed, position: int) -> dict[int, float]:
        """Sparse next-token distribution at ``position`` given the prefix."""
        cue = list(self._cue_ids)
        p = len(cue)
        if position >= p and tokens[position - p : position] == cue:
            weight = 1.0 / len(self.class_name_sets)
            out: dict[int, float] = {}
            for a, seqs in enumerate(self._label_seqs):
                probs = self._label_slot_probs(tokens, parsed, position, a)
                for c, seq in enumerate(seqs):
                    out[seq[0]] = float(probs[c]) * weight
            return out

        for ex in parsed:
            if ex.label_class is None:
                break
            seq = self._label_seqs[ex.alphabet][ex.label_class]
            if ex.label_start < position < ex.label_start + len(seq):
                # multi-token label: the continuation is structurally forced
                return {seq[position - ex.label_start]: 1.0}
            sep_pos = position - (ex.label_start + len(seq))
            if 0 <= sep_pos < len(self._sep_ids):
                return {self._sep_ids[sep_pos]: 1.0}

        u = 1.0 / len(self._content_ids)
        return {tid: u for tid in self._content_ids}

    def logprobs(
        self,
        tokens: Sequence[int],
        positions: Sequence[int],
        token_ids: Sequence[int],
    ) -> np.ndarray:
        toks = list(tokens)
        if len(toks) > self.token_limit:
            raise PermanentBackendError(
                f"input of {len(toks)} tokens exceeds the limit {self.token_limit}"
            )
        for pos in positions:
            if not 0 <= pos <= len(toks):
                raise PermanentBackendError(
                    f"position {pos} out of range for {len(toks)} tokens"
                )
        parsed = self._parse(toks)
        out = np.full((len(positions), len(token_ids)), NEG_INF)
        for r, pos in enumerate(positions):
            dist = self._distribution(toks, parsed, int(pos))
            for k, tid in enumerate(token_ids):
                prob = dist.get(int(tid), 0.0)
                out[r, k] = math.log(prob) if prob > 0.0 else NEG_INF
        return out

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.tokenize(text)

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return self.tokenizer.detokenize(token_ids)


class EchoLM(_TemplateLM):
    """Emits a fixed class distribution at every label slot.

    With ``emit_probs`` equal to the task's class frequencies this is the
    informed guessing baseline as a backend. Template tokens around labels
    get probability 1, so indexing mistakes surface as degenerate
    distributions instead of quietly plausible numbers.
    """

    def __init__(
        self,
        tokenizer: ReferenceTokenizer,
        template: TemplateSpec,
        class_names: Sequence[str],
        emit_probs: Sequence[float],
        content_words: Sequence[str],
        token_limit: int = 4096,
        alias_class_names: Sequence[Sequence[str]] = (),
    ):
        super().__init__(
            tokenizer, template, class_names, content_words, token_limit,
            alias_class_names=alias_class_names,
        )
        probs = np.asarray(emit_probs, dtype=float)
        if probs.shape != (len(self.class_names),) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("emit_probs must be a distribution over the classes")
        self._emit = probs

    def _feature(self, segment_text: str) -> int:
        return 0

    def _label_slot_probs(self, tokens, parsed, position, alphabet) -> np.ndarray:
        return self._emit


class BayesianMappingLM(_TemplateLM):
    """Exact Bayesian learner over a latent identity/flip label mapping.

    Binary tasks only. Each in-context example's latent class is read off
    the text by ``feature_fn``; the posterior over {identity, flip} then
    yields a closed-form predictive at every label slot. On consistent
    labels the predictive sharpens toward 1 - noise; on randomized labels it
    hovers near chance, which is what makes this backend a useful oracle
    for the label-manipulation protocols.

    ``prior_identity`` is the built-in preference for the primary label
    names; replacement alphabets (``alias_class_names``) carry no acquired
    preference and start from a neutral 0.5 prior, each with its own
    posterior updated only by in-context examples shown under that alphabet.
    """

    def __init__(
        self,
        tokenizer: ReferenceTokenizer,
        template: TemplateSpec,
        class_names: Sequence[str],
        feature_fn: Callable[[str], int],
        prior_identity: float = 0.5,
        noise: float = 0.1,
        content_words: Sequence[str] = (),
        token_limit: int = 4096,
        alias_class_names: Sequence[Sequence[str]] = (),
    ):
        if len(class_names) != 2:
            raise ValueError("BayesianMappingLM models binary tasks")
        if not 0.0 < prior_identity < 1.0:
            raise ValueError("prior_identity must be in (0, 1)")
        if not 0.0 < noise < 0.5:
            raise ValueError("noise must be in (0, 0.5)")
        super().__init__(
            tokenizer, template, class_names, content_words, token_limit,
            alias_class_names=alias_class_names,
        )
        self.prior_identity = float(prior_identity)
        self.noise = float(noise)
        self.feature_fn = feature_fn

    def _feature(self, segment_text: str) -> int:
        return int(self.feature_fn(segment_text))

    def _label_slot_probs(self, tokens, parsed, position, alphabet) -> np.ndarray:
        pairs = self._completed_pairs(tokens, parsed, position, alphabet=alphabet)
        query = None
        for ex in parsed:
            if ex.cue_end == position:
                query = self._feature(
                    self.tokenizer.detokenize(self._segment_tokens(tokens, ex))
                )
                break
        if query is None:
            # cue-shaped prefix the parser did not cover; treat as class 0 input
            query = 0
        prior = self.prior_identity if alphabet == 0 else 0.5
        return bayes_predict(pairs, query, prior, self.noise)
