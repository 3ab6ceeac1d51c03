"""Builds a tiny random-weight causal LM with a locally trained byte-level
BPE tokenizer: no downloads, a few hundred K parameters, CPU-fast. The BPE
is trained on rendered prompt strings so label words become space-merged
single tokens, which is exactly the boundary behavior the toolkit must
handle on production vocabularies.
"""

from __future__ import annotations

import pytest
import torch
from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from hf_adapter import AdapterConfig, CausalLMScorer, create_app

ADJECTIVES = {"negative": "awful", "positive": "great"}
TOPICS = ["film", "plot", "acting", "cast", "score", "pacing", "ending", "dialog",
          "style", "tone", "lead", "humor"]


def dataset_rows():
    rows = []
    for topic in TOPICS:
        for label, (name, adj) in enumerate(ADJECTIVES.items()):
            rows.append(((f"the {topic} was {adj}",), label))
    return rows


def rendered_corpus():
    corpus = []
    for (text,), label in dataset_rows():
        name = list(ADJECTIVES)[label]
        corpus.extend([f"Sentence: '{text}'\nAnswer: {name}\n\n"] * 20)
    corpus.extend(["Sentence: 'N/A'\nAnswer:"] * 20)
    return corpus


def build_tiny_model(dir_path, with_bos: bool = False) -> str:
    torch.manual_seed(1234)
    tok = Tokenizer(models.BPE(unk_token=None))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    specials = ["<s>"] if with_bos else []
    trainer = trainers.BpeTrainer(
        vocab_size=640,
        special_tokens=specials,
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
    )
    tok.train_from_iterator(rendered_corpus(), trainer)
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tok, bos_token="<s>" if with_bos else None
    )
    config = GPT2Config(
        vocab_size=tok.get_vocab_size(),
        n_positions=512,
        n_embd=64,
        n_layer=2,
        n_head=2,
        bos_token_id=fast.bos_token_id if with_bos else None,
        eos_token_id=None,
    )
    model = GPT2LMHeadModel(config)
    model.save_pretrained(dir_path)
    fast.save_pretrained(dir_path)
    return str(dir_path)


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory) -> str:
    return build_tiny_model(tmp_path_factory.mktemp("tiny-lm"))


@pytest.fixture(scope="session")
def bos_model_dir(tmp_path_factory) -> str:
    return build_tiny_model(tmp_path_factory.mktemp("tiny-lm-bos"), with_bos=True)


@pytest.fixture(scope="session")
def scorer(model_dir) -> CausalLMScorer:
    return CausalLMScorer(AdapterConfig(model=model_dir, token_limit=512))


@pytest.fixture(scope="session")
def app(scorer):
    return create_app(scorer)
