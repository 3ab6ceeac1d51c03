"""Expose a locally loadable causal LM over the evaluation wire protocol.

    POST /v1/tokenize    {"text": ...}                      -> {"tokens": [...]}
    POST /v1/detokenize  {"tokens": [...]}                  -> {"text": ...}
    POST /v1/logprobs    {"tokens": [...], "positions": [...],
                          "token_ids": [...]}               -> {"logprobs": [[...]]}
    GET  /v1/info                                           -> vocab/limit metadata

Tokenization is byte-faithful: no chat template, no system prompt, no added
special tokens, except a mandatory beginning-of-sequence token when the
model requires one, which is prepended and reported in the tokenize response
(`bos_token_id`) so clients can account for the extra position. Log-probs
are natural-log values from the full-vocabulary softmax of one
teacher-forced forward pass; position p conditions on tokens[:p] only.
"""

from __future__ import annotations

import argparse
import threading
from dataclasses import dataclass

import torch
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

DTYPES = {"float32": torch.float32, "float16": torch.float16, "bfloat16": torch.bfloat16}


@dataclass
class AdapterConfig:
    model: str
    device: str = "cpu"
    dtype: str = "float32"
    token_limit: int = 2048
    add_bos: str = "auto"  # auto | always | never
    host: str = "127.0.0.1"
    port: int = 8080

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.add_bos not in ("auto", "always", "never"):
            raise ValueError("add_bos must be auto/always/never")


class CausalLMScorer:
    """One model instance; requests are serialized behind a lock."""

    def __init__(self, config: AdapterConfig):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModelForCausalLM.from_pretrained(
            config.model, dtype=DTYPES[config.dtype]
        ).to(config.device)
        self.model.eval()

        capacity = getattr(self.model.config, "max_position_embeddings", None)
        if capacity is not None and config.token_limit > capacity:
            raise ValueError(
                f"declared token limit {config.token_limit} exceeds the model's "
                f"positional capacity {capacity}"
            )
        if config.add_bos == "always":
            self._bos = self.tokenizer.bos_token_id
            if self._bos is None:
                raise ValueError("add_bos=always but the tokenizer has no BOS token")
        elif config.add_bos == "auto":
            self._bos = (
                self.tokenizer.bos_token_id
                if getattr(self.tokenizer, "add_bos_token", False)
                else None
            )
        else:
            self._bos = None
        self._lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return int(self.model.config.vocab_size)

    @property
    def bos_token_id(self) -> int | None:
        return self._bos

    def tokenize(self, text: str) -> list[int]:
        if text == "":
            return []
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        if self._bos is not None:
            ids = [self._bos] + list(ids)
        return [int(t) for t in ids]

    def detokenize(self, token_ids: list[int]) -> str:
        ids = list(token_ids)
        if self._bos is not None and ids and ids[0] == self._bos:
            ids = ids[1:]
        return self.tokenizer.decode(ids, clean_up_tokenization_spaces=False)

    @torch.inference_mode()
    def logprobs(
        self, tokens: list[int], positions: list[int], token_ids: list[int]
    ) -> list[list[float]]:
        if len(tokens) > self.config.token_limit:
            raise OverLimitError(
                f"input of {len(tokens)} tokens exceeds the declared limit "
                f"{self.config.token_limit}"
            )
        for pos in positions:
            if not 1 <= pos <= len(tokens):
                raise BadRequestError(
                    f"position {pos} out of range; causal scoring needs "
                    f"1 <= position <= {len(tokens)}"
                )
        for tid in token_ids:
            if not 0 <= tid < self.vocab_size:
                raise BadRequestError(f"token id {tid} outside the vocabulary")

        ids = torch.tensor([tokens], dtype=torch.long, device=self.config.device)
        with self._lock:
            logits = self.model(ids).logits[0]  # (len(tokens), vocab), one pass
        logprobs = torch.log_softmax(logits.float(), dim=-1)
        cols = torch.tensor(token_ids, dtype=torch.long, device=logprobs.device)
        out: list[list[float]] = []
        for pos in positions:
            # logits row p-1 is the prediction for the token at index p
            row = logprobs[pos - 1, cols]
            out.append([float(v) for v in row])
        return out


class BadRequestError(ValueError):
    pass


class OverLimitError(BadRequestError):
    pass


class TokenizeRequest(BaseModel):
    text: str


class TokenizeResponse(BaseModel):
    tokens: list[int]
    bos_token_id: int | None = None


class DetokenizeRequest(BaseModel):
    tokens: list[int]


class DetokenizeResponse(BaseModel):
    text: str


class LogprobsRequest(BaseModel):
    tokens: list[int]
    positions: list[int]
    token_ids: list[int]


class LogprobsResponse(BaseModel):
    logprobs: list[list[float]]


class InfoResponse(BaseModel):
    vocab_size: int
    token_limit: int
    model: str
    bos_token_id: int | None = None


def create_app(scorer: CausalLMScorer) -> FastAPI:
    app = FastAPI(title="icl-hf-adapter", version="1")

    @app.get("/v1/info", response_model=InfoResponse)
    def info() -> InfoResponse:
        return InfoResponse(
            vocab_size=scorer.vocab_size,
            token_limit=scorer.config.token_limit,
            model=scorer.config.model,
            bos_token_id=scorer.bos_token_id,
        )

    @app.post("/v1/tokenize", response_model=TokenizeResponse, response_model_exclude_none=True)
    def tokenize(req: TokenizeRequest) -> TokenizeResponse:
        return TokenizeResponse(tokens=scorer.tokenize(req.text), bos_token_id=scorer.bos_token_id)

    @app.post("/v1/detokenize", response_model=DetokenizeResponse)
    def detokenize(req: DetokenizeRequest) -> DetokenizeResponse:
        return DetokenizeResponse(text=scorer.detokenize(req.tokens))

    @app.post("/v1/logprobs", response_model=LogprobsResponse)
    def logprobs(req: LogprobsRequest) -> LogprobsResponse:
        try:
            rows = scorer.logprobs(req.tokens, req.positions, req.token_ids)
        except BadRequestError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except torch.cuda.OutOfMemoryError as exc:  # retryable for the client
            raise HTTPException(status_code=503, detail=f"out of memory: {exc}") from exc
        return LogprobsResponse(logprobs=rows)

    return app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="serve a causal LM over the evaluation protocol")
    parser.add_argument("model", help="model id or local path loadable by transformers")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--dtype", choices=sorted(DTYPES), default="float32")
    parser.add_argument("--token-limit", type=int, default=2048)
    parser.add_argument("--add-bos", choices=["auto", "always", "never"], default="auto")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    args = parser.parse_args(argv)

    config = AdapterConfig(
        model=args.model,
        device=args.device,
        dtype=args.dtype,
        token_limit=args.token_limit,
        add_bos=args.add_bos,
        host=args.host,
        port=args.port,
    )
    scorer = CausalLMScorer(config)

    import uvicorn

    uvicorn.run(create_app(scorer), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    main()
