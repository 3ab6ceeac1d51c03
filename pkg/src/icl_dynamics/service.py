"""FastAPI service exposing any in-process backend over the wire protocol.

Lets the reference backends be driven through real HTTP: useful both for
integration-testing the client against exact field names and for running the
evaluation toolkit across machines without a GPU server. JSON has no -inf,
so probability-zero log-probs are transmitted as -1e30, far below the
extraction floor of exp(-80), hence indistinguishable downstream.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .backends import Backend
from .errors import BackendError, PermanentBackendError

WIRE_NEG_INF = -1e30


class TokenizeRequest(BaseModel):
    text: str


class TokenizeResponse(BaseModel):
    tokens: list[int]


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


def create_app(backend: Backend) -> FastAPI:
    app = FastAPI(title="icl-dynamics backend", version="1")

    @app.get("/v1/info", response_model=InfoResponse)
    def info() -> InfoResponse:
        return InfoResponse(vocab_size=backend.vocab_size, token_limit=backend.token_limit)

    @app.post("/v1/tokenize", response_model=TokenizeResponse)
    def tokenize(req: TokenizeRequest) -> TokenizeResponse:
        return TokenizeResponse(tokens=list(backend.tokenize(req.text)))

    @app.post("/v1/detokenize", response_model=DetokenizeResponse)
    def detokenize(req: DetokenizeRequest) -> DetokenizeResponse:
        return DetokenizeResponse(text=backend.detokenize(req.tokens))

    @app.post("/v1/logprobs", response_model=LogprobsResponse)
    def logprobs(req: LogprobsRequest) -> LogprobsResponse:
        try:
            matrix = backend.logprobs(req.tokens, req.positions, req.token_ids)
        except PermanentBackendError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except BackendError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        matrix = np.asarray(matrix, dtype=float)
        finite = np.where(np.isfinite(matrix), matrix, WIRE_NEG_INF)
        return LogprobsResponse(logprobs=[[float(v) for v in row] for row in finite])

    return app
