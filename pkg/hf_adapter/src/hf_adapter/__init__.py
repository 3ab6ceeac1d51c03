"""Causal-LM inference server speaking the icl-dynamics wire protocol."""

from .server import AdapterConfig, CausalLMScorer, create_app

__version__ = "0.1.0"
