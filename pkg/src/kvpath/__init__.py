"""Simulator and analysis tools for dual-path KV-Cache loading in
prefill/decode-disaggregated LLM serving."""

__version__ = "0.1.0"
