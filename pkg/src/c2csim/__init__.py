"""Analytic-model simulator for serverless LLM serving on MIG-partitioned CPU-GPU superchips."""

__version__ = "0.1.0"
