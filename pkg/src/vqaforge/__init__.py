"""vqaforge: a self-questioning VQA dataset factory for text-rich images.

The package turns a manifest of text-rich images into a filtered visual
question answering instruction dataset: ingest and near-duplicate removal,
question generation, multi-context answering, reasoning, consistency
filtering, shard assembly with stats, and a log-trend fitting helper for
dataset scaling decisions.
"""
from __future__ import annotations

__version__ = "0.1.0"
