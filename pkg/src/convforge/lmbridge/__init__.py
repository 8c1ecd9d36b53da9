"""Language-model backends behind one small interface.

``tiny`` models are randomly initialised and CPU-trainable in seconds;
``pretrained`` wraps Hugging Face checkpoints. Both save to a directory holding
weights, a vocabulary and a ``config.json`` sidecar, and :func:`load_model`
dispatches on that sidecar.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import DataError
from .base import (
    MAX_LENGTH,
    MAX_SOURCE_LENGTH,
    MAX_TARGET_LENGTH,
    SEGMENT_IDS,
    CausalLM,
    SampleOutput,
    SamplingParams,
    Seq2SeqLM,
    TrainConfig,
    filter_logits,
    finetune_causal,
    finetune_seq2seq,
    sample_causal,
    summarize,
)
from .tiny import TinyArch, TinyCausalLM, TinySeq2Seq

__all__ = [
    "MAX_LENGTH",
    "MAX_SOURCE_LENGTH",
    "MAX_TARGET_LENGTH",
    "SEGMENT_IDS",
    "CausalLM",
    "SampleOutput",
    "SamplingParams",
    "Seq2SeqLM",
    "TinyArch",
    "TinyCausalLM",
    "TinySeq2Seq",
    "TrainConfig",
    "filter_logits",
    "finetune_causal",
    "finetune_seq2seq",
    "load_model",
    "sample_causal",
    "summarize",
]


def load_model(path: str | Path) -> CausalLM | Seq2SeqLM:
    path = Path(path)
    sidecar = path / "config.json"
    if not sidecar.exists():
        raise DataError(f"no model at {path} (missing config.json)")
    meta = json.loads(sidecar.read_text())
    backend, kind = meta.get("backend"), meta.get("kind")
    if backend == "tiny":
        return TinyCausalLM.load(path) if kind == "causal" else TinySeq2Seq.load(path)
    if backend == "pretrained":
        from .pretrained import PretrainedCausalLM, PretrainedSeq2Seq

        return PretrainedCausalLM.load(path) if kind == "causal" else PretrainedSeq2Seq.load(path)
    raise DataError(f"unknown backend {backend!r} in {sidecar}")
