"""Desk-scale LoRA fine-tuning and evaluation laboratory."""

from .model import (
    GenerationParams,
    TransformerConfig,
    TransformerWeights,
    chunk_nll,
    forward,
    generate,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .tokenizer import ByteTokenizer

__version__ = "0.1.0"
