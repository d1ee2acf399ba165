"""Transformer bridge for the mukv engine: prefill extraction and decode."""

from .config import AdapterConfig, tiny_geometry
from .decode import ContextTooLargeError, decode_with_context
from .extract import extract_question, extract_segment, prefill, synth_segment_tokens
from .model import build_checkpoint, check_geometry, decode_ids, encode_text, load_model

__version__ = "0.1.0"
