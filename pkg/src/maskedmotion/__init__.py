"""Desk-scale generative masked motion modeling.

Two-stage pipeline: a vector-quantized motion tokenizer turns continuous
motion into discrete tokens, and a text-conditioned masked transformer
generates those tokens via confidence-based parallel decoding. Editing
(in-betweening, outpainting, long chains, upper-body swaps) falls out of
placing mask tokens where regeneration is wanted.
"""

__version__ = "0.1.0"
