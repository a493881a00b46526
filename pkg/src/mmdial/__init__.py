"""Multimodal dialogue response generation with attention-fused text and
image streams and a carried context state, built on a small numpy autograd
core and trained from scratch on a synthetic corpus."""

__version__ = "0.1.0"
