"""Desk-scale laboratory for continual generative retrieval.

A toy encoder-decoder retrieval model decodes document identifiers under a
prefix trie; a product-key memory head adds hidden-space corrections during
decoding; per-session value-only tuning, driven by decoding-time access
statistics, stabilizes older slices while the backbone keeps adapting.
"""

__version__ = "0.1.0"
