"""Blockwise online speaker diarization with joint detection and embedding extraction.

The package trains a dual-decoder network that predicts target-speaker voice
activities from partially known speaker embeddings (detection) while extracting
embeddings for the speakers it discovers (representation). A streaming engine
feeds fixed-length audio blocks through the model, maintains a speaker-embedding
buffer across blocks, and can re-score the whole recording offline with the
final buffer.
"""

__version__ = "0.1.0"
