"""Desk-scale lab for post-pruning weight reconstruction in GPT-style
decoders: pruning criteria, local reconstruction at several granularities
under three propagation strategies, and recovery evaluation.
"""

__version__ = "0.1.0"
