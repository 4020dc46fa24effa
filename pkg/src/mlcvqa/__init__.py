"""Full-reference video quality assessment toolkit for ML video codecs.

Covers the whole evaluation pipeline: Y4M decoding, per-frame objective
metrics, subjective vote aggregation into DMOS with confidence intervals,
rank metrics including CI-aware Kendall tau (Tau-b 95), vote-count
bootstrapping, deep-feature assembly, and the temporal quality model with
its training loop.
"""

__version__ = "0.1.0"
