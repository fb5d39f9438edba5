"""Personality-aware multimodal sentiment analysis with multi-level fusion.

Desk-scale reference implementation: randomly initialized encoders with the
full alignment/fusion training stack, a synthetic data generator, metric
harness, and experiment CLI (training, ablations, layer sweep).
"""

__version__ = "0.1.0"
