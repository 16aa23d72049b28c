"""Desk-scale MoE offloading laboratory: hybrid expert compression, lookahead
predictors, a transfer/compute pipeline simulator and truncated-moment checks."""

__version__ = "0.1.0"
