"""Plasticity analysis of vision-transformer components.

Pure-numpy transformer with exact gradients, Monte-Carlo plasticity
estimation, analytic plasticity upper bounds and a selective finetuning
harness.
"""

__version__ = "0.1.0"
