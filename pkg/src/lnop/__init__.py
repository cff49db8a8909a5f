"""Latent neural operator pretraining workbench.

Generates time-dependent PDE datasets, trains a physics-cross-attention latent
neural operator on single or hybrid datasets, finetunes with parameter-group
freezing, and evaluates autoregressive rollouts.
"""

__version__ = "0.1.0"
