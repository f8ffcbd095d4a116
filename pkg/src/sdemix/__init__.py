"""Bayesian inference for SDE mixed-effects models.

Two inference routes over the same model definitions: data augmentation
with a blocked Gibbs sampler (residual-bridge path proposals and the
modified innovation scheme for diffusion parameters), and a linear
noise approximation with forward-filtered marginal likelihoods and
backward sampling of the latent states.
"""

__version__ = "0.1.0"
