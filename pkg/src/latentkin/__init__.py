"""latentkin: latent-space chemistry surrogate pipeline.

Generates perturbation-rich plug-flow-reactor training data for a finite-rate
mechanism, trains a linear-encoder/nonlinear-decoder surrogate with a latent
dynamics regressor, and deploys it in a finite-volume heated-channel solver
with full-order and latent chemistry backends for like-for-like accuracy and
speedup measurements.
"""

__version__ = "0.1.0"
