"""Maximum-likelihood tools for autoregressive models with Markov regime."""

__version__ = "0.1.0"
