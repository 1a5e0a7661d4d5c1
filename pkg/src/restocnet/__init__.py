"""Residual stochastic binary convolutional spiking networks.

Layer-wise unsupervised training of binary kernels with probabilistic
hybrid STDP, plus a binary fully-connected SNN baseline.
"""

__version__ = "0.1.0"
