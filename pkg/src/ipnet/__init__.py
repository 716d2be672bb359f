"""Interpretable neural precoding for multiuser MIMO downlink.

Subpackages and modules:

- :mod:`ipnet.linalg`: small complex dense linear algebra
- :mod:`ipnet.channels`: Rayleigh channels, LMMSE estimates, dataset files
- :mod:`ipnet.precoders`: MMSE / ZF / MRT precoders and the sum rate
- :mod:`ipnet.autodiff`: reverse-mode autodiff, layers and optimizers
- :mod:`ipnet.model`: CSI augmentation, precoder networks and training
- :mod:`ipnet.checkpoint`: checkpoint files
- :mod:`ipnet.evaluation`: Monte Carlo sweeps and BER simulation
- :mod:`ipnet.cli`: command-line entry point
"""

__version__ = "0.1.0"
