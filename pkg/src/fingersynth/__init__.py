"""Fingerprint patch synthesis and evaluation toolkit.

Generates fingerprint-like patches with diffusion models and WGAN-GP,
translates unpaired live/spoof domains with CycleWGAN-GP, and evaluates
outputs with FID, KID, PRDC, matcher-based FAR analysis and spoof-score
histograms.
"""

__version__ = "0.1.0"
