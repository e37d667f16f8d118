"""Desk-scale benchmark for adversarial attack transfer between audio
spoof detectors: feature extraction with exact waveform gradients, small
trainable classifiers, iterative sign-gradient attacks, and transfer
evaluation across features and input lengths."""

__version__ = "0.1.0"
