"""Variational-autoencoder artefact detection for arterial pressure waveforms."""

__version__ = "0.1.0"
