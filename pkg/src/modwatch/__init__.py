"""modwatch: VAE/CVAE anomaly detection for multichannel pulsed waveforms."""

__version__ = "0.1.0"
