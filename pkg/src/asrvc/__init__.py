"""Speaker conversion with a frozen ASR-feature encoder and a conditioned WaveNet decoder."""

__version__ = "0.1.0"
