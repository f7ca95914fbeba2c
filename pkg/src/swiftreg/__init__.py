"""Serial-section image registration with spectrally whitened FFT correlation."""

__version__ = "0.1.0"
