"""Physics-informed optical inversion and spectral unmixing of sPA pixels."""

__version__ = "0.1.0"
