"""Environment-induced decoherence of a Stern-Gerlach particle in an Ohmic bath."""

__version__ = "0.1.0"
