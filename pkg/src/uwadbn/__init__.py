"""DBN-based receiver simulation for underwater acoustic PSK links."""

__version__ = "0.1.0"
