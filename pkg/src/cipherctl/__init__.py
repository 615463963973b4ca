"""cipherctl - Encrypted data-driven control over homomorphically encrypted Hankel data."""

__version__ = "0.1.0"

from .main import main

__all__ = ["main", "__version__"]
