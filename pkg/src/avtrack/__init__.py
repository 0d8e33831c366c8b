"""Audio-visual track selection with an acoustic-query attention layer.

Subpackages load lazily; ``avtrack.backend.NAME`` reports whether the
compiled kernels or the numpy fallback are in use.
"""

__version__ = "0.1.0"

__all__ = ["attention", "backend", "cli", "features", "frontend", "gradcheck", "harness",
           "numeric", "tensorio", "training"]
