"""Part-based human radiance fields trained from monocular video."""

__version__ = "0.1.0"
