"""tvcert: certified total-variation bounds from Fortet-Mourier bounds."""

__version__ = "0.1.0"

from .errors import ConfigError, TvcertError  # noqa: E402

__all__ = ["ConfigError", "TvcertError", "__version__"]
