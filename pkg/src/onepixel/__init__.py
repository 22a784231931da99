"""One-pixel attacks, propagation maps and locality experiments on small CNNs."""

from onepixel.errors import (
    ConfigError,
    FormatError,
    OnePixelError,
    ParameterError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "OnePixelError",
    "ParameterError",
    "ShapeError",
    "__version__",
]
