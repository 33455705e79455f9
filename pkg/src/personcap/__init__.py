"""Person-level dense video captioning on 1-D feature sequences.

A numpy-only stack: a tape-based autodiff engine, multi-scale deformable
attention, Hungarian set matching, temporal segment geometry, from-scratch
caption metrics, a synthetic surveillance corpus generator, and a small
transformer-style model tying them together.
"""

from .errors import (
    ContractError,
    DomainError,
    FormatError,
    PersoncapError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DomainError",
    "FormatError",
    "PersoncapError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
