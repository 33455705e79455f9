"""Shared exception types."""

from __future__ import annotations


class PersoncapError(Exception):
    """Base class for all library errors."""


class ShapeError(PersoncapError):
    """Operands have incompatible shapes; message names both shapes."""


class DomainError(PersoncapError):
    """A numeric domain violation (log of non-positive, NaN/Inf in checked mode)."""


class ContractError(PersoncapError):
    """A caller violated an operation's precondition."""


class FormatError(PersoncapError):
    """A binary or text artifact on disk does not match its declared format."""


class ValidationError(PersoncapError):
    """An annotation document violates the schema.

    ``path`` locates the offending field, e.g. ``persons[2].color_index``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")
