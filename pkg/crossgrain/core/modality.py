"""Modality tags shared by every two-pathway component."""

from __future__ import annotations

from enum import Enum

from crossgrain.errors import UsageError


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"

    @classmethod
    def parse(cls, value: str | Modality) -> Modality:
        """Return the member for *value*; unknown tags raise :class:`UsageError`."""
        try:
            return cls(value)
        except ValueError:
            raise UsageError(
                f"unknown modality {value!r}; expected one of "
                f"{', '.join(m.value for m in cls)}"
            ) from None

    @property
    def other(self) -> Modality:
        return Modality.TEXT if self is Modality.IMAGE else Modality.IMAGE
