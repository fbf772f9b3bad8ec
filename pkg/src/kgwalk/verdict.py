from __future__ import annotations

from enum import Enum


class Verdict(str, Enum):
    """Three-way answer: a definite True/False or an abstention."""

    TRUE = "True"
    FALSE = "False"
    NONE = "None"

    @property
    def is_definite(self) -> bool:
        return self is not Verdict.NONE

    @classmethod
    def from_label(cls, value: object) -> Verdict:
        if value is True:
            return cls.TRUE
        if value is False:
            return cls.FALSE
        if value is None:
            return cls.NONE
        return cls(str(value))

    def __str__(self) -> str:
        return self.value
