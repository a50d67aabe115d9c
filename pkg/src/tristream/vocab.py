"""Unified token-id space over text tokens, speech units, and the blank token.

Ids are laid out contiguously: text [0, text_size), units
[text_size, text_size + unit_size), blank = text_size + unit_size.
Text ids 0..3 are reserved: pad, eos, bos, img.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import ConfigError

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
IMG_ID = 3
N_RESERVED = 4


class TokenKind(enum.Enum):
    TEXT = "text"
    UNIT = "unit"
    BLANK = "blank"


@dataclass(frozen=True)
class MultimodalVocab:
    """Disjoint contiguous id ranges for text, speech units, and blank."""

    text_size: int
    unit_size: int

    @property
    def blank_id(self) -> int:
        return self.text_size + self.unit_size

    @property
    def total_size(self) -> int:
        return self.text_size + self.unit_size + 1

    def is_text(self, tid: int) -> bool:
        return 0 <= tid < self.text_size

    def is_unit(self, tid: int) -> bool:
        return self.text_size <= tid < self.text_size + self.unit_size

    def is_blank(self, tid: int) -> bool:
        return tid == self.blank_id

    def classify(self, tid: int) -> TokenKind:
        if not 0 <= tid < self.total_size:
            raise ConfigError(f"token id {tid} outside vocab of size {self.total_size}")
        if tid < self.text_size:
            return TokenKind.TEXT
        if tid < self.blank_id:
            return TokenKind.UNIT
        return TokenKind.BLANK

    def unit_global(self, local: int) -> int:
        """Map a unit-local index [0, unit_size) to its global id."""
        if not 0 <= local < self.unit_size:
            raise ConfigError(f"unit local index {local} outside [0, {self.unit_size})")
        return self.text_size + local

    def unit_local(self, tid: int) -> int:
        """Map a global unit id back to its local index."""
        if not self.is_unit(tid):
            raise ConfigError(f"id {tid} is not a speech unit")
        return tid - self.text_size

    def content_text_ids(self) -> range:
        """Text ids outside the reserved block."""
        return range(N_RESERVED, self.text_size)


def build_vocab(text_size: int, unit_size: int) -> MultimodalVocab:
    """Construct the unified vocabulary; sizes must leave room for the
    reserved text tokens and at least one unit."""
    if text_size < N_RESERVED:
        raise ConfigError(f"text_size must be >= {N_RESERVED} (reserved tokens), got {text_size}")
    if unit_size < 1:
        raise ConfigError(f"unit_size must be >= 1, got {unit_size}")
    return MultimodalVocab(text_size=text_size, unit_size=unit_size)
