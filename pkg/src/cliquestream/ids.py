"""Bit-prefix clique identifiers over the fixed-width id space.

A clique id is a most-significant-first bit prefix; it owns the contiguous
segment [lo, hi) of the 2^64 id space that starts with those bits. The set
of live ids in a substrate always tiles the space exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

ID_LENGTH = 64
ID_SPACE = 1 << ID_LENGTH


@dataclass(frozen=True)
class CliqueId:
    bits: int
    depth: int

    def __post_init__(self):
        if not 0 <= self.depth <= ID_LENGTH:
            raise ValueError(f"depth {self.depth} outside [0, {ID_LENGTH}]")
        if not 0 <= self.bits < (1 << self.depth):
            raise ValueError("bits wider than depth")

    @property
    def lo(self) -> int:
        return self.bits << (ID_LENGTH - self.depth)

    @property
    def hi(self) -> int:
        return (self.bits + 1) << (ID_LENGTH - self.depth)

    @property
    def span(self) -> int:
        return 1 << (ID_LENGTH - self.depth)

    def child(self, bit: int) -> "CliqueId":
        if self.depth >= ID_LENGTH:
            raise ValueError("id space exhausted, cannot extend prefix")
        return CliqueId((self.bits << 1) | (bit & 1), self.depth + 1)

    def parent(self) -> "CliqueId":
        if self.depth == 0:
            raise ValueError("root prefix has no parent")
        return CliqueId(self.bits >> 1, self.depth - 1)

    def sibling(self) -> "CliqueId":
        if self.depth == 0:
            raise ValueError("root prefix has no sibling")
        return CliqueId(self.bits ^ 1, self.depth)

    def contains_point(self, point: int) -> bool:
        return self.lo <= point < self.hi

    def is_prefix_of(self, other: "CliqueId") -> bool:
        if self.depth > other.depth:
            return False
        return (other.bits >> (other.depth - self.depth)) == self.bits

    def shared_bits(self, point: int) -> int:
        """Leading bits of a 64-bit point matching this prefix, capped at depth."""
        if self.depth == 0:
            return 0
        top = point >> (ID_LENGTH - self.depth)
        diff = top ^ self.bits
        if diff == 0:
            return self.depth
        return self.depth - diff.bit_length()

    def prefix_bits(self, n: int) -> int:
        if n > self.depth:
            raise ValueError("prefix longer than id depth")
        return self.bits >> (self.depth - n)

    def bit_string(self) -> str:
        if self.depth == 0:
            return ""
        return format(self.bits, f"0{self.depth}b")

    @staticmethod
    def from_string(s: str) -> "CliqueId":
        if s == "":
            return CliqueId(0, 0)
        return CliqueId(int(s, 2), len(s))

    def __str__(self) -> str:
        return self.bit_string() or "<root>"


ROOT_ID = CliqueId(0, 0)


def point_digit(point: int, index: int, b: int) -> int:
    """Value of the index-th b-bit digit of a 64-bit point (MSB first)."""
    shift = ID_LENGTH - (index + 1) * b
    if shift < 0:
        raise ValueError("digit index beyond id length")
    return (point >> shift) & ((1 << b) - 1)
