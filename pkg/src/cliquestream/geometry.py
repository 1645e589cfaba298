"""2-D euclidean proximity space: placement, distance, median splits."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass


@dataclass(frozen=True)
class Position:
    x: float
    y: float


@dataclass(frozen=True)
class PlaneConfig:
    plane_side: float
    node_count: int
    rng_seed: int = 0

    def validate(self) -> None:
        if self.plane_side <= 0:
            raise ValueError("plane_side must be positive")
        if self.node_count < 1:
            raise ValueError("node_count must be at least 1")


def distance(a: Position, b: Position) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def place_nodes(cfg: PlaneConfig) -> list[Position]:
    """Uniform i.i.d. placement on the square, reproducible per seed."""
    cfg.validate()
    rng = random.Random(cfg.rng_seed)
    side = cfg.plane_side
    return [Position(rng.uniform(0.0, side), rng.uniform(0.0, side))
            for _ in range(cfg.node_count)]


def median_split(points):
    """Split (ref, Position) pairs into halves of ceil(n/2) and floor(n/2).

    The cut is a median cut along the axis of greater coordinate spread;
    ties at the median are resolved by ref order, so the split is
    deterministic. refs must be mutually orderable.
    """
    if len(points) < 2:
        raise ValueError("median_split needs at least 2 points")
    xs = [p.x for _, p in points]
    ys = [p.y for _, p in points]
    if max(xs) - min(xs) >= max(ys) - min(ys):
        key = lambda rp: (rp[1].x, rp[0])
    else:
        key = lambda rp: (rp[1].y, rp[0])
    ordered = sorted(points, key=key)
    cut = (len(ordered) + 1) // 2
    return ordered[:cut], ordered[cut:]
