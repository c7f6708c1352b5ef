"""Environment geometry and unit-block decomposition.

All geometry lives in block units: blocks have side 1, environment corners
are integers, and a point ``p`` belongs to the half-open cell
``[floor(px), floor(px)+1) x [floor(py), floor(py)+1)``, so every point maps
to exactly one block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    CorridorTooNarrow,
    DataError,
    DisconnectedFreespace,
    NonIntegerGeometry,
    OutOfFreespace,
)

# Axis directions in tie-break order: +x, +y, -x, -y.
DIRECTIONS = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=np.int64)

Vec2 = np.ndarray  # shape (2,), float64


def vec2(x: float, y: float) -> Vec2:
    return np.array([float(x), float(y)])


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [x0, x1] x [y0, y1] with integer corners."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        for v in (self.x0, self.y0, self.x1, self.y1):
            if float(v) != int(v):
                raise NonIntegerGeometry(f"corner coordinate {v} is not an integer")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise DataError(f"degenerate rectangle {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    def interior_overlaps(self, other: "Rect") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )

    def contains_rect(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )


@dataclass(frozen=True)
class Environment:
    """Rectangular world with rectangular interior obstacles.

    Obstacles must lie inside the bounds and may touch but not overlap each
    other. Corridor width (>= 2 blocks everywhere) is enforced later by
    :func:`decompose_blocks`, which is the validating entry point.
    """

    bounds: Rect
    obstacles: tuple[Rect, ...] = ()

    def __post_init__(self) -> None:
        for ob in self.obstacles:
            if not self.bounds.contains_rect(ob):
                raise DataError(f"obstacle {ob} extends outside bounds {self.bounds}")
        for i, a in enumerate(self.obstacles):
            for b in self.obstacles[i + 1 :]:
                if a.interior_overlaps(b):
                    raise DataError(f"obstacles {a} and {b} overlap")

    def translated(self, dx: int, dy: int) -> "Environment":
        def mv(r: Rect) -> Rect:
            return Rect(r.x0 + dx, r.y0 + dy, r.x1 + dx, r.y1 + dy)

        return Environment(mv(self.bounds), tuple(mv(o) for o in self.obstacles))

    def to_dict(self) -> dict:
        if (self.bounds.x0, self.bounds.y0) != (0, 0):
            raise DataError("only environments with origin (0, 0) are serializable")
        return {
            "bounds": [self.bounds.x1, self.bounds.y1],
            "obstacles": [[o.x0, o.y0, o.x1, o.y1] for o in self.obstacles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        try:
            w, h = d["bounds"]
            obstacles = tuple(Rect(*map(int, ob)) for ob in d["obstacles"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed environment: {exc}") from exc
        for ob_raw in d["obstacles"]:
            for v in ob_raw:
                if float(v) != int(v):
                    raise NonIntegerGeometry(f"obstacle coordinate {v} is not an integer")
        return cls(Rect(0, 0, int(w), int(h)), obstacles)


@dataclass(frozen=True)
class BlockGrid:
    """Unit-square decomposition of an environment's freespace.

    ``free[ix, iy]`` covers the cell with lower-left corner
    ``(origin_x + ix, origin_y + iy)``. Free blocks are numbered in x-major
    scan order (ix ascending, then iy); that numbering is the block order
    used by every per-block export.
    """

    origin_x: int
    origin_y: int
    free: np.ndarray  # (W, H) bool, read-only

    # Derived, filled in __post_init__.
    block_id: np.ndarray = field(init=False, repr=False)  # (W, H) int32, -1 = blocked
    centers: np.ndarray = field(init=False, repr=False)  # (n_blocks, 2) float64
    neighbor_pairs: tuple = field(init=False, repr=False)  # per direction (dst, src)

    def __post_init__(self) -> None:
        free = np.ascontiguousarray(self.free, dtype=bool)
        free.setflags(write=False)
        object.__setattr__(self, "free", free)

        block_id = np.full(free.shape, -1, dtype=np.int32)
        ix, iy = np.nonzero(free)
        block_id[ix, iy] = np.arange(ix.size, dtype=np.int32)
        block_id.setflags(write=False)
        object.__setattr__(self, "block_id", block_id)

        centers = np.stack(
            [ix + self.origin_x + 0.5, iy + self.origin_y + 0.5], axis=1
        ).astype(np.float64)
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

        pairs = []
        cells = np.stack([ix, iy], axis=1)
        for d in DIRECTIONS:
            nb = cells + d
            ok = (
                (nb[:, 0] >= 0)
                & (nb[:, 0] < free.shape[0])
                & (nb[:, 1] >= 0)
                & (nb[:, 1] < free.shape[1])
            )
            ok[ok] &= free[nb[ok, 0], nb[ok, 1]]
            dst = block_id[cells[ok, 0], cells[ok, 1]]
            src = block_id[nb[ok, 0], nb[ok, 1]]
            pairs.append((dst, src))
        object.__setattr__(self, "neighbor_pairs", tuple(pairs))

    @classmethod
    def from_mask(cls, free: np.ndarray, origin: tuple[int, int] = (0, 0)) -> "BlockGrid":
        """Build a grid directly from a mask; only connectivity is validated."""
        grid = cls(origin[0], origin[1], np.asarray(free, dtype=bool))
        _check_connected(grid.free)
        return grid

    @property
    def width(self) -> int:
        return self.free.shape[0]

    @property
    def height(self) -> int:
        return self.free.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.centers.shape[0]

    def cell_of(self, p) -> tuple[int, int]:
        """Grid indices of the cell containing p (may be out of range)."""
        return (
            int(np.floor(p[0])) - self.origin_x,
            int(np.floor(p[1])) - self.origin_y,
        )

    def id_at(self, p) -> int:
        """Block id of the free cell containing p; OutOfFreespace otherwise."""
        ix, iy = self.cell_of(p)
        if not (0 <= ix < self.width and 0 <= iy < self.height) or not self.free[ix, iy]:
            raise OutOfFreespace(f"point ({p[0]}, {p[1]}) is not in a free block")
        return int(self.block_id[ix, iy])

    def ids_at(self, points: np.ndarray) -> np.ndarray:
        """Vectorized id_at for an (N, 2) array."""
        cells = np.floor(points).astype(np.int64)
        cells[:, 0] -= self.origin_x
        cells[:, 1] -= self.origin_y
        inside = (
            (cells[:, 0] >= 0)
            & (cells[:, 0] < self.width)
            & (cells[:, 1] >= 0)
            & (cells[:, 1] < self.height)
        )
        if not inside.all():
            bad = points[~inside][0]
            raise OutOfFreespace(f"point ({bad[0]}, {bad[1]}) is not in a free block")
        ids = self.block_id[cells[:, 0], cells[:, 1]]
        if (ids < 0).any():
            bad = points[ids < 0][0]
            raise OutOfFreespace(f"point ({bad[0]}, {bad[1]}) is not in a free block")
        return ids.astype(np.int64)

    def block_index(self, p) -> Vec2:
        """Center of the free block containing p."""
        return self.centers[self.id_at(p)].copy()

    def block_indices(self, points: np.ndarray) -> np.ndarray:
        return self.centers[self.ids_at(points)]

    def block_neighbors(self, block: int) -> list[int]:
        """Free blocks among the 4 axis neighbors, in +x, +y, -x, -y order."""
        if not 0 <= block < self.n_blocks:
            raise DataError(f"block id {block} out of range")
        cx, cy = self.centers[block]
        ix, iy = int(cx - 0.5) - self.origin_x, int(cy - 0.5) - self.origin_y
        out = []
        for d in DIRECTIONS:
            jx, jy = ix + d[0], iy + d[1]
            if 0 <= jx < self.width and 0 <= jy < self.height and self.free[jx, jy]:
                out.append(int(self.block_id[jx, jy]))
        return out


def _check_connected(free: np.ndarray) -> None:
    if not free.any():
        raise DisconnectedFreespace("environment has no free blocks")
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    _, n_components = ndimage.label(free, structure=structure)
    if n_components != 1:
        raise DisconnectedFreespace(f"freespace splits into {n_components} components")


def decompose_blocks(env: Environment) -> BlockGrid:
    """Tile the environment's freespace with unit blocks.

    A block is free iff its open unit cell meets no obstacle interior. The
    free set must be 4-connected and every free block must belong to at
    least one fully free 2x2 square (the 2-wide corridor rule).
    """
    b = env.bounds
    free = np.ones((b.width, b.height), dtype=bool)
    for ob in env.obstacles:
        free[ob.x0 - b.x0 : ob.x1 - b.x0, ob.y0 - b.y0 : ob.y1 - b.y0] = False

    _check_connected(free)

    sq = free[:-1, :-1] & free[1:, :-1] & free[:-1, 1:] & free[1:, 1:]
    padded = np.zeros((free.shape[0] + 1, free.shape[1] + 1), dtype=bool)
    padded[1:-1, 1:-1] = sq
    in_square = padded[:-1, :-1] | padded[1:, :-1] | padded[:-1, 1:] | padded[1:, 1:]
    narrow = free & ~in_square
    if narrow.any():
        ix, iy = np.argwhere(narrow)[0]
        raise CorridorTooNarrow(
            f"free block ({ix + b.x0}, {iy + b.y0}) is not part of any 2x2 free square"
        )

    return BlockGrid(b.x0, b.y0, free)
