"""Tile puzzling and per-tile rotation pretext tasks.

Images are H x W x C numpy arrays.  Regions are indexed row-major.  For a
puzzle, ``puzzle_labels[j]`` is the original index of the tile now sitting at
region ``j``; for rotation, ``rotation_labels[j]`` is the number of 90 degree
counterclockwise turns applied to region ``j``.

When a side is not divisible by ``n`` the last row/column of tiles absorbs
the remainder (224 / 3 -> 75, 75, 74).  Tiles that have to change shape
(a 90 degree turn of a non-square tile, or a tile moved into a differently
sized region) are resized back with nearest-neighbour sampling, so those
operations are lossy; on evenly divisible sides they are exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np

from .errors import ConstraintViolationError, InvalidInputError

TASKS = ("puzzle", "rotation", "puzzle_rotation")
MAX_ROTATED_TILES = 2


@dataclass(frozen=True)
class TileGrid:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInputError(f"grid needs n >= 2, got {self.n}")

    @property
    def regions(self) -> int:
        return self.n * self.n

    def edges(self, side: int) -> list[int]:
        """Cut positions along one axis; leading tiles take the spare pixels (224/3 -> 75, 75, 74)."""
        base, extra = divmod(side, self.n)
        sizes = [base + (i < extra) for i in range(self.n)]
        return [0] + np.cumsum(sizes).tolist()

    def boxes(self, height: int, width: int) -> list[tuple[int, int, int, int]]:
        if height < self.n or width < self.n:
            raise InvalidInputError(f"{height}x{width} image is smaller than a {self.n}x{self.n} grid")
        rows, cols = self.edges(height), self.edges(width)
        return [
            (rows[r], rows[r + 1], cols[c], cols[c + 1])
            for r in range(self.n)
            for c in range(self.n)
        ]


@dataclass
class PretextSample:
    image: np.ndarray
    puzzle_labels: np.ndarray | None = None
    rotation_labels: np.ndarray | None = None
    task: str | None = None
    n: int | None = None

    def __post_init__(self):
        if self.puzzle_labels is None and self.rotation_labels is None:
            raise InvalidInputError("a pretext sample needs at least one label vector")

    def record(self) -> dict:
        """One sidecar row describing this sample's labels."""
        fmt = lambda v: "" if v is None else " ".join(str(int(x)) for x in v)  # noqa: E731
        return {
            "task": self.task or "",
            "n": self.n or "",
            "puzzle_labels": fmt(self.puzzle_labels),
            "rotation_labels": fmt(self.rotation_labels),
        }


def tile(image: np.ndarray, grid: TileGrid) -> list[np.ndarray]:
    h, w = image.shape[:2]
    return [image[r0:r1, c0:c1].copy() for r0, r1, c0, c1 in grid.boxes(h, w)]


def assemble(tiles: Sequence[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Inverse of :func:`tile`; tiles must match the grid layout of some image."""
    if len(tiles) != grid.regions:
        raise InvalidInputError(f"expected {grid.regions} tiles, got {len(tiles)}")
    n = grid.n
    heights = [tiles[r * n].shape[0] for r in range(n)]
    widths = [tiles[c].shape[1] for c in range(n)]
    h, w = sum(heights), sum(widths)
    boxes = grid.boxes(h, w)
    first = tiles[0]
    out = np.empty((h, w) + first.shape[2:], dtype=first.dtype)
    for t, (r0, r1, c0, c1) in zip(tiles, boxes):
        if t.shape[:2] != (r1 - r0, c1 - c0) or t.shape[2:] != first.shape[2:]:
            raise InvalidInputError(
                f"tile of shape {t.shape} does not fit region {(r1 - r0, c1 - c0)} of a {h}x{w} layout"
            )
        out[r0:r1, c0:c1] = t
    return out


def _fit(t: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if t.shape[:2] == shape:
        return t
    resized = cv2.resize(t, (shape[1], shape[0]), interpolation=cv2.INTER_NEAREST)
    if resized.ndim < t.ndim:
        resized = resized[..., None]
    return resized


def rotate_tile(t: np.ndarray, k: int) -> np.ndarray:
    """Rotate counterclockwise by ``k * 90`` degrees, keeping the tile's shape."""
    return _fit(np.ascontiguousarray(np.rot90(t, k % 4)), t.shape[:2])


def check_permutation(perm: Sequence[int], grid: TileGrid) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (grid.regions,) or sorted(perm.tolist()) != list(range(grid.regions)):
        raise InvalidInputError(f"{perm.tolist()} is not a permutation of 0..{grid.regions - 1}")
    return perm


def check_rotations(rot: Sequence[int], grid: TileGrid) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.int64)
    if rot.shape != (grid.regions,):
        raise InvalidInputError(f"expected {grid.regions} rotation classes, got {rot.shape}")
    if ((rot < 0) | (rot > 3)).any():
        raise InvalidInputError(f"rotation classes must lie in 0..3, got {rot.tolist()}")
    return rot


def _permute(tiles: list[np.ndarray], perm: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    # tile i moves to region perm[i]; region j therefore holds tile inverse[j]
    inverse = np.argsort(perm)
    moved = [_fit(tiles[inverse[j]], tiles[j].shape[:2]) for j in range(len(tiles))]
    return moved, inverse


def apply_puzzle(image: np.ndarray, grid: TileGrid, perm: Sequence[int]) -> PretextSample:
    perm = check_permutation(perm, grid)
    moved, inverse = _permute(tile(image, grid), perm)
    return PretextSample(assemble(moved, grid), puzzle_labels=inverse, task="puzzle", n=grid.n)


def apply_rotation(image: np.ndarray, grid: TileGrid, rot: Sequence[int]) -> PretextSample:
    rot = check_rotations(rot, grid)
    tiles = [rotate_tile(t, k) for t, k in zip(tile(image, grid), rot)]
    return PretextSample(assemble(tiles, grid), rotation_labels=rot, task="rotation", n=grid.n)


def apply_puzzle_rotation(
    image: np.ndarray, grid: TileGrid, perm: Sequence[int], rot: Sequence[int]
) -> PretextSample:
    """Rotate tiles in place, then shuffle them.

    ``rot`` is indexed by the final region, matching the rotation head that
    looks at that region; the tile that ends up in region ``j`` carries
    rotation ``rot[j]``.
    """
    perm = check_permutation(perm, grid)
    rot = check_rotations(rot, grid)
    if np.count_nonzero(rot) > MAX_ROTATED_TILES:
        raise ConstraintViolationError(
            f"at most {MAX_ROTATED_TILES} tiles may be rotated, got {np.count_nonzero(rot)}"
        )
    tiles = tile(image, grid)
    inverse = np.argsort(perm)
    # rotation of the tile that will land in region j, applied at its source position
    source_rot = np.empty_like(rot)
    source_rot[inverse] = rot
    rotated = [rotate_tile(t, k) for t, k in zip(tiles, source_rot)]
    moved, _ = _permute(rotated, perm)
    return PretextSample(
        assemble(moved, grid),
        puzzle_labels=inverse,
        rotation_labels=rot,
        task="puzzle_rotation",
        n=grid.n,
    )


def draw_rotations(rng: np.random.Generator, grid: TileGrid, task: str) -> np.ndarray:
    if task == "rotation":
        return rng.integers(0, 4, size=grid.regions)
    # puzzle_rotation: k ~ U{0,1,2}, then k distinct regions, then classes ~ U{1,2,3}
    rot = np.zeros(grid.regions, dtype=np.int64)
    k = int(rng.integers(0, MAX_ROTATED_TILES + 1))
    if k:
        where = rng.choice(grid.regions, size=k, replace=False)
        rot[where] = rng.integers(1, 4, size=k)
    return rot


def sample_pretext(
    rng: np.random.Generator, task: str, grid: TileGrid, image: np.ndarray
) -> PretextSample:
    if task not in TASKS:
        raise InvalidInputError(f"unknown pretext task {task!r}; expected one of {TASKS}")
    if task == "puzzle":
        return apply_puzzle(image, grid, rng.permutation(grid.regions))
    if task == "rotation":
        return apply_rotation(image, grid, draw_rotations(rng, grid, task))
    perm = rng.permutation(grid.regions)
    return apply_puzzle_rotation(image, grid, perm, draw_rotations(rng, grid, task))


def all_permutations(n_regions: int) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(n_regions)))
