"""Puzzle, rotation and puzzle-rotation sample generation."""

import itertools
from collections import Counter

import numpy as np
import pytest

from hmtlpose.errors import ConstraintViolationError, InvalidInputError
from hmtlpose.pretext import (
    PretextSample,
    TileGrid,
    apply_puzzle,
    apply_puzzle_rotation,
    apply_rotation,
    assemble,
    rotate_tile,
    sample_pretext,
    tile,
)


def unshuffle(image, grid, labels):
    """Move region j's tile back to position labels[j]."""
    tiles = tile(image, grid)
    out = [None] * grid.regions
    for j, src in enumerate(labels):
        out[src] = tiles[j]
    return assemble(out, grid)


class TestTile:
    def test_even_split(self, image):
        tiles = tile(image, TileGrid(2))
        assert [t.shape for t in tiles] == [(112, 112, 3)] * 4

    def test_uneven_split(self, image):
        tiles = tile(image, TileGrid(3))
        assert [t.shape[:2] for t in tiles[:3]] == [(75, 75), (75, 75), (75, 74)]
        assert [t.shape[0] for t in tiles[::3]] == [75, 75, 74]

    def test_constant_image(self):
        img = np.full((30, 30, 3), 7, np.uint8)
        assert all((t == 7).all() for t in tile(img, TileGrid(3)))

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            tile(np.zeros((2, 2, 3), np.uint8), TileGrid(3))

    @pytest.mark.parametrize("n", [2, 3])
    @pytest.mark.parametrize("side", [224, 225])
    def test_round_trip(self, rng, n, side):
        img = rng.integers(0, 256, (side, side, 3), dtype=np.uint8)
        assert np.array_equal(assemble(tile(img, TileGrid(n)), TileGrid(n)), img)

    def test_pixel_multiset(self, image):
        tiles = tile(image, TileGrid(3))
        flat = np.sort(np.concatenate([t.reshape(-1) for t in tiles]))
        assert np.array_equal(flat, np.sort(image.reshape(-1)))

    def test_assemble_rejects_bad_shapes(self, image):
        tiles = tile(image, TileGrid(2))
        tiles[1] = tiles[1][:-1]
        with pytest.raises(InvalidInputError):
            assemble(tiles, TileGrid(2))


class TestPuzzle:
    def test_identity(self, image):
        s = apply_puzzle(image, TileGrid(2), [0, 1, 2, 3])
        assert np.array_equal(s.image, image)
        assert s.puzzle_labels.tolist() == [0, 1, 2, 3]
        assert s.rotation_labels is None

    def test_swap(self, image):
        s = apply_puzzle(image, TileGrid(2), [1, 0, 2, 3])
        assert s.puzzle_labels.tolist() == [1, 0, 2, 3]
        t = tile(image, TileGrid(2))
        assert np.array_equal(tile(s.image, TileGrid(2))[0], t[1])

    def test_region_holds_inverse(self, image):
        perm = [2, 0, 3, 1]  # tile i goes to region perm[i]
        s = apply_puzzle(image, TileGrid(2), perm)
        src = tile(image, TileGrid(2))
        out = tile(s.image, TileGrid(2))
        for i, j in enumerate(perm):
            assert np.array_equal(out[j], src[i])
            assert s.puzzle_labels[j] == i

    @pytest.mark.parametrize("bad", [[0, 0, 1, 2], [0, 1, 2], [0, 1, 2, 4]])
    def test_not_bijective(self, image, bad):
        with pytest.raises(InvalidInputError):
            apply_puzzle(image, TileGrid(2), bad)

    def test_labels_unshuffle_n3(self, rng):
        img = rng.integers(0, 256, (225, 225, 3), dtype=np.uint8)
        grid = TileGrid(3)
        for _ in range(50):
            s = apply_puzzle(img, grid, rng.permutation(9))
            assert sorted(s.puzzle_labels.tolist()) == list(range(9))
            assert np.array_equal(unshuffle(s.image, grid, s.puzzle_labels), img)

    def test_uneven_tiles_keep_shape(self, image, rng):
        s = apply_puzzle(image, TileGrid(3), rng.permutation(9))
        assert s.image.shape == image.shape


class TestRotation:
    def test_zero(self, image):
        s = apply_rotation(image, TileGrid(2), [0, 0, 0, 0])
        assert np.array_equal(s.image, image)
        assert s.rotation_labels.tolist() == [0, 0, 0, 0]
        assert s.puzzle_labels is None

    def test_four_quarter_turns(self, image):
        out = image
        for _ in range(4):
            out = apply_rotation(out, TileGrid(2), [1, 1, 1, 1]).image
        assert np.array_equal(out, image)

    def test_half_turn_one_tile(self, image):
        s = apply_rotation(image, TileGrid(2), [2, 0, 0, 0])
        before, after = tile(image, TileGrid(2)), tile(s.image, TileGrid(2))
        assert np.array_equal(after[0], before[0][::-1, ::-1])
        assert all(np.array_equal(after[k], before[k]) for k in (1, 2, 3))

    def test_counterclockwise(self):
        t = np.arange(4).reshape(2, 2)
        # top-right corner moves to top-left under a counterclockwise quarter turn
        assert rotate_tile(t, 1)[0, 0] == t[0, 1]

    def test_bad_class(self, image):
        with pytest.raises(InvalidInputError):
            apply_rotation(image, TileGrid(2), [0, 4, 0, 0])

    def test_pixel_multiset_per_tile(self, image, rng):
        rot = rng.integers(0, 4, 4)
        s = apply_rotation(image, TileGrid(2), rot)
        for a, b in zip(tile(image, TileGrid(2)), tile(s.image, TileGrid(2))):
            assert np.array_equal(np.sort(a.reshape(-1)), np.sort(b.reshape(-1)))

    def test_non_square_tile_keeps_shape(self, image):
        s = apply_rotation(image, TileGrid(3), [1] * 9)
        assert s.image.shape == image.shape


class TestPuzzleRotation:
    def test_identity(self, image):
        s = apply_puzzle_rotation(image, TileGrid(2), [0, 1, 2, 3], [0, 0, 0, 0])
        assert np.array_equal(s.image, image)
        assert s.puzzle_labels.tolist() == [0, 1, 2, 3]
        assert s.rotation_labels.tolist() == [0, 0, 0, 0]

    def test_three_rotations_rejected(self, image):
        with pytest.raises(ConstraintViolationError):
            apply_puzzle_rotation(image, TileGrid(2), [0, 1, 2, 3], [1, 1, 1, 0])

    def test_labels_describe_final_regions(self, image, rng):
        grid = TileGrid(2)
        src = tile(image, grid)
        for _ in range(20):
            perm = rng.permutation(4)
            rot = np.zeros(4, int)
            rot[rng.choice(4, 2, replace=False)] = rng.integers(1, 4, 2)
            s = apply_puzzle_rotation(image, grid, perm, rot)
            out = tile(s.image, grid)
            for j in range(4):
                assert np.array_equal(out[j], np.rot90(src[s.puzzle_labels[j]], s.rotation_labels[j]))

    def test_sampler_constraint(self, rng, image):
        grid = TileGrid(2)
        for _ in range(1000):
            s = sample_pretext(rng, "puzzle_rotation", grid, image[:8, :8])
            assert np.count_nonzero(s.rotation_labels) <= 2


class TestSampler:
    @pytest.mark.parametrize("task", ["puzzle", "rotation", "puzzle_rotation"])
    def test_deterministic(self, image, task):
        a = sample_pretext(np.random.default_rng(5), task, TileGrid(3), image)
        b = sample_pretext(np.random.default_rng(5), task, TileGrid(3), image)
        assert np.array_equal(a.image, b.image)
        assert a.record() == b.record()

    def test_unknown_task(self, image, rng):
        with pytest.raises(InvalidInputError):
            sample_pretext(rng, "jigsaw", TileGrid(2), image)

    def test_rotation_classes_uniform(self):
        rng = np.random.default_rng(0)
        img = np.zeros((4, 4, 3), np.uint8)
        labels = np.array([sample_pretext(rng, "rotation", TileGrid(2), img).rotation_labels for _ in range(10_000)])
        for region in range(4):
            freq = np.bincount(labels[:, region], minlength=4) / len(labels)
            np.testing.assert_allclose(freq, 0.25, atol=0.02)

    def test_permutations_uniform(self):
        rng = np.random.default_rng(0)
        img = np.zeros((4, 4, 3), np.uint8)
        counts = Counter(
            tuple(sample_pretext(rng, "puzzle", TileGrid(2), img).puzzle_labels) for _ in range(10_000)
        )
        assert set(counts) == set(itertools.permutations(range(4)))
        for c in counts.values():
            assert abs(c / 10_000 - 1 / 24) <= 0.01

    def test_puzzle_rotation_marginal(self):
        rng = np.random.default_rng(0)
        img = np.zeros((4, 4, 3), np.uint8)
        k = [np.count_nonzero(sample_pretext(rng, "puzzle_rotation", TileGrid(2), img).rotation_labels) for _ in range(6000)]
        freq = np.bincount(k, minlength=3) / len(k)
        np.testing.assert_allclose(freq, 1 / 3, atol=0.03)


class TestPretextSample:
    def test_needs_labels(self, image):
        with pytest.raises(InvalidInputError):
            PretextSample(image)

    def test_record(self, image):
        s = apply_puzzle_rotation(image, TileGrid(2), [1, 0, 2, 3], [0, 2, 0, 0])
        assert s.record() == {"task": "puzzle_rotation", "n": 2, "puzzle_labels": "1 0 2 3", "rotation_labels": "0 2 0 0"}
