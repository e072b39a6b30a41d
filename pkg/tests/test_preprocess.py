import numpy as np
import pytest

from milkit.preprocess import (
    TilingConfig,
    background_like,
    grid_tiles,
    is_background,
    read_tile_directory,
    save_png,
    sobel_magnitude,
    tile_directory,
    to_grayscale,
)

from factories import checkerboard
from oracles import sobel_brute


def brute_background(tile, intensity=240, sobel=15, fraction=0.5):
    gray = to_grayscale(tile).tolist()
    mag = sobel_brute(gray)
    n = sum(1 for r in range(len(gray)) for c in range(len(gray[0])) if gray[r][c] > intensity or mag[r][c] < sobel)
    return n / (len(gray) * len(gray[0])) > fraction


class TestGrid:
    def test_exact_fit(self):
        tiles = grid_tiles(np.zeros((448, 448, 3), np.uint8))
        assert [(r, c) for r, c, _ in tiles] == [(0, 0), (0, 224), (224, 0), (224, 224)]
        assert all(t.shape == (224, 224, 3) for _, _, t in tiles)

    def test_partial_edges_dropped(self):
        assert len(grid_tiles(np.zeros((450, 450, 3), np.uint8))) == 4

    def test_single(self):
        assert len(grid_tiles(np.zeros((224, 224, 3), np.uint8))) == 1

    def test_coverage(self):
        img = np.random.default_rng(0).integers(0, 256, (70, 95, 3), dtype=np.uint8)
        cfg = TilingConfig(tile_size=20)
        tiles = grid_tiles(img, cfg)
        assert len(tiles) == (95 // 20) * (70 // 20)
        for r, c, t in tiles:
            np.testing.assert_array_equal(t, img[r:r + 20, c:c + 20])

    def test_too_small(self):
        with pytest.raises(ValueError):
            grid_tiles(np.zeros((100, 300, 3), np.uint8))

    def test_not_rgb(self):
        with pytest.raises(ValueError):
            grid_tiles(np.zeros((300, 300), np.uint8))


class TestFilter:
    def test_grayscale_rounding(self):
        px = np.array([[[255, 255, 255], [0, 0, 0], [10, 20, 30], [100, 150, 200]]], np.uint8)
        expected = [int(0.299 * r + 0.587 * g + 0.114 * b + 0.5) for r, g, b in px[0].tolist()]
        np.testing.assert_array_equal(to_grayscale(px)[0], expected)

    def test_sobel_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for shape in [(1, 1), (2, 5), (7, 7), (12, 9)]:
            gray = rng.integers(0, 256, shape).astype(np.uint8)
            np.testing.assert_allclose(sobel_magnitude(gray), sobel_brute(gray.tolist()), rtol=0, atol=1e-9)

    def test_white_is_background(self):
        assert is_background(np.full((224, 224, 3), 255, np.uint8))

    def test_flat_gray_is_background(self):
        assert is_background(np.full((224, 224, 3), 128, np.uint8))

    def test_checkerboard_is_tissue(self):
        tile = checkerboard()
        assert not is_background(tile)
        assert not brute_background(tile)
        assert background_like(tile).mean() == 0.5
        assert sobel_magnitude(to_grayscale(tile)).min() > 15

    def test_checkerboard_corner_phase(self):
        # aligned 2-pixel cells leave two dark corners flat, tipping the
        # background fraction just over one half
        tile = checkerboard(phase=0)
        assert background_like(tile).sum() == 224 * 224 // 2 + 2
        assert is_background(tile)

    def test_single_pixel_checkerboard_is_flat(self):
        # neighbours left/right (and above/below) share a colour, so the
        # interior Sobel response of a 1-pixel checkerboard is zero
        tile = checkerboard(cell=1, phase=0)
        assert np.all(sobel_magnitude(to_grayscale(tile))[1:-1, 1:-1] == 0)
        assert is_background(tile)

    def test_random_tiles_match_brute_force(self):
        rng = np.random.default_rng(2)
        cfg = TilingConfig(tile_size=24)
        for _ in range(20):
            tile = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
            tile[: int(rng.integers(0, 24))] = 250
            assert is_background(tile, cfg) == brute_background(tile)

    def test_flip_invariant(self):
        rng = np.random.default_rng(3)
        cfg = TilingConfig(tile_size=32)
        for _ in range(20):
            tile = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
            tile[:, : int(rng.integers(0, 32))] = 245
            v = is_background(tile, cfg)
            assert is_background(tile[::-1], cfg) == v and is_background(tile[:, ::-1], cfg) == v
            np.testing.assert_array_equal(background_like(tile[:, ::-1], cfg), background_like(tile, cfg)[:, ::-1])

    def test_literal_and(self):
        cfg = TilingConfig(rule_mode="literal_and")
        assert not is_background(np.full((224, 224, 3), 255, np.uint8), cfg)
        assert not is_background(checkerboard(), cfg)

    def test_deterministic(self):
        tile = checkerboard()
        assert [is_background(tile) for _ in range(3)] == [False] * 3

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            is_background(np.zeros((100, 100, 3), np.uint8))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TilingConfig(background_intensity_threshold=300)
        with pytest.raises(ValueError):
            TilingConfig(rule_mode="xor")


def test_tile_directory(tmp_path):
    img = np.full((40, 60, 3), 255, np.uint8)
    img[:20, :20] = checkerboard(20)
    (tmp_path / "in").mkdir()
    save_png(tmp_path / "in" / "slideA.png", img)
    kept = tile_directory(tmp_path / "in", tmp_path / "out", TilingConfig(tile_size=20))
    assert kept == {"slideA": 1}
    index = (tmp_path / "out" / "tile_index.csv").read_text().splitlines()
    assert index[0] == "wsi_id,row,col,background"
    assert index[1:] == ["slideA,0,0,0", "slideA,0,20,1", "slideA,0,40,1", "slideA,20,0,1", "slideA,20,20,1", "slideA,20,40,1"]
    tiles = read_tile_directory(tmp_path / "out")
    np.testing.assert_array_equal(tiles["slideA"][0], checkerboard(20))
