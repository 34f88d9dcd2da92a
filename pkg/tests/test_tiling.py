import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from histocluster import tiling
from histocluster.synthetic import synthetic_slide
from oracles import erode_loop, flood_fill_filter, otsu_brute, thumbnail_loop

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_thumbnail_uniform():
    img = np.full((448, 448), 128, np.uint8)
    th = tiling.make_thumbnail(img, 224)
    assert th.shape == (2, 2) and (th == 128).all()
    assert tiling.make_thumbnail(np.zeros((224, 224, 3), np.uint8), 224).shape == (1, 1)


def test_thumbnail_partial_block_matches_loop():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (224, 450), dtype=np.uint8)
    th = tiling.make_thumbnail(img, 224)
    assert th.shape == (1, 3)
    np.testing.assert_array_equal(th, thumbnail_loop(img, 224))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 9), st.booleans(), st.integers(0, 2**31 - 1))
def test_thumbnail_matches_loop(h, w, scale, rgb, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3) if rgb else (h, w), dtype=np.uint8)
    np.testing.assert_array_equal(tiling.make_thumbnail(img, scale), thumbnail_loop(img, scale))


def test_thumbnail_rejects_empty():
    with pytest.raises(tiling.InvalidInputError):
        tiling.make_thumbnail(np.zeros((0, 5), np.uint8), 2)


def test_otsu_two_modes():
    img = np.array([[10] * 8 + [200] * 8] * 4, np.uint8)
    t = tiling.otsu_threshold(img)
    assert 10 < t <= 200
    assert t == otsu_brute(img)
    np.testing.assert_array_equal(tiling.binarize_tissue(img, t), img == 10)


def test_otsu_three_modes():
    img = np.repeat(np.array([20, 120, 230], np.uint8), 30).reshape(9, 10)
    assert tiling.otsu_threshold(img) == otsu_brute(img)


def test_otsu_constant_is_degenerate():
    with pytest.raises(tiling.DegenerateHistogramError):
        tiling.otsu_threshold(np.full((4, 4), 7, np.uint8))


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(2, 8))))
def test_otsu_equals_exhaustive_search(img):
    if len(np.unique(img)) < 2:
        with pytest.raises(tiling.DegenerateHistogramError):
            tiling.otsu_threshold(img)
    else:
        assert tiling.otsu_threshold(img) == otsu_brute(img)


def test_binarize_extremes():
    img = np.array([[10, 20], [30, 40]], np.uint8)
    assert tiling.binarize_tissue(img, 100).all()
    assert not tiling.binarize_tissue(img, 5).any()


def test_filter_components_rule():
    m = np.zeros((10, 20), bool)
    m[0, :5] = True               # 5 px
    m[4:7, 8:12] = True           # 12 px
    out = tiling.filter_small_components(m, 10)
    assert out.sum() == 12 and out[4:7, 8:12].all()
    np.testing.assert_array_equal(tiling.filter_small_components(m, 0), m)


def test_filter_components_diagonal_is_connected():
    m = np.eye(10, dtype=bool)
    np.testing.assert_array_equal(tiling.filter_small_components(m, 10), m)


def test_filter_components_random_matches_flood_fill():
    m = np.random.default_rng(1).random((64, 64)) < 0.3
    np.testing.assert_array_equal(tiling.filter_small_components(m, 10), flood_fill_filter(m, 10))


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(0, 6))
def test_filter_components_properties(m, k):
    once = tiling.filter_small_components(m, k)
    np.testing.assert_array_equal(once, flood_fill_filter(m, k))
    np.testing.assert_array_equal(tiling.filter_small_components(once, k), once)


@pytest.mark.parametrize("n,expect", [(3, 1), (2, 0), (5, 9)])
def test_erode_solid_blocks(n, expect):
    m = np.zeros((n + 4, n + 4), bool)
    m[2:2 + n, 2:2 + n] = True
    assert tiling.erode_mask(m).sum() == expect


@settings(max_examples=40, deadline=None)
@given(masks)
def test_erode_matches_loop_and_is_subset(m):
    e = tiling.erode_mask(m)
    np.testing.assert_array_equal(e, erode_loop(m))
    assert not (e & ~m).any()


def test_enumerate_coordinates():
    m = np.zeros((3, 3), bool)
    m[0, 0] = m[1, 2] = True
    tiles = tiling.enumerate_tiles(m, slide_id="s")
    assert [(t.x, t.y) for t in tiles] == [(0, 0), (448, 224)]
    assert tiling.enumerate_tiles(m, np.zeros_like(m), "s") == []
    assert tiling.enumerate_tiles(m, m, "s") == tiles
    with pytest.raises(tiling.InvalidInputError):
        tiling.enumerate_tiles(m, np.ones((2, 2), bool), "s")


def test_extract_tile():
    img = np.random.default_rng(0).integers(0, 256, (224, 224), dtype=np.uint8)
    full = tiling.TileRef("s", 0, 0, 0, 0, 224)
    np.testing.assert_array_equal(tiling.extract_tile(img, full), img)
    with pytest.raises(tiling.InvalidInputError):
        tiling.extract_tile(img, tiling.TileRef("s", 0, 1, 10, 0, 224))
    grad = np.add.outer(np.arange(40), 2 * np.arange(50)).astype(np.uint8)
    t = tiling.TileRef("s", 1, 2, 16, 8, 8)
    crop = tiling.extract_tile(grad, t)
    for i in range(8):
        for j in range(8):
            assert crop[i, j] == grad[8 + i, 16 + j]


def test_reduce_annotation_block_majority():
    ann = np.zeros((8, 8), np.uint8)
    ann[:4, :4] = 255
    ann[4:, 4:6] = 255           # exactly half of the block
    ann[4, 0] = 255              # a sliver
    out = tiling.reduce_annotation(ann, (2, 2), 4)
    np.testing.assert_array_equal(out, [[True, False], [False, True]])
    assert tiling.reduce_annotation(out, (2, 2), 4) is not None


def test_slide_tiles_deterministic_and_inside_tissue(tmp_path):
    img = synthetic_slide(np.random.default_rng(3), 32 * 12, 32 * 10, 32)
    a = tiling.tile_slide(img, "s", scale=32)
    b = tiling.tile_slide(img.copy(), "s", scale=32)
    assert a and a == b
    _, mask = tiling.tissue_mask(img, 32)
    for t in a:
        assert mask[t.row - 1:t.row + 2, t.col - 1:t.col + 2].all()
    p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
    tiling.write_tile_index(p1, a)
    tiling.write_tile_index(p2, b)
    assert p1.read_bytes() == p2.read_bytes()
    assert tiling.read_tile_index(p1) == a


def test_raster_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    tiling.save_raster(tmp_path / "x.png", img)
    np.testing.assert_array_equal(tiling.load_raster(tmp_path / "x.png"), img)
