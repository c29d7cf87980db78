import itertools

import numpy as np
import pytest

from addlab.errors import CanvasTooSmall, GlyphError
from addlab.glyphs import (
    AdditionKey,
    RenderConfig,
    auto_scale,
    glyph_for,
    render_formula,
    write_pgm,
)

CHARS = "0123456789+"


def test_eleven_glyphs_all_inked():
    for c in CHARS:
        g = glyph_for(c).as_array()
        assert g.shape == (7, 5)
        assert g.any()


def test_plus_is_centred_cross():
    g = glyph_for("+").as_array()
    assert np.array_equal(g, g[:, ::-1])
    assert np.array_equal(g, g[::-1, :])
    assert g[3].all() and g[1:6, 2].all()


def test_eight_is_mirror_symmetric():
    g = glyph_for("8").as_array()
    assert np.array_equal(g, g[:, ::-1])


def test_glyphs_are_distinct():
    arrays = [glyph_for(c).as_array().tobytes() for c in CHARS]
    assert len(set(arrays)) == len(CHARS)


@pytest.mark.parametrize("c", ["x", " ", "-", "a"])
def test_unsupported_glyph(c):
    with pytest.raises(GlyphError, match="unsupported glyph"):
        glyph_for(c)


@pytest.mark.parametrize(
    "n_max, width, margin, expected",
    [
        # "99+99": 5 glyphs -> 5*5 + 4 gap columns = 29 cells wide
        (99, 224, 8, 208 // 29),
        (99, 64, 2, 60 // 29),
        (9, 64, 2, 60 // 17),
        (299, 224, 8, 208 // 41),
    ],
)
def test_auto_scale(n_max, width, margin, expected):
    cfg = RenderConfig(width=width, height=width, margin=margin)
    assert auto_scale(n_max, cfg) == expected


def test_auto_scale_values_from_hand_evaluation():
    assert auto_scale(99, RenderConfig(224, 224, 8)) == 7
    assert auto_scale(99, RenderConfig(64, 64, 2)) == 2


def test_canvas_too_small():
    # "299+299" has 7 glyphs: 35 + 6 = 41 columns > 16 - 4
    with pytest.raises(CanvasTooSmall, match="canvas too small"):
        auto_scale(299, RenderConfig(16, 16, 2))


def test_vertical_fit_limits_scale():
    cfg = RenderConfig(width=224, height=20, margin=2)
    assert auto_scale(9, cfg) == 2  # 7 * 2 <= 16 < 7 * 3


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(ink=10, background=10)
    with pytest.raises(ValueError):
        RenderConfig(scale=0)


def test_square_presets():
    assert RenderConfig.square(224).margin == 8
    assert RenderConfig.square(64).margin == 2


def _ink_bbox(arr, ink):
    rows = np.flatnonzero((arr == ink).any(axis=1))
    cols = np.flatnonzero((arr == ink).any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def test_render_six_plus_nineteen_layout():
    cfg = RenderConfig.square(224)
    img = render_formula(AdditionKey(6, 19), cfg, n_max=99)
    arr = img.as_array()
    assert arr.shape == (224, 224)
    top, bottom, left, right = _ink_bbox(arr, 0)
    # 7 scale-7 rows of ink, centred
    assert bottom - top + 1 == 49
    assert abs((top + bottom) / 2 - 111.5) <= 1
    assert abs((left + right) / 2 - 111.5) <= 1


def test_render_zero_plus_zero_symmetric():
    cfg = RenderConfig.square(64)
    arr = render_formula(AdditionKey(0, 0), cfg, n_max=9).as_array()
    top, bottom, left, right = _ink_bbox(arr, 0)
    block = arr[top : bottom + 1, left : right + 1]
    assert np.array_equal(block, block[:, ::-1])


def test_render_is_deterministic():
    cfg = RenderConfig.square(64)
    a = render_formula(AdditionKey(12, 7), cfg, n_max=29)
    b = render_formula(AdditionKey(12, 7), cfg, n_max=29)
    assert a.pixels == b.pixels


@pytest.mark.parametrize("size", [64, 224])
def test_only_two_pixel_values_and_centred(size):
    cfg = RenderConfig.square(size)
    for n, m in [(0, 0), (1, 0), (0, 1), (11, 1), (29, 7), (20, 29)]:
        arr = render_formula(AdditionKey(n, m), cfg, n_max=29).as_array()
        assert set(np.unique(arr)) == {cfg.ink, cfg.background}
        top, bottom, left, right = _ink_bbox(arr, cfg.ink)
        assert abs((top + bottom) / 2 - (size - 1) / 2) <= 1
        assert abs((left + right) / 2 - (size - 1) / 2) <= 1


def test_odd_free_space_goes_right():
    # "1+1" at scale 1 has an odd ink width; the spare pixel must sit on the right
    cfg = RenderConfig(width=20, height=9, margin=0, scale=1)
    arr = render_formula(AdditionKey(1, 1), cfg, n_max=1).as_array()
    top, bottom, left, right = _ink_bbox(arr, cfg.ink)
    assert (right - left + 1) % 2 == 1
    assert left == (20 - (right - left + 1)) // 2
    assert top == 1 and bottom == 7


def test_all_images_distinct_up_to_29():
    cfg = RenderConfig.square(64)
    seen = set()
    for n, m in itertools.product(range(30), repeat=2):
        seen.add(render_formula(AdditionKey(n, m), cfg, n_max=29).pixels)
    assert len(seen) == 900


def test_inverted_polarity():
    cfg = RenderConfig.square(64, ink=255, background=0)
    arr = render_formula(AdditionKey(3, 4), cfg, n_max=9).as_array()
    assert arr[0, 0] == 0 and arr.max() == 255


def test_write_pgm(tmp_path):
    img = render_formula(AdditionKey(6, 19), RenderConfig.square(64), n_max=99)
    path = tmp_path / "img.pgm"
    write_pgm(img, path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n64 64\n255\n")
    assert data[len(b"P5\n64 64\n255\n"):] == img.pixels
