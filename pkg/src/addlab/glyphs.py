"""Rasterize "n+m" formula strings with a built-in 5x7 dot-matrix font."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

from .errors import CanvasTooSmall, GlyphError

GLYPH_W = 5
GLYPH_H = 7

_FONT = {
    "0": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "+": ("00000", "00100", "00100", "11111", "00100", "00100", "00000"),
}


class AdditionKey(NamedTuple):
    """One formula image n+m. (n, m) and (m, n) are distinct keys."""

    n: int
    m: int


@dataclass(frozen=True)
class GlyphBitmap:
    char: str
    rows: tuple[str, ...]

    def as_array(self) -> np.ndarray:
        return np.array([[c == "1" for c in row] for row in self.rows], dtype=bool)


def glyph_for(c: str) -> GlyphBitmap:
    try:
        return GlyphBitmap(c, _FONT[c])
    except KeyError:
        raise GlyphError(f"unsupported glyph {c!r}") from None


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 64
    margin: int = 2
    gap_cells: int = 1
    ink: int = 0
    background: int = 255
    scale: Union[int, str] = "auto"

    def __post_init__(self):
        if self.ink == self.background:
            raise ValueError("ink and background must differ")
        for name in ("ink", "background"):
            if not 0 <= getattr(self, name) <= 255:
                raise ValueError(f"{name} must be a u8 value")
        if self.width < 1 or self.height < 1 or self.margin < 0 or self.gap_cells < 0:
            raise ValueError("canvas dimensions must be positive and margin/gap non-negative")
        if self.scale != "auto" and (not isinstance(self.scale, int) or self.scale < 1):
            raise ValueError(f"scale must be a positive integer or 'auto', got {self.scale!r}")

    @classmethod
    def square(cls, size: int, **overrides) -> "RenderConfig":
        """Preset for a size x size canvas: 224 gets margin 8, 64 gets margin 2."""
        fields = dict(width=size, height=size, margin=max(2, size // 28))
        fields.update(overrides)
        return cls(**fields)


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: bytes

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)


def formula_string(key: AdditionKey) -> str:
    return f"{key[0]}+{key[1]}"


def _block_width(glyphs: int, gap_cells: int) -> int:
    return GLYPH_W * glyphs + gap_cells * (glyphs - 1)


def auto_scale(n_max: int, cfg: RenderConfig) -> int:
    """Largest integer scale at which "n_max+n_max" fits inside the margins."""
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    g = len(formula_string((n_max, n_max)))
    cell_w = _block_width(g, cfg.gap_cells)
    s = min((cfg.width - 2 * cfg.margin) // cell_w, (cfg.height - 2 * cfg.margin) // GLYPH_H)
    if s < 1:
        raise CanvasTooSmall(
            f"canvas too small for N={n_max}: {g} glyphs need at least "
            f"{cell_w + 2 * cfg.margin}x{GLYPH_H + 2 * cfg.margin} px"
        )
    return s


def resolve_scale(cfg: RenderConfig, n_max: int) -> int:
    fit = auto_scale(n_max, cfg)
    if cfg.scale == "auto":
        return fit
    if cfg.scale > fit:
        raise CanvasTooSmall(f"canvas too small for N={n_max} at scale {cfg.scale} (max {fit})")
    return cfg.scale


@lru_cache(maxsize=None)
def _text_mask(text: str, gap_cells: int) -> np.ndarray:
    """Unscaled ink mask of ``text``, cropped to its ink bounding box."""
    mask = np.zeros((GLYPH_H, _block_width(len(text), gap_cells)), dtype=bool)
    for i, c in enumerate(text):
        x = i * (GLYPH_W + gap_cells)
        mask[:, x : x + GLYPH_W] = glyph_for(c).as_array()
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def render_array(key: AdditionKey, cfg: RenderConfig, scale: int) -> np.ndarray:
    mask = _text_mask(formula_string(key), cfg.gap_cells)
    if scale > 1:
        mask = np.kron(mask, np.ones((scale, scale), dtype=bool))
    h, w = mask.shape
    if h > cfg.height or w > cfg.width:
        raise CanvasTooSmall(f"{formula_string(key)!r} does not fit at scale {scale}")
    # odd free space: the extra pixel goes right / bottom
    top = (cfg.height - h) // 2
    left = (cfg.width - w) // 2
    out = np.full((cfg.height, cfg.width), cfg.background, dtype=np.uint8)
    out[top : top + h, left : left + w][mask] = cfg.ink
    return out


def render_formula(key: AdditionKey, cfg: RenderConfig, n_max: int | None = None) -> Image:
    """Draw "n+m" centred on the canvas.

    The scale is fixed by the owning set's ``n_max`` so every image of a set
    shares one glyph size; without it the key's own larger operand is used.
    """
    n, m = key
    if n < 0 or m < 0:
        raise ValueError(f"operands must be non-negative, got {key}")
    scale = resolve_scale(cfg, max(n, m) if n_max is None else n_max)
    arr = render_array(AdditionKey(n, m), cfg, scale)
    return Image(cfg.width, cfg.height, arr.tobytes())


def write_pgm(image: Image, path) -> None:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels)
