"""The closed image set of all formulas n+m with 0 <= n, m <= N.

Packed ``.apack`` layout (little-endian)::

    "ADDI" | u16 version=1 | u16 N | u16 width | u16 height | u8 ink | u8 background | u32 count
    count x ( u16 n | u16 m | u16 label | width*height u8 pixels )
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, ChecksumMismatch, TruncatedFile, VersionMismatch
from .glyphs import AdditionKey, Image, RenderConfig, render_array, resolve_scale

MAGIC = b"ADDI"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHBBI")
_RECORD_HEAD = struct.Struct("<HHH")


def label_of(key) -> int:
    return key[0] + key[1]


def class_size(k: int, n_max: int) -> int:
    """Number of ordered pairs in the set whose sum is k."""
    if not 0 <= k <= 2 * n_max:
        raise ValueError(f"label {k} outside 0..{2 * n_max}")
    return min(k, 2 * n_max - k) + 1


def all_keys(n_max: int) -> list[AdditionKey]:
    return [AdditionKey(n, m) for n in range(n_max + 1) for m in range(n_max + 1)]


def key_index(key, n_max: int) -> int:
    """Position of ``key`` in the canonical (n, m) lexicographic order."""
    return key[0] * (n_max + 1) + key[1]


@dataclass
class ImageSet:
    n_max: int
    render_cfg: RenderConfig
    keys: list[AdditionKey]
    labels: np.ndarray  # int64, (count,)
    pixels: np.ndarray  # uint8, (count, height, width)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def num_classes(self) -> int:
        return 2 * self.n_max + 1

    @property
    def examples(self):
        h, w = self.pixels.shape[1:]
        for i, key in enumerate(self.keys):
            yield key, int(self.labels[i]), Image(w, h, self.pixels[i].tobytes())

    def index_of(self, key) -> int:
        n, m = key
        if not (0 <= n <= self.n_max and 0 <= m <= self.n_max):
            raise KeyError(f"key {tuple(key)} outside [0,{self.n_max}]^2")
        return key_index(key, self.n_max)

    def image(self, key) -> np.ndarray:
        return self.pixels[self.index_of(key)]

    def inputs(self, indices) -> np.ndarray:
        """Network inputs for the given record indices: (B, 1, H, W) float32 in [0, 1]."""
        return (self.pixels[indices].astype(np.float32) / 255.0)[:, None, :, :]

    def digest(self) -> str:
        """Content digest over the packed header fields and every pixel."""
        h = hashlib.sha256()
        cfg = self.render_cfg
        h.update(_HEADER.pack(MAGIC, VERSION, self.n_max, cfg.width, cfg.height,
                              cfg.ink, cfg.background, len(self.keys)))
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageSet):
            return NotImplemented
        return (
            self.n_max == other.n_max
            and self.render_cfg == other.render_cfg
            and self.keys == other.keys
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.pixels, other.pixels)
        )


def build_image_set(n_max: int, cfg: RenderConfig) -> ImageSet:
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if n_max > 0xFFFF // 2:
        raise ValueError("n_max too large for the packed format")
    scale = resolve_scale(cfg, n_max)
    keys = all_keys(n_max)
    pixels = np.empty((len(keys), cfg.height, cfg.width), dtype=np.uint8)
    for i, key in enumerate(keys):
        pixels[i] = render_array(key, cfg, scale)
    labels = np.array([label_of(k) for k in keys], dtype=np.int64)
    return ImageSet(n_max, cfg, keys, labels, pixels)


def encode_packed(image_set: ImageSet) -> bytes:
    cfg = image_set.render_cfg
    count = len(image_set)
    head = _HEADER.pack(MAGIC, VERSION, image_set.n_max, cfg.width, cfg.height,
                        cfg.ink, cfg.background, count)
    rec_dtype = np.dtype([("head", "<u2", 3), ("pix", "u1", cfg.width * cfg.height)])
    records = np.empty(count, dtype=rec_dtype)
    records["head"][:, 0] = [k.n for k in image_set.keys]
    records["head"][:, 1] = [k.m for k in image_set.keys]
    records["head"][:, 2] = image_set.labels
    records["pix"] = image_set.pixels.reshape(count, -1)
    body = head + records.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_packed(image_set: ImageSet, path) -> None:
    Path(path).write_bytes(encode_packed(image_set))


def decode_packed(data: bytes) -> ImageSet:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile("truncated in header")
    _, version, n_max, width, height, ink, background, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"version mismatch: file has {version}, reader supports {VERSION}")
    rec_size = _RECORD_HEAD.size + width * height
    body_end = _HEADER.size + count * rec_size
    if len(data) < body_end:
        i = (len(data) - _HEADER.size) // rec_size
        raise TruncatedFile(f"truncated at record {i}")
    if len(data) < body_end + 4:
        raise TruncatedFile("truncated in checksum")
    (stored,) = struct.unpack_from("<I", data, body_end)
    actual = zlib.crc32(data[:body_end])
    if stored != actual:
        raise ChecksumMismatch(f"checksum mismatch: stored {stored:08x}, computed {actual:08x}")
    rec_dtype = np.dtype([("head", "<u2", 3), ("pix", "u1", width * height)])
    records = np.frombuffer(data, dtype=rec_dtype, count=count, offset=_HEADER.size)
    heads = records["head"].astype(np.int64)
    keys = [AdditionKey(int(n), int(m)) for n, m in heads[:, :2]]
    pixels = records["pix"].reshape(count, height, width).copy()
    # margin/gap/scale are not part of the file; they come back as the square-canvas preset
    cfg = RenderConfig.square(width, height=height, ink=ink, background=background)
    return ImageSet(n_max, cfg, keys, heads[:, 2].copy(), pixels)


def read_packed(path) -> ImageSet:
    return decode_packed(Path(path).read_bytes())
