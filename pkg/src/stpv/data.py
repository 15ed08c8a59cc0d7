"""Dataset tooling: bouncing-sprite sequences, IDX parsing, batching, caching.

Sprites keep continuous positions and velocities, reflect off canvas borders
so the glyph never clips, and are rendered at rounded integer positions with
per-pixel max composition. The cache format is a flat binary: magic "MMSQ",
version u8, five little-endian u32 counts/dims, then u8 frame data (x 1/255
on load).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MMSQ_MAGIC = b"MMSQ"
MMSQ_VERSION = 1


class DataFormatError(ValueError):
    """Malformed IDX or dataset-cache bytes."""


# ---------------------------------------------------------------------------
# IDX container (MNIST's format)


def parse_idx(raw: bytes) -> tuple[int, tuple[int, ...], np.ndarray]:
    """Decode an IDX payload to (count, dims, raw uint8 items)."""
    if len(raw) < 4:
        raise DataFormatError(f"IDX too short for magic: {len(raw)} bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGE_MAGIC:
        rank = 3
    elif magic == IDX_LABEL_MAGIC:
        rank = 1
    else:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}; expected images (0x{IDX_IMAGE_MAGIC:08x}) "
                              f"or labels (0x{IDX_LABEL_MAGIC:08x})")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DataFormatError(f"IDX truncated in dimension header: {len(raw)} < {header} bytes")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise DataFormatError(f"IDX payload length mismatch: expected {expected} bytes, got {actual}")
    items = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return int(dims[0]), dims, items


def serialize_idx(items: np.ndarray) -> bytes:
    """Inverse of parse_idx: rank 3 uint8 -> images, rank 1 uint8 -> labels."""
    arr = np.ascontiguousarray(items, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    elif arr.ndim == 1:
        magic = IDX_LABEL_MAGIC
    else:
        raise DataFormatError(f"IDX serialization needs rank 1 or 3, got rank {arr.ndim}")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + arr.tobytes()


def load_idx_images(path) -> np.ndarray:
    """IDX image file -> float32 array in [0, 1]."""
    count, dims, items = parse_idx(Path(path).read_bytes())
    if len(dims) != 3:
        raise DataFormatError("expected an IDX image file")
    return items.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# moving-sprite generator


@dataclass
class SpriteSpec:
    glyph: np.ndarray            # [g, g] float32 in [0, 1]
    position: np.ndarray         # (y, x), continuous
    velocity: np.ndarray         # (vy, vx) in pixels/frame


@dataclass
class DatasetSplit:
    train: np.ndarray            # [n, S, 1, H, W] float32 in [0, 1]
    test: np.ndarray
    seed: int


def synthetic_glyphs(size: int) -> list[np.ndarray]:
    """Filled square, cross, and diamond patches of the given side."""
    if size < 3:
        raise ValueError("glyph size must be >= 3")
    square = np.ones((size, size), dtype=np.float32)

    cross = np.zeros((size, size), dtype=np.float32)
    arm = max(1, size // 3)
    lo = (size - arm) // 2
    cross[lo:lo + arm, :] = 1.0
    cross[:, lo:lo + arm] = 1.0

    diamond = np.zeros((size, size), dtype=np.float32)
    c = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            if abs(i - c) + abs(j - c) <= c:
                diamond[i, j] = 1.0
    return [square, cross, diamond]


def _reflect(pos: float, vel: float, limit: float) -> tuple[float, float]:
    # mirror about the wall until the position is inside [0, limit]
    while pos < 0.0 or pos > limit:
        if pos < 0.0:
            pos = -pos
            vel = -vel
        else:
            pos = 2.0 * limit - pos
            vel = -vel
    return pos, vel


def render_sprites(sprites: list[SpriteSpec], height: int, width: int) -> np.ndarray:
    frame = np.zeros((height, width), dtype=np.float32)
    for s in sprites:
        g = s.glyph.shape[0]
        iy = int(round(float(s.position[0])))
        ix = int(round(float(s.position[1])))
        region = frame[iy:iy + g, ix:ix + g]
        np.maximum(region, s.glyph, out=region)
    return frame


def _generate_sequence(rng: np.random.Generator, seq_len: int, height: int, width: int,
                       n_sprites: int, speed_range: tuple[float, float],
                       glyphs: list[np.ndarray]) -> np.ndarray:
    sprites = []
    for _ in range(n_sprites):
        glyph = glyphs[rng.integers(len(glyphs))]
        g = glyph.shape[0]
        if g > height or g > width:
            raise ValueError(f"glyph {g}x{g} larger than canvas {height}x{width}")
        pos = np.array([rng.uniform(0, height - g), rng.uniform(0, width - g)])
        speed = rng.uniform(*speed_range)
        angle = rng.uniform(0, 2 * np.pi)
        vel = np.array([speed * np.sin(angle), speed * np.cos(angle)])
        sprites.append(SpriteSpec(glyph, pos, vel))

    frames = np.zeros((seq_len, 1, height, width), dtype=np.float32)
    for t in range(seq_len):
        frames[t, 0] = render_sprites(sprites, height, width)
        for s in sprites:
            g = s.glyph.shape[0]
            for axis, limit in ((0, height - g), (1, width - g)):
                p, v = _reflect(s.position[axis] + s.velocity[axis], s.velocity[axis], limit)
                s.position[axis] = p
                s.velocity[axis] = v
    return frames


def _generate_block(seed, count, seq_len, height, width, n_sprites, speed_range, glyphs):
    out = np.zeros((count, seq_len, 1, height, width), dtype=np.float32)
    rng = np.random.default_rng(seed)
    for i in range(count):
        out[i] = _generate_sequence(rng, seq_len, height, width, n_sprites, speed_range, glyphs)
    return out


def generate_moving_sequences(train_count: int, test_count: int, seq_len: int,
                              height: int, width: int, n_sprites: int,
                              speed_range: tuple[float, float], seed: int,
                              glyphs: list[np.ndarray] | None = None) -> DatasetSplit:
    """Bouncing-sprite split; train and test draw from disjoint seed streams."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    if glyphs is None:
        glyphs = synthetic_glyphs(max(3, height // 4))
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    train = _generate_block(train_seed, train_count, seq_len, height, width,
                            n_sprites, speed_range, glyphs)
    test = _generate_block(test_seed, test_count, seq_len, height, width,
                           n_sprites, speed_range, glyphs)
    return DatasetSplit(train=train, test=test, seed=seed)


# ---------------------------------------------------------------------------
# batching


def batches(items: np.ndarray, batch_size: int, rng: np.random.Generator):
    """One shuffled epoch over axis 0; the final partial batch is emitted."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield items[order[start:start + batch_size]]


def endless_batches(items: np.ndarray, batch_size: int, seed: int):
    """Epoch after epoch of `batches`, reshuffled deterministically per epoch."""
    epoch = 0
    while True:
        yield from batches(items, batch_size, np.random.default_rng([seed, epoch]))
        epoch += 1


# ---------------------------------------------------------------------------
# dataset cache


def save_sequences(path, frames: np.ndarray) -> None:
    """Quantize [n,S,C,H,W] floats in [0,1] to u8 and write the MMSQ container."""
    if frames.ndim != 5:
        raise DataFormatError(f"expected [n,S,C,H,W] frames, got shape {frames.shape}")
    u8 = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = MMSQ_MAGIC + bytes([MMSQ_VERSION]) + struct.pack("<5I", *u8.shape)
    Path(path).write_bytes(header + u8.tobytes())


def load_sequences(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 25:
        raise DataFormatError(f"cache too short ({len(raw)} bytes) for header")
    if raw[:4] != MMSQ_MAGIC:
        raise DataFormatError(f"bad cache magic {raw[:4]!r}, expected {MMSQ_MAGIC!r}")
    if raw[4] != MMSQ_VERSION:
        raise DataFormatError(f"unsupported cache version {raw[4]}")
    shape = struct.unpack("<5I", raw[5:25])
    expected = int(np.prod(shape, dtype=np.int64))
    actual = len(raw) - 25
    if actual != expected:
        raise DataFormatError(f"cache payload mismatch: expected {expected} bytes, got {actual}")
    u8 = np.frombuffer(raw, dtype=np.uint8, offset=25).reshape(shape)
    return u8.astype(np.float32) / 255.0
