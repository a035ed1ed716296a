"""Clip loading, temporal sampling, and preprocessing.

Supported sources:
  - ``.y8seq`` files: magic ``Y8SQ``, then width, height, frame_count as
    32-bit little-endian unsigned integers, then frames concatenated
    row-major as raw u8 intensities (16-byte header total).
  - directories of binary PGM (P5) frames, sorted lexicographically by
    filename. Binary PPM (P6) frames are accepted and converted to
    luminance with BT.601 weights (0.299, 0.587, 0.114), rounded.

Everything downstream consumes fixed-shape grayscale sequences, so color
never survives past this module.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgme._resample import resize_bilinear
from dgme.errors import DataError

Y8SEQ_MAGIC = b"Y8SQ"

# BT.601 luma weights for PPM conversion
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class FrameSequence:
    """A sampled grayscale clip: frames stacked as a (F, H, W) u8 array."""

    frames: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (F, H, W), got shape {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if self.frames.shape[0] < 2:
            raise ValueError("a clip needs at least 2 frames (flow needs one frame pair)")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class SamplingSpec:
    """Temporal sampling and spatial target for clip loading."""

    frames_per_clip: int = 12
    frame_interval: int = 6
    target_size: int = 224

    def __post_init__(self):
        if self.frames_per_clip < 2:
            raise ValueError("frames_per_clip must be >= 2")
        if self.frame_interval < 1:
            raise ValueError("frame_interval must be >= 1")
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")

    @property
    def required_source_frames(self) -> int:
        return (self.frames_per_clip - 1) * self.frame_interval + 1


@dataclass
class AugmentSpec:
    """Training-time augmentation: clip-consistent scale crop plus
    brightness/contrast jitter, deterministic given (rng_seed, clip_id)."""

    enabled: bool = True
    scale_range: tuple[float, float] = (1.0, 1.0)
    brightness_jitter: float = 0.0
    contrast_jitter: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < low <= high")
        for name in ("brightness_jitter", "contrast_jitter"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{name} must be in [0, 1)")


def write_y8seq(seq: FrameSequence, path) -> None:
    """Write a clip in the bit-exact ``.y8seq`` binary format."""
    path = Path(path)
    header = Y8SEQ_MAGIC + struct.pack(
        "<III", seq.width, seq.height, seq.frame_count
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(seq.frames.tobytes(order="C"))


def read_y8seq(path) -> FrameSequence:
    """Read a ``.y8seq`` clip; errors name expected vs actual byte counts."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"clip file not found: {path}")
    data = path.read_bytes()
    if len(data) < 16:
        raise DataError(f"truncated y8seq header in {path}: expected 16 bytes, have {len(data)}")
    if data[:4] != Y8SEQ_MAGIC:
        raise DataError(f"bad magic in {path}: expected {Y8SEQ_MAGIC!r}, got {data[:4]!r}")
    width, height, count = struct.unpack("<III", data[4:16])
    expected = 16 + width * height * count
    if len(data) != expected:
        raise DataError(
            f"truncated y8seq payload in {path}: expected {expected} bytes, have {len(data)}"
        )
    frames = np.frombuffer(data[16:], dtype=np.uint8).reshape(count, height, width)
    return FrameSequence(frames.copy(), clip_id=path.stem)


def _read_pnm(path: Path) -> np.ndarray:
    """Read one binary PGM (P5) or PPM (P6) frame as a grayscale u8 array."""
    data = path.read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"unsupported PNM type in {path}: {data[:2]!r}")
    color = data[:2] == b"P6"

    # header tokens: type, width, height, maxval; '#' comments run to EOL
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"malformed PNM header in {path}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"malformed PNM header in {path}: {exc}") from exc
    if maxval != 255:
        raise DataError(f"unsupported PNM maxval {maxval} in {path} (only 255)")

    channels = 3 if color else 1
    expected = width * height * channels
    raw = data[pos : pos + expected]
    if len(raw) != expected:
        raise DataError(
            f"truncated PNM payload in {path}: expected {expected} bytes, have {len(raw)}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8)
    if color:
        rgb = pixels.reshape(height, width, 3).astype(np.float64)
        return np.round(rgb @ _LUMA).clip(0, 255).astype(np.uint8)
    return pixels.reshape(height, width).copy()


def _read_frame_dir(path: Path) -> np.ndarray:
    names = sorted(
        p for p in path.iterdir() if p.suffix.lower() in (".pgm", ".ppm")
    )
    if not names:
        raise DataError(f"no PGM/PPM frames found in {path}")
    frames = [_read_pnm(p) for p in names]
    shape = frames[0].shape
    for p, f in zip(names, frames):
        if f.shape != shape:
            raise DataError(f"frame size mismatch in {path}: {p.name} is {f.shape}, expected {shape}")
    return np.stack(frames)


def _resize_shorter_side(frame: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize so the shorter side equals ``target`` exactly."""
    h, w = frame.shape
    if min(h, w) == target:
        out_h, out_w = h, w
    elif h <= w:
        out_h = target
        out_w = max(target, int(round(w * target / h)))
    else:
        out_w = target
        out_h = max(target, int(round(h * target / w)))
    if (out_h, out_w) == (h, w):
        return frame.astype(np.float64)
    return resize_bilinear(frame.astype(np.float64), out_h, out_w)


def _center_crop(frame: np.ndarray, size: int) -> np.ndarray:
    h, w = frame.shape
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    return frame[y0 : y0 + size, x0 : x0 + size]


def load_clip(path, spec: SamplingSpec) -> FrameSequence:
    """Load, temporally sample, resize, and center-crop a clip.

    Frames are taken at stride ``frame_interval`` starting at source frame
    0, each resized so the shorter side equals ``target_size``, then
    center-cropped to a square. Pure function of (file bytes, spec).
    """
    path = Path(path)
    if path.is_dir():
        source = _read_frame_dir(path)
        clip_id = path.name
    else:
        src_seq = read_y8seq(path)
        source = src_seq.frames
        clip_id = src_seq.clip_id

    need = spec.required_source_frames
    have = source.shape[0]
    if have < need:
        raise DataError(f"insufficient frames: need {need}, have {have}")

    indices = np.arange(spec.frames_per_clip) * spec.frame_interval
    out = []
    for idx in indices:
        frame = _resize_shorter_side(source[idx], spec.target_size)
        frame = _center_crop(frame, spec.target_size)
        out.append(np.round(frame).clip(0, 255).astype(np.uint8))
    return FrameSequence(np.stack(out), clip_id=clip_id)


def _clip_rng(seed: int, clip_id: str) -> np.random.Generator:
    """Per-clip RNG derived from a stable hash of (seed, clip_id)."""
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def preprocess_train(seq: FrameSequence, aug: AugmentSpec) -> FrameSequence:
    """Apply one clip-consistent random scale crop and intensity jitter.

    Every frame of the clip receives the same transform; the transform is
    deterministic given (aug.rng_seed, seq.clip_id). Output keeps the
    input frame size. Contrast is multiplicative about 128, brightness is
    additive, so each pixel maps to clamp(round(p * c + b)) for
    clip-constant c and b.
    """
    if not aug.enabled:
        raise ValueError("preprocess_train requires aug.enabled")
    rng = _clip_rng(aug.rng_seed, seq.clip_id)
    size = seq.height
    if seq.width != size:
        raise DataError(f"preprocess_train expects square frames, got {seq.height}x{seq.width}")

    # draw order is part of the determinism contract: scale, x, y, contrast, brightness
    lo, hi = aug.scale_range
    scale = float(rng.uniform(lo, hi))
    crop = min(size, max(1, int(round(size * scale))))
    max_off = size - crop
    x0 = int(rng.integers(0, max_off + 1))
    y0 = int(rng.integers(0, max_off + 1))
    contrast = 1.0 + float(rng.uniform(-aug.contrast_jitter, aug.contrast_jitter))
    brightness = float(rng.uniform(-aug.brightness_jitter, aug.brightness_jitter)) * 255.0

    out = []
    for frame in seq.frames:
        f = frame[y0 : y0 + crop, x0 : x0 + crop].astype(np.float64)
        if crop != size:
            f = resize_bilinear(f, size, size)
        f = contrast * (f - 128.0) + 128.0 + brightness
        out.append(np.round(f).clip(0, 255).astype(np.uint8))
    return FrameSequence(np.stack(out), clip_id=seq.clip_id)
