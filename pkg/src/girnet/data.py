"""Clip I/O (binary PPM frame directories), bicubic resizing, the space-time
degradation model and training patch sampling."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FRAME_RE = re.compile(r"^frame_(\d{6})\.ppm$")
LR_PATCH = 32
HR_WINDOW = 7


class DataError(ValueError):
    """Malformed or missing clip data."""


@dataclass
class VideoClip:
    """Ordered RGB frames of shape (3, H, W) with values in [0, 1]."""

    frames: list[np.ndarray]
    frame_rate: float | None = None

    def __post_init__(self):
        if not self.frames:
            raise DataError("clip has no frames")
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[0] != 3:
            raise DataError(f"frames must be (3, H, W), got {shape}")
        for f in self.frames[1:]:
            if f.shape != shape:
                raise DataError(f"frame shapes differ: {shape} vs {f.shape}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]

    def array(self) -> np.ndarray:
        """Frames stacked to (T, 3, H, W)."""
        return np.stack(self.frames)


@dataclass
class PatchSample:
    lr: list[np.ndarray]
    hr: list[np.ndarray]
    source_id: str = ""
    origin: tuple[int, int, int] = (0, 0, 0)  # (t0, y0, x0) in the HR clip
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a binary P6 image with maxval 255 into a (3, H, W) uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"not a binary PPM (P6) file: magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise DataError(f"bad PPM header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}, only 255 is accepted")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    pixels = buf[pos : pos + need]
    if len(pixels) != need:
        raise DataError(f"truncated PPM: expected {need} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Encode a (3, H, W) uint8 array as binary P6."""
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"encode_ppm expects (3, H, W) uint8, got {rgb.shape} {rgb.dtype}")
    _, h, w = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes()


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] float -> uint8 with round-half-up."""
    return np.floor(np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_frame(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes()).astype(np.float32) / 255.0


def write_frame(path, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(quantize(frame)))


def frame_name(i: int) -> str:
    return f"frame_{i:06d}.ppm"


def load_clip(directory) -> VideoClip:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"clip directory not found: {directory}")
    indices = sorted(int(m.group(1)) for m in map(FRAME_RE.match, os.listdir(directory)) if m)
    if not indices:
        raise DataError(f"no frames found in {directory}")
    for expected, got in enumerate(indices):
        if expected != got:
            raise DataError(f"missing frame index {expected} in {directory}")
    return VideoClip([read_frame(directory / frame_name(i)) for i in indices])


def save_clip(clip: VideoClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        write_frame(directory / frame_name(i), f)


def read_manifest(path) -> list[Path]:
    """Clip directories listed one per line; relative entries resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            entries.append(p if p.is_absolute() else base / p)
    return entries


# ---------------------------------------------------------------------------
# bicubic resize

CUBIC_A = -0.5


def cubic_weight(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """(n_out, n_in) linear map of a 1-D cubic resample with edge clamping."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    for k in range(-1, 3):
        idx = base + k
        wts = cubic_weight(src - idx, a)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    return m


def bicubic_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable cubic (a = -0.5) resample of a (C, H, W) frame, unclamped."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = frame.shape
    mh = resize_matrix(h, out_h)
    mw = resize_matrix(w, out_w)
    out = np.einsum("oh,chw,pw->cop", mh, frame.astype(np.float64), mw, optimize=True)
    return out.astype(frame.dtype)


def degrade_clip(hr: VideoClip, scale: int) -> VideoClip:
    """Drop every second frame (keep 0, 2, 4, ...) and bicubic-downscale by ``scale``."""
    n = len(hr)
    if n % 2 == 0:
        raise DataError(f"degradation needs an odd frame count, got {n}")
    h, w = hr.size
    if h % scale or w % scale:
        raise DataError(f"frame size {h}x{w} not divisible by scale {scale}")
    kept = hr.frames[0::2]
    return VideoClip([np.clip(bicubic_resize(f, h // scale, w // scale), 0.0, 1.0) for f in kept])


def random_patch(hr: VideoClip, scale: int, seed, source_id: str = "") -> PatchSample:
    """Crop a 7-frame, (32*scale)^2 window and degrade it to 4 LR frames of 32^2."""
    size = LR_PATCH * scale
    h, w = hr.size
    if len(hr) < HR_WINDOW or h < size or w < size:
        raise DataError(
            f"clip {source_id or '?'} too small for a patch: {len(hr)} frames of {h}x{w}, "
            f"need {HR_WINDOW} frames of at least {size}x{size}"
        )
    rng = np.random.default_rng(seed)
    t0 = int(rng.integers(0, len(hr) - HR_WINDOW + 1))
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    crop = VideoClip([f[:, y0 : y0 + size, x0 : x0 + size] for f in hr.frames[t0 : t0 + HR_WINDOW]])
    lr = degrade_clip(crop, scale)
    return PatchSample(lr.frames, crop.frames, source_id, (t0, y0, x0))


def stack_batch(samples: Sequence[PatchSample], dtype=np.float32) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-time-step (N, 3, H, W) arrays for LR inputs and HR targets."""
    lr = [np.stack([s.lr[t] for s in samples]).astype(dtype) for t in range(len(samples[0].lr))]
    hr = [np.stack([s.hr[t] for s in samples]).astype(dtype) for t in range(len(samples[0].hr))]
    return lr, hr


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_clip(seed: int, n_frames: int = HR_WINDOW, size: int = 64) -> VideoClip:
    """Smooth colour gradients plus a sinusoidal grating, translating over time."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    velocity = rng.uniform(1.0, 3.0, size=2) * rng.choice([-1, 1], size=2)
    theta = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(1.5, 3.0) / size
    ramp_dir = rng.normal(size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    base = rng.uniform(0.3, 0.7, size=3)
    frames = []
    for t in range(n_frames):
        y = yy - velocity[0] * t
        x = xx - velocity[1] * t
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * x + np.sin(theta) * y)[None] + phase[:, None, None])
        ramp = (ramp_dir[:, 0, None, None] * y + ramp_dir[:, 1, None, None] * x) / (4 * size)
        img = base[:, None, None] + 0.25 * wave + ramp
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return VideoClip(frames)


def write_synthetic_dataset(root, n_clips: int, seed: int = 0, n_frames: int = HR_WINDOW, size: int = 64) -> Path:
    """Write ``n_clips`` synthetic clips plus a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_clips):
        d = root / f"clip_{i:03d}"
        save_clip(synthetic_clip(seed * 1000 + i, n_frames, size), d)
        lines.append(d.name)
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
