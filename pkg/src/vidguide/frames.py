"""Frame-sequence I/O: binary PPM (P6, maxval 255) files on disk,
float64 arrays in [0, 1] in memory, named frame_00001.ppm onward."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

DEFAULT_PATTERN = "frame_%05d.ppm"


class FrameIOError(ValueError):
    """Raised for malformed or missing frame files."""


def validate_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise FrameIOError(f"{name}: expected shape (H, W, 3), got {f.shape}")
    if not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0:
        raise FrameIOError(f"{name}: values must lie in [0, 1]")
    return f


def _read_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FrameIOError(f"{path}: truncated PPM header")
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FrameIOError(f"{path}: file not found")
    if data[:2] != b"P6":
        raise FrameIOError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos, path)
        if not token.isdigit():
            raise FrameIOError(f"{path}: malformed PPM header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise FrameIOError(f"{path}: unsupported maxval {maxval} (expected 255)")
    if width < 1 or height < 1:
        raise FrameIOError(f"{path}: invalid dimensions {width}x{height}")
    pos += 1  # single whitespace after maxval
    expected = height * width * 3
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise FrameIOError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def write_ppm(path, frame: np.ndarray) -> None:
    f = validate_frame(frame, str(path))
    h, w, _ = f.shape
    pixels = np.clip(np.rint(f * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.fullmatch(r"(.*)%0(\d+)d(.*)", pattern)
    if m is None:
        raise FrameIOError(f"unsupported frame pattern {pattern!r}")
    prefix, digits, suffix = m.group(1), int(m.group(2)), m.group(3)
    return re.compile(re.escape(prefix) + rf"(\d{{{digits}}})" + re.escape(suffix))


def read_frames(directory, pattern: str = DEFAULT_PATTERN) -> list[np.ndarray]:
    """Read a contiguous sequence starting at index 1; gaps are errors."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameIOError(f"{directory}: not a directory")
    regex = _pattern_regex(pattern)
    found = set()
    for entry in directory.iterdir():
        m = regex.fullmatch(entry.name)
        if m:
            found.add(int(m.group(1)))
    if not found:
        raise FrameIOError(f"{directory}: no frames matching {pattern!r}")
    top = max(found)
    missing = sorted(set(range(1, top + 1)) - found)
    if missing:
        raise FrameIOError(f"{directory}: missing frame file {pattern % missing[0]}")
    frames = [read_ppm(directory / (pattern % i)) for i in range(1, top + 1)]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise FrameIOError(f"{directory}: inconsistent frame dimensions {sorted(shapes)}")
    return frames


def write_frames(frames, directory, pattern: str = DEFAULT_PATTERN) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames, start=1):
        write_ppm(directory / (pattern % i), frame)
