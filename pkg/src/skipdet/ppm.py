"""Binary portable pixmap I/O (P6 color, P5 grayscale, 8-bit) and frame
directory handling. Pixels map to [0,1] by division by 255.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .motion import Frame
from .tensor import Tensor

__all__ = ["frame_from_image", "list_frame_files", "load_frames", "read_ppm",
           "save_frames", "write_ppm"]


def write_ppm(path, image: np.ndarray) -> None:
    """Write a uint8 [H,W] or [H,W,1|3] array as P5/P6 with maxval 255."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be [H,W] or [H,W,1|3], got shape {arr.shape}")
    h, w, c = arr.shape
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P5/P6 file into a uint8 [H,W,C] array."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        channels = 3
    elif data[:2] == b"P5":
        channels = 1
    else:
        raise ValueError(f"{path}: not a binary PPM/PGM file (magic {data[:2]!r})")
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported, maxval={maxval}")
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster truncated, expected {need} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)


def frame_from_image(index: int, image: np.ndarray) -> Frame:
    """uint8 [H,W,C] to a Frame with float pixels in [0,1], [C,H,W]."""
    pixels = image.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return Frame(index=index, pixels=Tensor(pixels))


_FRAME_NUM = re.compile(r"(\d+)")


def list_frame_files(directory) -> list[tuple[int, Path]]:
    """(index, path) pairs for *.ppm/*.pgm files, sorted by filename.

    The index is the trailing number in the stem when present, else the
    1-based position in sorted order.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".ppm", ".pgm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm frames in {directory}")
    out = []
    for n, p in enumerate(paths, start=1):
        numbers = _FRAME_NUM.findall(p.stem)
        out.append((int(numbers[-1]) if numbers else n, p))
    return out


def load_frames(directory) -> list[Frame]:
    return [frame_from_image(idx, read_ppm(path))
            for idx, path in list_frame_files(directory)]


def save_frames(directory, images: list[np.ndarray], start_index: int = 1) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for offset, image in enumerate(images):
        path = directory / f"frame_{start_index + offset:06d}.ppm"
        write_ppm(path, image)
        paths.append(path)
    return paths
