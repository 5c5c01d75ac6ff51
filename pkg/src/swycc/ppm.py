"""Binary PPM (P6, maxval 255) image I/O, dependency-free and bit-exact.

Pixels in [-1, 1] quantize linearly: byte = round((v + 1) * 127.5)
clipped to [0, 255]; reading inverts with v = byte / 127.5 - 1, so a
round trip is exact to within half a quantization step.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PpmError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PpmError(f"write_ppm expects (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    quant = np.clip(np.round((img.astype(np.float64) + 1.0) * 127.5), 0, 255)
    payload = quant.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(payload)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise PpmError(f"{path}: not a binary PPM (P6) file")
    # header: three whitespace-separated fields after the magic
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise PpmError(f"{path}: malformed header fields {fields}") from exc
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise PpmError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (img.astype(np.float32) / 127.5) - 1.0


def montage(images: list[np.ndarray], pad: int = 1) -> np.ndarray:
    """Concatenate equally sized images horizontally with a white gap."""
    if not images:
        raise PpmError("montage of zero images")
    h = images[0].shape[0]
    gap = np.ones((h, pad, 3), dtype=np.float32)
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(gap)
        parts.append(np.asarray(img, dtype=np.float32))
    return np.concatenate(parts, axis=1)
