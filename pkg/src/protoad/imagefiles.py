"""Binary PGM/PPM image files and the dataset directory layout.

Formats are byte-exact: PGM files start with ``P5\\n<W> <H>\\n255\\n`` and
PPM heatmaps with ``P6\\n<W> <H>\\n255\\n``, followed by raw 8-bit samples.

A dataset directory holds one ``<id>.pgm`` per image, ``<id>-mask.pgm``
for anomalous images (values 0/255) and a ``manifest.txt`` with one
``id,split,label,mask-filename`` record per line (``-`` for no mask).

Heatmap colormap (documented contract): the unit interval sweeps
blue -> cyan -> green -> yellow -> red in four equal linear segments.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError
from .synth import Dataset, ImageSample

MANIFEST_NAME = "manifest.txt"


def to_u8(img: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to uint8 by rounding; uint8 passes through."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str, img: np.ndarray) -> None:
    arr = to_u8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ConfigError(f"PGM needs a 2-d grayscale image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def write_ppm(path: str, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ConfigError(f"PPM needs (H, W, 3) uint8 data, got {arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_netpbm(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise ConfigError(f"{path}: expected {magic.decode()} file, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after the header
    raw = data[pos : pos + w * h * channels]
    if len(raw) != w * h * channels:
        raise ConfigError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, channels)


def read_pgm(path: str) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path: str) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def heatmap_rgb(values01: np.ndarray) -> np.ndarray:
    """Blue->cyan->green->yellow->red colormap over [0, 1]."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    r = np.clip(np.minimum(4.0 * (v - 0.5), 1.0), 0.0, 1.0)
    g = np.where(v < 0.25, 4.0 * v, np.where(v < 0.75, 1.0, 1.0 - 4.0 * (v - 0.75)))
    b = np.clip(np.minimum(1.0, 1.0 - 4.0 * (v - 0.25)), 0.0, 1.0)
    rgb = np.stack([r, np.clip(g, 0.0, 1.0), b], axis=-1)
    return to_u8(rgb)


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for split, samples in (("train", ds.train), ("test", ds.test)):
        for s in samples:
            write_pgm(os.path.join(out_dir, f"{s.id}.pgm"), s.pixels)
            mask_name = "-"
            if s.mask is not None:
                mask_name = f"{s.id}-mask.pgm"
                write_pgm(os.path.join(out_dir, mask_name), s.mask * 255)
            lines.append(f"{s.id},{split},{s.label},{mask_name}")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(in_dir: str) -> Dataset:
    manifest = os.path.join(in_dir, MANIFEST_NAME)
    ds = Dataset(spec=None)
    with open(manifest, "r", encoding="ascii") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ConfigError(f"{manifest}:{line_no}: expected 4 fields, got {len(parts)}")
            sid, split, label, mask_name = parts
            pixels = read_pgm(os.path.join(in_dir, f"{sid}.pgm")).astype(np.float64) / 255.0
            mask = None
            if mask_name != "-":
                mask = (read_pgm(os.path.join(in_dir, mask_name)) > 127).astype(np.uint8)
            sample = ImageSample(pixels=pixels[..., None], label=label, id=sid, mask=mask)
            if split == "train":
                ds.train.append(sample)
            elif split == "test":
                ds.test.append(sample)
            else:
                raise ConfigError(f"{manifest}:{line_no}: unknown split {split!r}")
    return ds
