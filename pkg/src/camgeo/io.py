"""Image, depth and pointcloud files: 8-bit PNG color, 16-bit PNG depth in
millimetres, PFM float maps and binary PLY pointclouds."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .photometric import DepthMap


def read_image(path) -> np.ndarray:
    """8-bit PNG to float RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, img) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_pfm(path, data) -> None:
    """Little-endian float32 PFM; 2-D arrays are greyscale, (H, W, 3) color."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        tag = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = "PF"
    else:
        raise FormatError(f"PFM stores (H, W) or (H, W, 3) arrays, got {a.shape}", path)
    H, W = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(a).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise FormatError("bad PFM header", path, 1)
    channels = 3 if m.group(1) == b"PF" else 1
    W, H = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("bad PFM scale", path, 3) from None
    dtype = "<f4" if scale < 0 else ">f4"
    n = W * H * channels
    body = data[m.end() :]
    if len(body) < 4 * n:
        raise FormatError(f"PFM payload too short ({len(body)} < {4 * n} bytes)", path)
    a = np.frombuffer(body[: 4 * n], dtype=dtype).astype(np.float64)
    a = a.reshape(H, W, 3) if channels == 3 else a.reshape(H, W)
    return np.flipud(a).copy()


def write_depth(path, depth) -> None:
    """Depth map by extension: ``.pfm`` float32 metres, ``.png`` uint16 millimetres.

    Invalid pixels are written as 0.
    """
    d = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    if isinstance(depth, DepthMap):
        d = np.where(depth.valid, d, 0.0)
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        write_pfm(path, d)
    elif suffix == ".png":
        mm = np.clip(np.rint(d * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(path, format="PNG")
    else:
        raise FormatError(f"unknown depth extension {suffix!r} (use .pfm or .png)", path)


def read_depth(path, d_min: float = 0.0, d_max: float = np.inf) -> DepthMap:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        d = read_pfm(path)
        if d.ndim != 2:
            raise FormatError("depth PFM must be single channel", path)
    elif suffix == ".png":
        with Image.open(path) as im:
            d = np.asarray(im, dtype=np.float64) / 1000.0
        if d.ndim != 2:
            raise FormatError("depth PNG must be single channel", path)
    else:
        raise FormatError(f"unknown depth extension {suffix!r} (use .pfm or .png)", path)
    return DepthMap.from_array(d, d_min, d_max)


PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, points, colors) -> None:
    """Binary little-endian PLY with float32 xyz and uchar rgb (colors in [0, 1])."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    C = np.clip(np.rint(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255), 0, 255)
    rec = np.empty(len(P), dtype=PLY_DTYPE)
    for k, name in enumerate("xyz"):
        rec[name] = P[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = C[:, k]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(P)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back files written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file", path, 1)
    header = data[:end].decode("ascii", "replace")
    if "binary_little_endian" not in header:
        raise FormatError("only binary little-endian PLY is supported", path, 2)
    m = re.search(r"element vertex (\d+)", header)
    if not m:
        raise FormatError("PLY header lacks a vertex count", path)
    n = int(m.group(1))
    rec = np.frombuffer(data[end + len(b"end_header\n") :], dtype=PLY_DTYPE, count=n)
    P = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    C = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    return P, C
