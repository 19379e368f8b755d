"""On-disk formats: .dwmap coordinate maps, .dwf32 float rasters, 8-bit PNG.

All multi-byte integers and floats are little-endian. Writers go through a
temp file plus atomic rename so failures never leave partial artifacts.
"""

import os
import struct
import tempfile

import numpy as np
from PIL import Image

from dewarp.geometry import BACKWARD, FORWARD, CoordMap, Raster

_DWMAP_MAGIC = b"DWMP"
_DWF32_MAGIC = b"DWF0"
_DWMAP_VERSION = 1


def _atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-dewarp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dwmap(path, cmap):
    header = _DWMAP_MAGIC + struct.pack(
        "<IIIB",
        _DWMAP_VERSION,
        cmap.height,
        cmap.width,
        0 if cmap.kind == BACKWARD else 1,
    )
    body = cmap.coords.astype("<f4").tobytes()
    _atomic_write(path, header + body)


def load_dwmap(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DWMAP_MAGIC:
        raise ValueError(f"{path}: not a dwmap file")
    version, height, width, kind_tag = struct.unpack("<IIIB", blob[4:17])
    if version != _DWMAP_VERSION:
        raise ValueError(f"{path}: unsupported dwmap version {version}")
    expected = height * width * 2
    coords = np.frombuffer(blob[17:], dtype="<f4")
    if coords.size != expected:
        raise ValueError(f"{path}: payload has {coords.size} floats, expected {expected}")
    coords = coords.astype(np.float64).reshape(height, width, 2)
    return CoordMap(coords, BACKWARD if kind_tag == 0 else FORWARD)


def save_dwf32(path, raster):
    header = _DWF32_MAGIC + struct.pack(
        "<III", raster.height, raster.width, raster.channels
    )
    _atomic_write(path, header + raster.data.astype("<f4").tobytes())


def load_dwf32(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DWF32_MAGIC:
        raise ValueError(f"{path}: not a dwf32 file")
    height, width, channels = struct.unpack("<III", blob[4:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != height * width * channels:
        raise ValueError(f"{path}: truncated dwf32 payload")
    return Raster(data.astype(np.float64).reshape(height, width, channels))


def save_png(path, raster):
    """Quantize to 8 bits (values * 255, rounded) and write a PNG."""
    arr = np.rint(np.clip(raster.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"cannot encode {arr.shape[2]}-channel raster as PNG")
    import io as _io

    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def load_png(path):
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return Raster(arr)


def save_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def save_textlines(path, textlines):
    """One line per text line: ``id x1 y1 x2 y2 ...``, normalized coords."""
    rows = []
    for tl in textlines:
        coords = " ".join(f"{v!r}" for v in tl.points.reshape(-1))
        rows.append(f"{tl.line_id} {coords}")
    _atomic_write(path, ("\n".join(rows) + "\n").encode("ascii"))


def load_textlines(path):
    from dewarp.synth import TextLine

    lines = []
    with open(path, "r", encoding="ascii") as fh:
        for row in fh:
            row = row.strip()
            if not row:
                continue
            parts = row.split()
            line_id = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            lines.append(TextLine(points=vals.reshape(-1, 2), line_id=line_id))
    return lines
