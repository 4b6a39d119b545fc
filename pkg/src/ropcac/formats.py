"""File formats: PLY point clouds, 1024^3 voxelization, PPM images, and the
ROPC bitstream container.

Geometry never travels inside the bitstream; the decoder receives it out of
band and the container carries an FNV-1a hash so a mismatched geometry is
rejected before any latent decoding starts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .sparse import lex_order

VOXEL_RESOLUTION = 1024
BITSTREAM_MAGIC = b"ROPC"
BITSTREAM_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class VoxelCloud:
    """Unique integer coordinates on the 1024^3 grid with [0,1] colors."""

    coords: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.coords.shape[0] != self.colors.shape[0]:
            raise ValueError("coords and colors disagree on point count")
        if self.coords.size and (
            self.coords.min() < 0 or self.coords.max() >= VOXEL_RESOLUTION
        ):
            raise ValueError(f"coordinates outside the {VOXEL_RESOLUTION}^3 grid")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ValueError("duplicate voxel coordinates")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


# ---------------------------------------------------------------------------
# PLY


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise ValueError("ply: missing end_header")
    body_off = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    if not lines or lines[0].strip() != "ply":
        raise ValueError("ply line 1: expected 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code)])
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ValueError(f"ply line {ln}: unsupported format {raw.strip()!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ValueError(f"ply line {ln}: malformed element declaration")
            try:
                count = int(tok[2])
            except ValueError:
                raise ValueError(f"ply line {ln}: bad element count {tok[2]!r}")
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise ValueError(f"ply line {ln}: property before any element")
            if tok[1] == "list":
                raise ValueError(f"ply line {ln}: list properties unsupported")
            if len(tok) != 3 or tok[1] not in _PLY_DTYPES:
                raise ValueError(f"ply line {ln}: unsupported property {raw.strip()!r}")
            elements[-1][2].append((tok[2], _PLY_DTYPES[tok[1]]))
        else:
            raise ValueError(f"ply line {ln}: unknown keyword {tok[0]!r}")
    if fmt is None:
        raise ValueError("ply: no format line in header")
    if not elements or elements[0][0] != "vertex":
        raise ValueError("ply: first element must be 'vertex'")
    return fmt, elements, body_off


def read_ply(path):
    """Load (coords float64 Nx3, colors uint8 Nx3); extra properties skipped."""
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body_off = _parse_ply_header(data)
    name, count, props = elements[0]
    prop_names = [p for p, _ in props]
    for need in ("x", "y", "z"):
        if need not in prop_names:
            raise ValueError(f"ply: missing coordinate property {need!r}")
    for need in ("red", "green", "blue"):
        if need not in prop_names:
            raise ValueError(f"ply: missing color property {need!r}")
    if fmt == "ascii":
        text = data[body_off:].decode("ascii", errors="replace").split()
        n_fields = len(props)
        if len(text) < count * n_fields:
            raise ValueError(
                f"ply: expected {count * n_fields} values, found {len(text)}"
            )
        try:
            table = np.array(text[: count * n_fields], dtype=np.float64)
        except ValueError as exc:
            raise ValueError(f"ply: non-numeric vertex data ({exc})")
        table = table.reshape(count, n_fields)
        cols = {p: table[:, i] for i, (p, _) in enumerate(props)}
    else:
        vdt = np.dtype([(p, "<" + code) for p, code in props])
        if len(data) - body_off < count * vdt.itemsize:
            raise ValueError("ply: binary payload truncated")
        arr = np.frombuffer(data, dtype=vdt, count=count, offset=body_off)
        cols = {p: arr[p] for p, _ in props}
    coords = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
    if colors.dtype != np.uint8:
        colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)
    return coords, colors


def write_ply(coords, colors, path, binary: bool = False) -> None:
    """Write x,y,z float32 and red,green,blue uchar vertices.

    Colors may be uint8 or floats on [0,1] (quantized round-half-up).
    """
    coords = np.asarray(coords, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = quantize_u8(colors)
    colors = colors.reshape(-1, 3)
    if coords.shape[0] != colors.shape[0]:
        raise ValueError("coords and colors disagree on point count")
    n = coords.shape[0]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            vdt = np.dtype(
                [(k, "<f4") for k in "xyz"] + [(k, "u1") for k in ("red", "green", "blue")]
            )
            rec = np.empty(n, dtype=vdt)
            for i, k in enumerate("xyz"):
                rec[k] = coords[:, i]
            for i, k in enumerate(("red", "green", "blue")):
                rec[k] = colors[:, i]
            fh.write(rec.tobytes())
        else:
            rows = []
            for i in range(n):
                x, y, z = (repr(float(v)) for v in coords[i])
                r, g, b = (int(v) for v in colors[i])
                rows.append(f"{x} {y} {z} {r} {g} {b}\n")
            fh.write("".join(rows).encode("ascii"))


# ---------------------------------------------------------------------------
# voxelization


def voxelize(points, colors, resolution: int = VOXEL_RESOLUTION) -> VoxelCloud:
    """Scale the bounding box uniformly into [0, resolution-1] anchored at the
    min corner; colliding points average their colors; output lex-sorted."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if not 2 <= resolution <= VOXEL_RESOLUTION:
        raise ValueError(f"resolution must lie in [2, {VOXEL_RESOLUTION}]")
    if points.shape[0] == 0:
        raise ValueError("cannot voxelize an empty cloud")
    if colors.shape[0] != points.shape[0]:
        raise ValueError("coords and colors disagree on point count")
    mn = points.min(axis=0)
    extent = float((points.max(axis=0) - mn).max())
    if extent <= 0.0:
        raise ValueError("degenerate cloud: zero spatial extent")
    scale = (resolution - 1) / extent
    v = np.floor((points - mn) * scale + 0.5).astype(np.int64)
    v = np.clip(v, 0, resolution - 1)
    uniq, inverse = np.unique(v, axis=0, return_inverse=True)
    acc = np.zeros((uniq.shape[0], 3))
    np.add.at(acc, inverse, colors)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return VoxelCloud(uniq, acc / counts[:, None])


def colors_from_u8(colors_u8: np.ndarray) -> np.ndarray:
    return np.asarray(colors_u8, dtype=np.float64) / 255.0


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """[0,1] reals to bytes, round half up (0.5 -> 128)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# images


def write_image(img: np.ndarray, path) -> None:
    """Binary PPM (P6, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize_u8(img).tobytes())


def read_image(path) -> np.ndarray:
    """Read back a P6 PPM as floats on [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ValueError("not a P6 PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pixels = np.frombuffer(parts[4], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# bitstream container


@dataclass
class Bitstream:
    lambda_id: int
    geometry_hash: int
    n_points: int
    z_stream: bytes
    y_stream: bytes
    version: int = BITSTREAM_VERSION


def geometry_hash(coords) -> int:
    """FNV-1a (64-bit) over the lex-sorted coordinates as little-endian i32."""
    coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
    coords = coords[lex_order(coords)]
    h = FNV_OFFSET
    for b in coords.astype("<i4").tobytes():
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def pack_bitstream(bs: Bitstream) -> bytes:
    head = struct.pack(
        "<4sBBQI",
        BITSTREAM_MAGIC,
        bs.version,
        bs.lambda_id,
        bs.geometry_hash,
        bs.n_points,
    )
    return (
        head
        + struct.pack("<I", len(bs.z_stream))
        + bs.z_stream
        + struct.pack("<I", len(bs.y_stream))
        + bs.y_stream
    )


def unpack_bitstream(data: bytes) -> Bitstream:
    if len(data) < 18:
        raise ValueError("bitstream truncated: header incomplete")
    magic, version, lam, ghash, n = struct.unpack_from("<4sBBQI", data, 0)
    if magic != BITSTREAM_MAGIC:
        raise ValueError(f"bad bitstream magic {magic!r}")
    if version != BITSTREAM_VERSION:
        raise ValueError(f"unsupported bitstream version {version}")
    off = 18
    streams = []
    for which in ("z", "y"):
        if len(data) < off + 4:
            raise ValueError(f"bitstream truncated: {which}-stream length missing")
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + length:
            raise ValueError(f"bitstream truncated: {which}-stream payload short")
        streams.append(data[off : off + length])
        off += length
    if off != len(data):
        raise ValueError(f"bitstream has {len(data) - off} trailing bytes")
    return Bitstream(lam, ghash, n, streams[0], streams[1], version)


def write_bitstream(bs: Bitstream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_bitstream(bs))


def read_bitstream(path) -> Bitstream:
    with open(path, "rb") as fh:
        return unpack_bitstream(fh.read())
