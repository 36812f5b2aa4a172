"""Bit-exact chunked binary container for volumes, plus image export.

Format ``TOMOVOL1``: a 64-byte header followed by a raw little-endian
float32 payload.

    offset  size  field
    0       8     magic, ASCII "TOMOVOL1"
    8       1     layout: 0 = frames [angle][slice][detector]
                          1 = slices [slice][angle][detector]
    9       12    dims: three little-endian u32 in layout order
    21      1     dtype: 0 = IEEE-754 float32 little-endian
    22      42    reserved (zero)

Measured data is written frame-major (layout 0, one radiograph per
angle); reconstructions are written slice-major (layout 1).  Identical
input produces identical bytes; there are no timestamps in the payload.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .grids import AngleAxis, DetectorAxis, ImageGrid, Sinogram, StageKind, VolumeBlock

__all__ = [
    "MAGIC",
    "HEADER_SIZE",
    "LAYOUT_FRAMES",
    "LAYOUT_SLICES",
    "VolumeHeader",
    "VolumeError",
    "write_volume",
    "BlockReader",
    "read_block",
    "VolumeWriter",
    "export_image",
]

MAGIC = b"TOMOVOL1"
HEADER_SIZE = 64
LAYOUT_FRAMES = 0  # [angle][slice][detector]
LAYOUT_SLICES = 1  # [slice][angle][detector]
_HEADER_FMT = "<8sB3IB42x"


class VolumeError(IOError):
    """Malformed or truncated container file."""


@dataclass(frozen=True)
class VolumeHeader:
    layout: int
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.layout not in (LAYOUT_FRAMES, LAYOUT_SLICES):
            raise ValueError(f"unknown layout {self.layout}")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")

    @property
    def n_angles(self) -> int:
        return self.dims[0] if self.layout == LAYOUT_FRAMES else self.dims[1]

    @property
    def n_slices(self) -> int:
        return self.dims[1] if self.layout == LAYOUT_FRAMES else self.dims[0]

    @property
    def n_t(self) -> int:
        return self.dims[2]

    @property
    def payload_bytes(self) -> int:
        return 4 * self.dims[0] * self.dims[1] * self.dims[2]

    def pack(self) -> bytes:
        return struct.pack(_HEADER_FMT, MAGIC, self.layout, *self.dims, 0)

    @classmethod
    def unpack(cls, raw: bytes) -> "VolumeHeader":
        if len(raw) < HEADER_SIZE:
            raise VolumeError(f"header truncated: {len(raw)} of {HEADER_SIZE} bytes")
        magic, layout, d0, d1, d2, dtype = struct.unpack(_HEADER_FMT, raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise VolumeError("not a TOMOVOL1 file")
        if dtype != 0:
            raise VolumeError(f"unsupported dtype code {dtype}")
        return cls(layout=layout, dims=(d0, d1, d2))


def write_volume(path, header: VolumeHeader, data: np.ndarray) -> None:
    """Write header plus float32 payload; byte-exact across platforms."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.shape != header.dims:
        raise ValueError(f"data shape {arr.shape} does not match dims {header.dims}")
    with open(path, "wb") as f:
        f.write(header.pack())
        f.write(arr.tobytes())


class BlockReader:
    """Sequential block-of-Q access to a container, one open handle per run.

    Iterating yields ``VolumeBlock`` objects of at most ``block_size``
    sinograms; the final block may be short.  Exhaustion is signaled by
    ``None`` from :func:`read_block` (or normal iterator stop), never by
    an exception.
    """

    def __init__(self, path, block_size: int):
        if block_size < 1:
            raise ValueError("block size must be >= 1")
        self.path = os.fspath(path)
        self.block_size = block_size
        self._f = open(self.path, "rb")
        try:
            self.header = VolumeHeader.unpack(self._f.read(HEADER_SIZE))
            actual = os.fstat(self._f.fileno()).st_size
            expected = HEADER_SIZE + self.header.payload_bytes
            if actual != expected:
                raise VolumeError(
                    f"{self.path}: expected {expected} bytes, found {actual}"
                )
        except Exception:
            self._f.close()
            raise
        self.cursor = 0  # next slice index

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "BlockReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __iter__(self):
        while True:
            block = self.read_block()
            if block is None:
                return
            yield block

    def _read_exact(self, offset: int, count: int) -> bytes:
        self._f.seek(offset)
        raw = self._f.read(count)
        if len(raw) != count:
            raise VolumeError(
                f"{self.path}: short read, expected {count} bytes got {len(raw)}"
            )
        return raw

    def read_slices(self, first: int, count: int) -> VolumeBlock:
        """Read ``count`` slices starting at ``first`` as sinograms."""
        h = self.header
        if not (0 <= first and first + count <= h.n_slices):
            raise ValueError(f"slice range [{first}, {first + count}) out of bounds")
        detector = DetectorAxis(h.n_t)
        angles = AngleAxis(h.n_angles)
        row_bytes = 4 * h.n_t
        if h.layout == LAYOUT_SLICES:
            frame_bytes = 4 * h.n_angles * h.n_t
            raw = self._read_exact(HEADER_SIZE + first * frame_bytes, count * frame_bytes)
            stack = np.frombuffer(raw, dtype="<f4").reshape(count, h.n_angles, h.n_t)
        else:
            # frame-major: gather the same slice rows from every angle frame
            frame_bytes = 4 * h.n_slices * h.n_t
            stack = np.empty((count, h.n_angles, h.n_t), dtype="<f4")
            for j in range(h.n_angles):
                offset = HEADER_SIZE + j * frame_bytes + first * row_bytes
                raw = self._read_exact(offset, count * row_bytes)
                stack[:, j, :] = np.frombuffer(raw, dtype="<f4").reshape(count, h.n_t)
        slices = [Sinogram(detector, angles, stack[k].astype(float)) for k in range(count)]
        return VolumeBlock(first_slice=first, slices=slices, stage_tag=StageKind.READ)

    def read_block(self) -> VolumeBlock | None:
        """Next block of at most ``block_size`` slices; None at end of volume."""
        remaining = self.header.n_slices - self.cursor
        if remaining <= 0:
            return None
        count = min(self.block_size, remaining)
        block = self.read_slices(self.cursor, count)
        self.cursor += count
        return block


def read_block(reader: BlockReader) -> VolumeBlock | None:
    """Functional alias for :meth:`BlockReader.read_block`."""
    return reader.read_block()


class VolumeWriter:
    """Slice-major writer with random-access slice slots.

    The file is preallocated (header + zero payload) at construction, so
    blocks can be written in any arrival order while the resulting bytes
    stay deterministic.
    """

    def __init__(self, path, n_slices: int, n: int):
        self.header = VolumeHeader(layout=LAYOUT_SLICES, dims=(n_slices, n, n))
        self.path = os.fspath(path)
        self._slice_bytes = 4 * n * n
        self._f = open(self.path, "wb")
        self._f.write(self.header.pack())
        self._f.truncate(HEADER_SIZE + self.header.payload_bytes)

    def write_slice(self, index: int, grid: ImageGrid) -> None:
        if not 0 <= index < self.header.n_slices:
            raise ValueError(f"slice index {index} out of range")
        self._f.seek(HEADER_SIZE + index * self._slice_bytes)
        self._f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())

    def write_block(self, block: VolumeBlock) -> None:
        for k, grid in enumerate(block.slices):
            self.write_slice(block.first_slice + k, grid)

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "VolumeWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def export_image(grid: ImageGrid, path, format: str = "pgm16") -> None:
    """Write a grid as a 16-bit PGM (min-max scaled) or full-precision CSV."""
    if format == "pgm16":
        lo = float(grid.data.min())
        hi = float(grid.data.max())
        if hi > lo:
            scaled = np.round((grid.data - lo) / (hi - lo) * 65535.0)
        else:
            scaled = np.zeros_like(grid.data)
        pixels = scaled.astype(">u2")  # PGM 16-bit samples are big-endian
        with open(path, "wb") as f:
            f.write(f"P5\n{grid.n} {grid.n}\n65535\n".encode("ascii"))
            f.write(pixels.tobytes())
    elif format == "csv":
        np.savetxt(path, grid.data, fmt="%.17g", delimiter=",", newline="\n")
    else:
        raise ValueError(f"unknown export format {format!r}")
