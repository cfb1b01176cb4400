"""Field snapshot export: CSV rows and a compact binary layout.

Binary layout (all little-endian):

====================  =======================================
magic                 8 bytes, ``b"NWFIELD\\0"``
version               uint32, currently 1
dim                   uint32, spatial dimension d
n_levels              uint32, number of stored time levels
nx[d]                 uint32 each, points per spatial axis
t0, dt                float64 each
origin[d], dx[d]      float64 pairs per axis
levels[n_levels]      uint32 time index of each stored row
values                n_levels * prod(nx) float64, row-major
====================  =======================================
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .wavesolver import Grid, GridField

__all__ = ["write_field_csv", "write_field_binary", "read_field_binary", "MAGIC"]

MAGIC = b"NWFIELD\x00"
VERSION = 1


def write_field_csv(field: GridField, stream, levels=None):
    """Rows ``t, x1..xd, value``; optionally restricted to selected levels."""
    grid = field.grid
    mesh = grid.spatial_mesh().reshape(-1, grid.dim)
    writer = csv.writer(stream)
    writer.writerow(["t"] + [f"x{a + 1}" for a in range(grid.dim)] + ["value"])
    for row, lev in zip(field.values, field.levels):
        if levels is not None and int(lev) not in levels:
            continue
        t = grid.t[int(lev)]
        flat = row.reshape(-1)
        for coords, val in zip(mesh, flat):
            writer.writerow([repr(float(t))]
                            + [repr(float(c)) for c in coords]
                            + [repr(float(val))])


def write_field_binary(field: GridField, stream):
    grid = field.grid
    nx = [len(a) for a in grid.axes]
    stream.write(MAGIC)
    stream.write(struct.pack("<III", VERSION, grid.dim, len(field.levels)))
    stream.write(struct.pack(f"<{grid.dim}I", *nx))
    stream.write(struct.pack("<dd", float(grid.t[0]), float(grid.dt)))
    for a in range(grid.dim):
        stream.write(struct.pack("<dd", float(grid.axes[a][0]), float(grid.dx[a])))
    stream.write(struct.pack(f"<{len(field.levels)}I",
                             *[int(l) for l in field.levels]))
    stream.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field_binary(stream):
    """Read a snapshot back; returns (GridField, header dict).

    The reconstructed grid has a single-step time axis covering the stored
    levels (enough to locate every stored row in time).
    """
    magic = stream.read(8)
    if magic != MAGIC:
        raise ValueError("not a field snapshot (bad magic)")
    version, dim, n_levels = struct.unpack("<III", stream.read(12))
    if version != VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    nx = struct.unpack(f"<{dim}I", stream.read(4 * dim))
    t0, dt = struct.unpack("<dd", stream.read(16))
    axes = []
    dxs = []
    for a in range(dim):
        origin, dx = struct.unpack("<dd", stream.read(16))
        axes.append(origin + dx * np.arange(nx[a]))
        dxs.append(dx)
    levels = np.array(struct.unpack(f"<{n_levels}I", stream.read(4 * n_levels)))
    count = n_levels * int(np.prod(nx))
    values = np.frombuffer(stream.read(8 * count), dtype="<f8").reshape(
        (n_levels,) + tuple(nx)).copy()
    n_steps = int(levels.max()) if len(levels) else 0
    grid = Grid(dim, t0 + dt * np.arange(n_steps + 1), tuple(axes), dt,
                tuple(dxs), float("nan"), 0)
    header = {"version": version, "dim": dim, "levels": levels.tolist(),
              "nx": list(nx), "t0": t0, "dt": dt}
    return GridField(grid, values, levels), header
