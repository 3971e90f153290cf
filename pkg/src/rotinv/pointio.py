"""Point-cloud file I/O: whitespace text and the LCPC binary format.

Text: one ``x y z [label]`` line per point.  Binary: magic ``LCPC``,
little-endian u32 point count, then float32 xyz triples.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

CLOUD_MAGIC = b"LCPC"


def write_cloud_text(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="ascii") as fh:
        if cloud.point_labels is not None:
            for p, lbl in zip(cloud.points, cloud.point_labels):
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(lbl)}\n")
        else:
            for p in cloud.points:
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_cloud_text(path) -> PointCloud:
    points = []
    labels = []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{line_no}: expected 3 or 4 columns")
            points.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if labels and len(labels) != len(points):
        raise ValueError(f"{path}: label column present on only some lines")
    return PointCloud(np.array(points),
                      point_labels=np.array(labels) if labels else None)


def write_cloud_binary(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", cloud.n))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def read_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != CLOUD_MAGIC:
            raise ValueError(f"{path}: not a binary point-cloud file (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        raw = fh.read(12 * count)
        if len(raw) != 12 * count:
            raise ValueError(f"{path}: truncated point data")
        points = np.frombuffer(raw, dtype="<f4").reshape(count, 3)
    return PointCloud(points.astype(np.float64))


def read_cloud(path) -> PointCloud:
    """Read either format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CLOUD_MAGIC:
        return read_cloud_binary(path)
    return read_cloud_text(path)


def write_cloud(path, cloud: PointCloud) -> None:
    """Write by extension: .lcpc binary, anything else text."""
    if Path(path).suffix == ".lcpc":
        write_cloud_binary(path, cloud)
    else:
        write_cloud_text(path, cloud)
