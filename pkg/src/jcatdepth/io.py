"""Depth map and metrics file formats."""
from __future__ import annotations

import csv
import os

import numpy as np

from .metrics import CSV_FIELDS, MetricsRecord


def write_pgm16(path, depth_m: np.ndarray, kitti: bool = False) -> None:
    """16-bit binary PGM of a depth map: millimetres, or metres x 256 if ``kitti``."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2:
        raise ValueError(f"PGM export needs an HxW map, got {depth_m.shape}")
    scale = 256.0 if kitti else 1000.0
    vals = np.clip(np.rint(depth_m * scale), 0, 65535).astype(">u2")
    H, W = vals.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        f.write(vals.tobytes())


def read_pgm16(path, kitti: bool = False) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, W, H, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    raw = np.frombuffer(blob, dtype=">u2", count=W * H, offset=pos).reshape(H, W)
    return raw.astype(np.float64) / (256.0 if kitti else 1000.0)


def write_float_map(path, depth: np.ndarray) -> None:
    """Plain-text float map: ``Pf-text``, ``W H``, then H rows top to bottom."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    with open(path, "w") as f:
        f.write(f"Pf-text\n{W} {H}\n")
        np.savetxt(f, depth, fmt="%.9g")


def read_float_map(path) -> np.ndarray:
    with open(path) as f:
        if f.readline().strip() != "Pf-text":
            raise ValueError(f"{path}: not a text float map")
        W, H = map(int, f.readline().split())
        data = np.loadtxt(f, ndmin=2)
    if data.shape != (H, W):
        raise ValueError(f"{path}: header says {H}x{W}, found {data.shape}")
    return data


def append_metrics_csv(path, record: MetricsRecord) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(CSV_FIELDS)
        w.writerow(record.to_row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "valid_count" else float(v)) for k, v in r.items()} for r in rows]
