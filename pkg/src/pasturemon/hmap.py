"""Heightmap files shared by every stage of the pipeline.

A heightmap is a plain ``(M, N)`` float64 numpy array of heights in mm.
On disk it is a text file::

    HMAP <M> <N>
    <N space separated decimals>   (M lines)

Values are written with 17 significant digits so a write/read cycle is exact.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class HeightMapFormatError(ValueError):
    pass


def as_heightmap(values, *, nonnegative: bool = False) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise HeightMapFormatError(f"heightmap must be a non-empty 2D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise HeightMapFormatError("heightmap contains non-finite values")
    if nonnegative and np.any(arr < 0):
        raise HeightMapFormatError("heightmap contains negative heights")
    arr.setflags(write=False)
    return arr


def format_hmap(hmap: np.ndarray) -> str:
    hmap = np.asarray(hmap, dtype=np.float64)
    rows, cols = hmap.shape
    lines = [f"HMAP {rows} {cols}"]
    for row in hmap:
        lines.append(" ".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


def parse_hmap(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise HeightMapFormatError("empty heightmap file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "HMAP":
        raise HeightMapFormatError(f"bad header line: {lines[0]!r}")
    try:
        rows, cols = int(header[1]), int(header[2])
    except ValueError as exc:
        raise HeightMapFormatError(f"bad dimensions in header: {lines[0]!r}") from exc
    body = lines[1:]
    if rows < 1 or cols < 1 or len(body) != rows:
        raise HeightMapFormatError(f"expected {rows} data rows, found {len(body)}")
    data = np.empty((rows, cols), dtype=np.float64)
    for r, line in enumerate(body):
        fields = line.split()
        if len(fields) != cols:
            raise HeightMapFormatError(f"row {r}: expected {cols} values, found {len(fields)}")
        try:
            data[r] = [float(f) for f in fields]
        except ValueError as exc:
            raise HeightMapFormatError(f"row {r}: {exc}") from exc
    return as_heightmap(data)


def write_hmap(path: str | os.PathLike, hmap: np.ndarray) -> None:
    Path(path).write_text(format_hmap(hmap))


def read_hmap(path: str | os.PathLike) -> np.ndarray:
    return parse_hmap(Path(path).read_text())


def write_sequence(directory: str | os.PathLike, maps, prefix: str = "map") -> list[Path]:
    """Write maps as ``<prefix>_0000.hmap``, ``<prefix>_0001.hmap``, ..."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        p = directory / f"{prefix}_{i:04d}.hmap"
        write_hmap(p, m)
        paths.append(p)
    return paths


def read_sequence(directory: str | os.PathLike, prefix: str = "map") -> np.ndarray:
    paths = sorted(Path(directory).glob(f"{prefix}_*.hmap"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.hmap files in {directory}")
    maps = [read_hmap(p) for p in paths]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise HeightMapFormatError(f"inconsistent map shapes in {directory}: {sorted(shapes)}")
    return np.stack(maps)


def write_manifest(path: str | os.PathLike, entries: dict) -> None:
    """key=value manifest, keys in insertion order."""
    lines = [f"{k}={_manifest_value(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"manifest line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def _manifest_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_manifest_value(x) for x in v)
    return str(v)
