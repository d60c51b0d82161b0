"""
Point clouds and vectors on disk.

Points:
    .csv / .txt   one "x,y,z" row per point, '#' starts a comment
    .bin          little-endian float64 triples
Vectors (right-hand sides, solutions):
    .csv / .txt   one "re,im" row per entry
    .bin          little-endian complex128
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import InvalidInputError
from ..geometry_tree import PointCloud

# Set up logging
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TEXT_SUFFIXES = (".csv", ".txt")


def _is_binary(path: Path) -> bool:
    if path.suffix == ".bin":
        return True
    if path.suffix in TEXT_SUFFIXES:
        return False
    raise InvalidInputError(f"Unsupported file type '{path.suffix}' for {path} (expected .csv, .txt or .bin)")


def _read_text_table(path: Path, columns: int) -> np.ndarray:
    try:
        table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise InvalidInputError(f"{path}: malformed numeric table ({e})") from e
    if table.shape[1] != columns:
        raise InvalidInputError(f"{path}: expected {columns} columns, found {table.shape[1]}")
    return table


def load_points(path: PathLike) -> PointCloud:
    """
    Read a point cloud.

    Raises:
        InvalidInputError: Malformed content or unsupported suffix
        OSError: If the file cannot be read
    """
    path = Path(path)
    if _is_binary(path):
        raw = np.fromfile(path, dtype="<f8")
        if raw.size % 3:
            raise InvalidInputError(f"{path}: {raw.size} values is not a multiple of 3")
        pts = raw.reshape(-1, 3)
    else:
        pts = _read_text_table(path, 3)
    logger.info(f"Loaded {pts.shape[0]} points from {path}")
    return PointCloud(pts)


def save_points(path: PathLike, pc: PointCloud) -> Path:
    path = Path(path)
    if _is_binary(path):
        pc.points.astype("<f8").tofile(path)
    else:
        np.savetxt(path, pc.points, delimiter=",", fmt="%.17g", header="x,y,z")
    return path


def load_vector(path: PathLike) -> np.ndarray:
    """Read a complex vector."""
    path = Path(path)
    if _is_binary(path):
        raw = np.fromfile(path, dtype="<c16")
    else:
        table = _read_text_table(path, 2)
        raw = table[:, 0] + 1j * table[:, 1]
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError(f"{path}: vector contains non-finite entries")
    return raw.astype(np.complex128)


def save_vector(path: PathLike, v: np.ndarray) -> Path:
    path = Path(path)
    v = np.asarray(v, dtype=np.complex128).ravel()
    if _is_binary(path):
        v.astype("<c16").tofile(path)
    else:
        np.savetxt(path, np.column_stack([v.real, v.imag]), delimiter=",", fmt="%.17g", header="re,im")
    return path
