"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numbers
from pathlib import Path
from typing import Sequence

import numpy as np

from .geom import Aabb


def check_positive(value, name: str, integer: bool = False):
    """Return ``value`` if it is a positive (integer) number, else raise ``ValueError``."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_fraction(value, name: str, closed_low: bool = False):
    """``value`` in (0, 1] (or [0, 1] with ``closed_low``)."""
    ok = isinstance(value, numbers.Real) and (0 <= value <= 1 if closed_low else 0 < value <= 1)
    if not ok:
        raise ValueError(f"{name} must lie in {'[0' if closed_low else '(0'}, 1], got {value!r}")
    return float(value)


def check_seed(seed) -> int:
    if seed is None:
        return 0
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def check_points(pts, name: str = "points") -> np.ndarray:
    """``(n, 3)`` finite float array."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_depth_map(depth, name: str = "depth") -> np.ndarray:
    """2-D float depth in metres; negative or non-finite entries are rejected, 0 means invalid."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    return arr


def check_bounds(bounds) -> Aabb:
    """An :class:`Aabb` or 6 numbers ``(xmin, ymin, zmin, xmax, ymax, zmax)`` with positive extent."""
    if isinstance(bounds, Aabb):
        box = bounds
    else:
        b = np.asarray(bounds, dtype=np.float64).reshape(-1)
        if b.shape != (6,):
            raise ValueError(f"bounds need 6 numbers, got {b.size}")
        box = Aabb(b[:3], b[3:])
    if np.any(box.max <= box.min) or not np.all(np.isfinite(np.concatenate([box.min, box.max]))):
        raise ValueError(f"bounds must be finite with max > min, got {box.min} .. {box.max}")
    return box


def check_scene_dirs(scenes, min_count: int = 1) -> list[Path]:
    """A scene directory, a dataset root, or a sequence of scene directories as a list of paths."""
    if isinstance(scenes, (str, Path)):
        root = Path(scenes)
        if (root / "intrinsics.txt").is_file():
            paths = [root]
        elif root.is_dir():
            paths = sorted(p for p in root.iterdir() if (p / "intrinsics.txt").is_file())
        else:
            raise ValueError(f"{root}: no such directory")
    elif isinstance(scenes, Sequence):
        paths = [Path(s) for s in scenes]
    else:
        raise TypeError(f"expected a path or a sequence of scene paths, got {type(scenes).__name__}")
    for p in paths:
        if not (p / "intrinsics.txt").is_file():
            raise ValueError(f"{p}: not a scene directory (missing intrinsics.txt)")
    if len(paths) < min_count:
        raise ValueError(f"need at least {min_count} scene(s), got {len(paths)}")
    return paths
