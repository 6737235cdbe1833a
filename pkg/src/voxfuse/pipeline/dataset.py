"""Scene directories on disk.

Layout of one scene::

    intrinsics.txt        3x3 row-major camera matrix
    poses/000000.txt      4x4 world-from-camera matrix per frame
    depth/000000.png      16-bit depth in millimetres (0 = invalid)
    shading/000000.png    optional 8-bit grayscale image
    bounds.txt            xmin ymin zmin xmax ymax zmax
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..features import load_image
from ..geom import Aabb, Intrinsics, Pose, read_intrinsics, read_pose, write_intrinsics, write_pose
from ..tsdf import read_depth_png, write_depth_png


class SceneFormatError(ValueError):
    """A scene directory does not follow the expected layout."""


@dataclass
class Scene:
    path: Path
    K: Intrinsics
    poses: list[Pose]
    bounds: Aabb
    depth_paths: list[Path]
    image_paths: list[Path] | None = None
    _depth_cache: dict = field(default_factory=dict, repr=False)
    _image_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def name(self) -> str:
        return self.path.name

    @property
    def cameras(self) -> list[tuple[Intrinsics, Pose]]:
        return [(self.K, p) for p in self.poses]

    def depth(self, i: int) -> np.ndarray:
        if i not in self._depth_cache:
            self._depth_cache[i] = read_depth_png(self.depth_paths[i])
        return self._depth_cache[i]

    def image(self, i: int) -> np.ndarray:
        """Shading image in [0, 1]; falls back to a normalised depth image when absent."""
        if i not in self._image_cache:
            if self.image_paths is not None:
                self._image_cache[i] = load_image(self.image_paths[i])
            else:
                d = self.depth(i)
                self._image_cache[i] = np.clip(d / 5.0, 0.0, 1.0).astype(np.float32)
        return self._image_cache[i]


def _frame_files(folder: Path, suffix: str) -> list[Path]:
    if not folder.is_dir():
        return []
    files = sorted(folder.glob(f"*{suffix}"))
    for i, f in enumerate(files):
        if f.stem != f"{i:06d}":
            raise SceneFormatError(f"{folder}: frame files must be contiguous from 000000, found {f.name} at {i}")
    return files


def load_scene(path) -> Scene:
    path = Path(path)
    if not (path / "intrinsics.txt").is_file():
        raise SceneFormatError(f"{path}: missing intrinsics.txt")
    poses_f = _frame_files(path / "poses", ".txt")
    depth_f = _frame_files(path / "depth", ".png")
    if not poses_f:
        raise SceneFormatError(f"{path}: no pose files under poses/")
    if len(poses_f) != len(depth_f):
        raise SceneFormatError(f"{path}: {len(poses_f)} pose files but {len(depth_f)} depth files")
    shade_f = _frame_files(path / "shading", ".png") or None
    if shade_f is not None and len(shade_f) != len(poses_f):
        raise SceneFormatError(f"{path}: {len(shade_f)} shading files for {len(poses_f)} frames")
    with Image.open(depth_f[0]) as im:
        w, h = im.size
    K = read_intrinsics(path / "intrinsics.txt", w, h)
    if not (path / "bounds.txt").is_file():
        raise SceneFormatError(f"{path}: missing bounds.txt")
    b = np.loadtxt(path / "bounds.txt", dtype=float).reshape(-1)
    if b.shape != (6,):
        raise SceneFormatError(f"{path}/bounds.txt: expected 6 numbers, got {b.size}")
    poses = [read_pose(f) for f in poses_f]
    return Scene(path, K, poses, Aabb(b[:3], b[3:]), depth_f, shade_f)


def write_scene(out_dir, K: Intrinsics, poses: Sequence[Pose], depths: Sequence[np.ndarray],
                images: Sequence[np.ndarray] | None, bounds) -> Path:
    out = Path(out_dir)
    (out / "poses").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", K)
    for i, (pose, depth) in enumerate(zip(poses, depths)):
        write_pose(out / "poses" / f"{i:06d}.txt", pose)
        write_depth_png(out / "depth" / f"{i:06d}.png", depth)
    if images is not None:
        (out / "shading").mkdir(exist_ok=True)
        for i, img in enumerate(images):
            u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(u8).save(out / "shading" / f"{i:06d}.png")
    b = np.asarray(bounds.min.tolist() + bounds.max.tolist() if isinstance(bounds, Aabb) else bounds, float)
    (out / "bounds.txt").write_text(" ".join(f"{x:.6f}" for x in b) + "\n")
    return out


def find_scenes(root) -> list[Path]:
    """Scene directories directly under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if (root / "intrinsics.txt").is_file():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "intrinsics.txt").is_file())
    if not found:
        raise SceneFormatError(f"{root}: no scene directories found")
    return found


def train_val_split(scenes: Sequence, n_val: int | None = None) -> tuple[list, list]:
    """Last ``n_val`` scenes (default: one in five, at least one) are held out."""
    if len(scenes) < 2:
        raise ValueError("training needs at least 2 scenes (train and validation)")
    n_val = max(1, len(scenes) // 5) if n_val is None else n_val
    return list(scenes[:-n_val]), list(scenes[-n_val:])
