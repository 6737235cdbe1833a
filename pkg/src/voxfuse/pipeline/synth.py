"""Synthetic rooms: analytic SDF scenes, sphere-traced depth and shading.

A scene is an axis-aligned room ``[0, L]`` (solid outside the walls) plus
sphere and box objects. Free space has positive signed distance; the solid
union is the ``min`` of the room-shell and object distances. The camera
orbits inside the room looking outward. Shading is Lambertian under a
fixed point light with hard shadows, so a surface point has the same
brightness in every view.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geom import Intrinsics, Pose, look_at, pixel_rays
from .dataset import write_scene

HIT_EPS = 1e-4
MAX_STEPS = 256
LIGHT_REF = 1.0  # distance (m) at which the light gives full intensity
AMBIENT = 0.05


@dataclass
class SceneSpec:
    room: tuple[float, float, float]
    objects: list[dict] = field(default_factory=list)
    trajectory: dict = field(default_factory=dict)
    camera: dict = field(default_factory=dict)
    wall_albedo: float = 0.8
    light: tuple[float, float, float] | None = None  # default: above the room centre
    texture: dict | None = None  # {"seed", "amplitude", "scale"}; None renders flat albedo

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        light = d.get("light")
        return cls(tuple(float(x) for x in d["room"]), list(d.get("objects", [])),
                   dict(d.get("trajectory", {})), dict(d.get("camera", {})), float(d.get("wall_albedo", 0.8)),
                   None if light is None else tuple(float(x) for x in light),
                   None if d.get("texture") is None else dict(d["texture"]))

    def to_dict(self) -> dict:
        out = {"room": list(self.room), "objects": self.objects, "trajectory": self.trajectory,
               "camera": self.camera, "wall_albedo": self.wall_albedo}
        if self.light is not None:
            out["light"] = list(self.light)
        if self.texture is not None:
            out["texture"] = self.texture
        return out

    def light_position(self) -> np.ndarray:
        room = np.asarray(self.room, float)
        return np.asarray(self.light, float) if self.light is not None else room * [0.5, 0.5, 0.8]


# -- signed distances ------------------------------------------------------------------

def sd_box(p: np.ndarray, center, half) -> np.ndarray:
    """Exact signed distance to a solid box (negative inside)."""
    q = np.abs(p - np.asarray(center, float)) - np.asarray(half, float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sd_sphere(p: np.ndarray, center, radius: float) -> np.ndarray:
    return np.linalg.norm(p - np.asarray(center, float), axis=-1) - radius


class SolidTexture:
    """Smooth random 3D albedo modulation in ``[1 - amplitude, 1]``.

    A sum of ``n_waves`` plane cosines with random directions, wavelengths in
    ``[scale / 2, 2 * scale]`` and phases, squashed by ``tanh``. Being a solid
    texture it needs no surface parametrisation and looks the same from every view.
    """

    def __init__(self, seed: int = 0, amplitude: float = 0.6, scale: float = 0.2, n_waves: int = 8):
        if not 0 <= amplitude <= 1 or scale <= 0:
            raise ValueError("texture needs 0 <= amplitude <= 1 and scale > 0")
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n_waves, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        wavelength = scale * 2.0 ** rng.uniform(-1, 1, n_waves)
        self.k = d * (2 * np.pi / wavelength)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amplitude = amplitude

    def __call__(self, p: np.ndarray) -> np.ndarray:
        s = np.cos(p @ self.k.T + self.phase).sum(-1) / np.sqrt(len(self.phase) / 2)
        return 1 - self.amplitude * (0.5 - 0.5 * np.tanh(1.5 * s))


class SceneSDF:
    """Signed distance and albedo of a room scene; positive in free space."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.room = np.asarray(spec.room, float)
        self.texture = None if spec.texture is None else SolidTexture(**spec.texture)
        for i, obj in enumerate(spec.objects):
            if obj.get("type") not in ("sphere", "box"):
                raise ValueError(f"object {i}: unknown type {obj.get('type')!r}")
            c = np.asarray(obj["center"], float)
            ext = np.full(3, obj["radius"]) if obj["type"] == "sphere" else np.asarray(obj["half"], float)
            if np.any(c - ext < -1e-9) or np.any(c + ext > self.room + 1e-9):
                raise ValueError(f"object {i} is not inside the room")

    def _parts(self, p: np.ndarray) -> list[np.ndarray]:
        parts = [-sd_box(p, self.room / 2, self.room / 2)]
        for obj in self.spec.objects:
            if obj["type"] == "sphere":
                parts.append(sd_sphere(p, obj["center"], obj["radius"]))
            else:
                parts.append(sd_box(p, obj["center"], obj["half"]))
        return parts

    def __call__(self, p) -> np.ndarray:
        return np.min(np.stack(self._parts(np.asarray(p, float))), axis=0)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        parts = np.stack(self._parts(p))
        which = np.argmin(parts, axis=0)
        table = np.array([self.spec.wall_albedo] + [o.get("albedo", 0.7) for o in self.spec.objects])
        base = table[which]
        return base if self.texture is None else base * self.texture(p)

    def normal(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        n = np.stack([self(p + h * e) - self(p - h * e) for e in np.eye(3)], axis=-1)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def sphere_trace(sdf: SceneSDF, origin, dirs: np.ndarray, max_dist: float = 20.0,
                 eps: float = HIT_EPS, max_steps: int = MAX_STEPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """March unit rays until ``|sdf| < eps``. Returns ``(t, hit, steps)``; ``t`` is NaN on a miss."""
    dirs = np.asarray(dirs, float).reshape(-1, 3)
    origin = np.asarray(origin, float)
    t = np.zeros(len(dirs))
    steps = np.zeros(len(dirs), np.int64)
    live = np.ones(len(dirs), bool)
    hit = np.zeros(len(dirs), bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        d = sdf(origin + t[idx, None] * dirs[idx])
        done = np.abs(d) < eps
        hit[idx[done]] = True
        live[idx[done]] = False
        go = idx[~done]
        t[go] += d[~done]
        steps[go] += 1
        live[go[t[go] > max_dist]] = False
    t[~hit] = np.nan
    return t, hit, steps


def _shadow_trace(sdf: SceneSDF, origins: np.ndarray, dirs: np.ndarray, max_dist: np.ndarray):
    """Per-ray origins variant of :func:`sphere_trace` for shadow rays."""
    t = np.zeros(len(dirs))
    live = np.ones(len(dirs), bool)
    hit = np.zeros(len(dirs), bool)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        d = sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(d) < HIT_EPS
        hit[idx[done]] = True
        live[idx[done]] = False
        go = idx[~done]
        t[go] += d[~done]
        live[go[t[go] > max_dist[go]]] = False
    return t, hit


def render_view(sdf: SceneSDF, K: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Z-depth (0 where tracing failed) and fixed-light Lambertian shading in [0, 1]."""
    rays = pixel_rays(K, pose).reshape(-1, 3)
    t, hit, _ = sphere_trace(sdf, pose.center, rays)
    z = np.zeros(len(rays))
    cos_axis = rays @ pose.R[:, 2]
    z[hit] = t[hit] * cos_axis[hit]
    shade = np.zeros(len(rays))
    if np.any(hit):
        p = pose.center + t[hit, None] * rays[hit]
        n = sdf.normal(p)
        to_light = sdf.spec.light_position() - p
        dist = np.linalg.norm(to_light, axis=-1)
        ldir = to_light / dist[:, None]
        lam = np.clip((n * ldir).sum(-1), 0.0, 1.0)
        lit = lam > 0
        if np.any(lit):
            # shadow rays start a little off the surface so the tracer does not stop at once
            t_s, hit_s = _shadow_trace(sdf, p[lit] + 4 * HIT_EPS * n[lit], ldir[lit], dist[lit])
            shadowed = np.zeros(len(p), bool)
            shadowed[np.flatnonzero(lit)[hit_s & (t_s < dist[lit] - 1e-3)]] = True
            lam[shadowed] = 0.0
        fall = np.minimum(1.0, (LIGHT_REF / dist) ** 2)
        shade[hit] = np.clip(AMBIENT + (1 - AMBIENT) * sdf.albedo(p) * lam * fall, 0.0, 1.0)
    return z.reshape(K.height, K.width), shade.reshape(K.height, K.width)


# -- trajectories -------------------------------------------------------------------------

def orbit_trajectory(spec: SceneSpec) -> list[Pose]:
    """Cameras on a horizontal circle around the room centre, looking outward and slightly down."""
    tr = spec.trajectory
    room = np.asarray(spec.room, float)
    center = np.asarray(tr.get("center", room / 2), float)
    radius = float(tr.get("radius", 0.15 * min(room[:2])))
    n = int(tr.get("n_frames", 72))
    step = np.radians(float(tr.get("step_deg", 5.0)))
    tilt = float(tr.get("tilt", 0.35))
    bob = float(tr.get("bob", 0.1))
    phase0 = float(tr.get("phase", 0.0))
    poses = []
    for i in range(n):
        a = phase0 + i * step
        radial = np.array([np.cos(a), np.sin(a), 0.0])
        eye = center + radius * radial + [0.0, 0.0, bob * np.sin(3 * a)]
        poses.append(look_at(eye, eye + radial - [0.0, 0.0, tilt]))
    return poses


def default_intrinsics(cam: dict) -> Intrinsics:
    w, h = int(cam.get("width", 80)), int(cam.get("height", 60))
    f = float(cam.get("focal", 0.75 * w))
    return Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)


def check_trajectory(sdf: SceneSDF, poses: list[Pose], margin: float = 0.05) -> None:
    centers = np.array([p.center for p in poses])
    d = sdf(centers)
    bad = np.flatnonzero(d < margin)
    if len(bad):
        raise ValueError(f"trajectory leaves the free space of the room at frame {int(bad[0])} "
                         f"(clearance {d[bad[0]]:.3f} m < {margin} m)")


# -- random scenes ----------------------------------------------------------------------------

def random_scene_spec(rng: np.random.Generator, room_range=((1.6, 2.0), (1.6, 2.0), (1.2, 1.4)),
                      n_objects=(1, 3), camera: dict | None = None, n_frames: int = 72) -> SceneSpec:
    """A room with a few objects resting on the floor between the orbit and the walls."""
    room = np.array([rng.uniform(*r) for r in room_range])
    objs = []
    orbit = 0.15 * min(room[:2])
    k = int(rng.integers(n_objects[0], n_objects[1] + 1))
    tries = 0
    while len(objs) < k and tries < 200:
        tries += 1
        kind = "sphere" if rng.random() < 0.5 else "box"
        ext = np.array([rng.uniform(0.12, 0.25)] * 3) if kind == "sphere" else rng.uniform(0.1, 0.25, 3)
        if kind == "box":
            ext[2] = rng.uniform(0.1, 0.35)
        lo, hi = ext[:2] + 0.02, room[:2] - ext[:2] - 0.02
        if np.any(hi <= lo):
            continue
        c = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), ext[2]])
        # keep clear of the camera orbit and of the other objects
        if np.linalg.norm(c[:2] - room[:2] / 2) - np.linalg.norm(ext[:2]) < orbit + 0.25:
            continue
        if any(np.linalg.norm(c[:2] - np.asarray(o["center"][:2])) < np.linalg.norm(ext[:2]) + o["_r"] + 0.05
               for o in objs):
            continue
        obj = {"type": kind, "center": c.round(4).tolist(), "albedo": round(float(rng.uniform(0.4, 1.0)), 3),
               "_r": float(np.linalg.norm(ext[:2]))}
        if kind == "sphere":
            obj["radius"] = round(float(ext[0]), 4)
        else:
            obj["half"] = ext.round(4).tolist()
        objs.append(obj)
    for o in objs:
        o.pop("_r")
    traj = {"n_frames": n_frames, "step_deg": 360.0 / n_frames, "phase": float(rng.uniform(0, 2 * np.pi)),
            "tilt": round(float(rng.uniform(0.25, 0.45)), 3)}
    texture = {"seed": int(rng.integers(2**31)), "amplitude": 0.6, "scale": 0.2}
    return SceneSpec(tuple(room.round(4).tolist()), objs, traj, dict(camera or {}),
                     round(float(rng.uniform(0.6, 0.9)), 3), texture=texture)


def synth_scene(spec: SceneSpec | dict, out_dir, rng: np.random.Generator | None = None) -> Path:
    """Render ``spec`` into a scene directory; returns the directory.

    ``rng`` is accepted for interface symmetry; rendering itself is deterministic.
    """
    spec = spec if isinstance(spec, SceneSpec) else SceneSpec.from_dict(spec)
    sdf = SceneSDF(spec)
    K = default_intrinsics(spec.camera)
    poses = orbit_trajectory(spec)
    check_trajectory(sdf, poses)
    if sdf(spec.light_position()[None])[0] <= 0:
        raise ValueError(f"light {spec.light_position().tolist()} is not in free space")
    depths, shades = [], []
    for pose in poses:
        z, s = render_view(sdf, K, pose)
        depths.append(z)
        shades.append(s)
    margin = 0.12
    bounds = np.concatenate([-np.full(3, margin), np.asarray(spec.room) + margin])
    out = write_scene(out_dir, K, poses, depths, shades, bounds)
    (Path(out) / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def synth_dataset(spec: dict, out_dir, seed: int = 0) -> list[Path]:
    """Generate scenes from a JSON spec.

    Accepted forms: a single scene spec (has ``room``), a list of scene specs
    under ``scenes``, or ``{"n_scenes": n, ...}`` for random rooms with
    optional ``camera``, ``n_frames``, ``room_range`` and ``n_objects``.
    """
    out_dir = Path(out_dir)
    if "room" in spec:
        return [synth_scene(spec, out_dir)]
    if "scenes" in spec:
        specs = [SceneSpec.from_dict(s) for s in spec["scenes"]]
    elif "n_scenes" in spec:
        rng = np.random.default_rng(seed)
        kw = {}
        if "room_range" in spec:
            kw["room_range"] = tuple(tuple(r) for r in spec["room_range"])
        if "n_objects" in spec:
            kw["n_objects"] = tuple(spec["n_objects"])
        specs = [random_scene_spec(rng, camera=spec.get("camera"), n_frames=int(spec.get("n_frames", 72)), **kw)
                 for _ in range(int(spec["n_scenes"]))]
    else:
        raise ValueError("synth spec needs 'room', 'scenes' or 'n_scenes'")
    return [synth_scene(s, out_dir / f"scene_{i:03d}") for i, s in enumerate(specs)]
