"""Marching cubes on TSDF voxels and triangle-mesh PLY I/O.

The triangle table is generated at import time rather than transcribed.
On every cube face the crossing points are joined by segments that separate
each run of inside corners from the rest, so an ambiguous face (diagonal
sign pattern) keeps its inside corners apart. Both cubes sharing a face then
emit the same segments. The segments of a cube chain into closed loops,
and each loop is triangulated without introducing an edge that could also
appear in the neighbouring cube. Together with vertices shared by global
edge key this makes the surface of any fully observed closed region
watertight.

Corner values ``<= iso`` count as inside (negative); triangles face the
positive side.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import grid

CORNERS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)  # index = 4x + 2y + z
EDGES = np.array([(a, b) for a in range(8) for b in range(a + 1, 8)
                  if np.abs(CORNERS[a] - CORNERS[b]).sum() == 1], dtype=np.int64)
EDGE_AXIS = np.argmax(CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]], axis=1)


class PlyError(ValueError):
    """Malformed PLY file; the message carries the byte offset."""


# -- triangle table -----------------------------------------------------------------

def _faces() -> list[list[int]]:
    """The six faces as corner cycles, counter-clockwise seen from outside the cube."""
    faces = []
    for axis in range(3):
        for side in (0, 1):
            ids = [i for i in range(8) if CORNERS[i, axis] == side]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            pts = CORNERS[ids].astype(float)
            c = pts.mean(axis=0)
            u = np.eye(3)[(axis + 1) % 3]
            v = np.cross(normal, u)
            ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
            faces.append([ids[i] for i in np.argsort(ang)])
    return faces


FACES = _faces()
_EDGE_OF = {(int(a), int(b)): i for i, (a, b) in enumerate(EDGES)}
_EDGE_OF.update({(b, a): i for (a, b), i in list(_EDGE_OF.items())})
_EDGE_FACES = [frozenset(f for f, cyc in enumerate(FACES) if a in cyc and b in cyc) for a, b in EDGES]


def _loops(inside: np.ndarray) -> list[list[int]]:
    nxt = {}
    for cyc in FACES:
        s = [bool(inside[c]) for c in cyc]
        for k in range(4):
            # a run of inside corners starts at corner k and ends where the next outside corner begins
            if s[k] and not s[k - 1]:
                entry = _EDGE_OF[(cyc[k - 1], cyc[k])]
                j = k
                while s[(j + 1) % 4]:
                    j += 1
                exit_ = _EDGE_OF[(cyc[j % 4], cyc[(j + 1) % 4])]
                nxt[entry] = exit_
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, e = [], start
        while e not in seen:
            seen.add(e)
            loop.append(e)
            e = nxt[e]
        loops.append(loop)
    return loops


def _triangulate(loop: list[int]) -> list[tuple[int, int, int]]:
    """Fan triangulation avoiding diagonals between crossings on a common face.

    Such a diagonal could coincide with one from the neighbouring cube and
    break the two-triangles-per-edge property.
    """
    n = len(loop)
    if n == 3:
        return [tuple(loop)]
    for s in range(n):
        rot = loop[s:] + loop[:s]
        diags = [(rot[0], rot[i]) for i in range(2, n - 1)]
        if all(not (_EDGE_FACES[a] & _EDGE_FACES[b]) for a, b in diags):
            return [(rot[0], rot[i], rot[i + 1]) for i in range(1, n - 1)]
    raise RuntimeError(f"no safe fan for loop {loop}")  # never reached for the 256 cases


def _build_table() -> list[np.ndarray]:
    table = []
    for case in range(256):
        inside = np.array([(case >> c) & 1 for c in range(8)], dtype=bool)
        tris = [t for loop in _loops(inside) for t in _triangulate(loop)]
        table.append(np.array(tris, dtype=np.int64).reshape(-1, 3))
    return table


TRI_TABLE = _build_table()


# -- mesh ------------------------------------------------------------------------------

@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertex coordinates")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ValueError("one normal per vertex required")

    @classmethod
    def empty(cls) -> TriMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edges(self) -> np.ndarray:
        """Undirected edge of every triangle side, ``(3m, 2)`` with sorted endpoints."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_use_counts(self) -> np.ndarray:
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return len(self.triangles) > 0 and bool(np.all(self.edge_use_counts() == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0))
        return len(used) - n_edges + len(self.triangles)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def sample_points(self, density: float, rng: np.random.Generator) -> np.ndarray:
        """Uniform surface samples (``density`` points per square metre) plus every vertex."""
        if self.is_empty:
            return self.vertices.copy()
        area = self.areas()
        total = float(area.sum())
        n = int(round(total * density))
        pts = [self.vertices]
        if n > 0 and total > 0:
            tri = rng.choice(len(area), size=n, p=area / total)
            r1, r2 = rng.random(n), rng.random(n)
            flip = r1 + r2 > 1
            r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
            v = self.vertices[self.triangles[tri]]
            pts.append(v[:, 0] + r1[:, None] * (v[:, 1] - v[:, 0]) + r2[:, None] * (v[:, 2] - v[:, 0]))
        return np.concatenate(pts)


# -- extraction ------------------------------------------------------------------------

def _extract(values: np.ndarray, base_keys: np.ndarray, level: str, origin, iso: float) -> TriMesh:
    """Core marching cubes over cubes given as ``(n, 8)`` corner values and ``(n, 3)`` min-corner keys."""
    if len(values) == 0:
        return TriMesh.empty()
    inside = values <= iso
    case = (inside.astype(np.int64) << np.arange(8)).sum(axis=1)
    active = (case != 0) & (case != 255)
    values, base_keys, case = values[active], base_keys[active], case[active]
    if len(case) == 0:
        return TriMesh.empty()

    tri_cube, tri_edges = [], []
    for c in np.unique(case):
        tris = TRI_TABLE[c]
        cubes = np.flatnonzero(case == c)
        tri_cube.append(np.repeat(cubes, len(tris)))
        tri_edges.append(np.tile(tris, (len(cubes), 1)))
    tri_cube = np.concatenate(tri_cube)
    tri_edges = np.concatenate(tri_edges)

    # global edge id: (key of the edge's lower corner, axis)
    flat_cube = np.repeat(tri_cube, 3)
    flat_edge = tri_edges.reshape(-1)
    lower = base_keys[flat_cube] + CORNERS[EDGES[flat_edge, 0]]
    ident = np.concatenate([lower, EDGE_AXIS[flat_edge][:, None]], axis=1)
    uniq, first, inv = np.unique(ident, axis=0, return_index=True, return_inverse=True)

    cube, edge = flat_cube[first], flat_edge[first]
    s0 = values[cube, EDGES[edge, 0]] - iso
    s1 = values[cube, EDGES[edge, 1]] - iso
    t = s0 / (s0 - s1)
    p0 = grid.key_to_center(base_keys[cube] + CORNERS[EDGES[edge, 0]], level, origin)
    p1 = grid.key_to_center(base_keys[cube] + CORNERS[EDGES[edge, 1]], level, origin)
    verts = p0 + t[:, None] * (p1 - p0)
    return TriMesh(verts, inv.reshape(-1, 3))


def marching_cubes(tsdf: grid.SparseVoxelGrid, iso: float = 0.0) -> TriMesh:
    """Isosurface of a sparse TSDF grid.

    ``tsdf.values`` is either ``(n,)`` TSDF values or ``(n, 2)`` rows of
    ``(tsdf, weight)``; voxels with zero weight count as unobserved. A cube is
    processed only when all eight corners are present and observed.
    """
    vals = np.asarray(tsdf.values, dtype=np.float64)
    if vals.ndim == 2:
        s, w = vals[:, 0], vals[:, 1]
        present = w > 0
    else:
        s, present = vals, np.ones(len(vals), bool)
    if len(s) == 0:
        return TriMesh.empty()
    base = tsdf.keys[present]
    rows = tsdf.lookup((base[:, None, :] + CORNERS[None]).reshape(-1, 3)).reshape(-1, 8)
    ok = np.all(rows >= 0, axis=1)
    ok[ok] = np.all(present[rows[ok]], axis=1)
    return _extract(s[rows[ok]], base[ok], tsdf.level, tsdf.origin, iso)


def marching_cubes_dense(tsdf: np.ndarray, observed: np.ndarray | None = None, origin_key=(0, 0, 0),
                         level: str = "fine", iso: float = 0.0) -> TriMesh:
    """Same as :func:`marching_cubes` for a dense block whose index (0, 0, 0) has key ``origin_key``."""
    tsdf = np.asarray(tsdf, dtype=np.float64)
    obs = np.ones(tsdf.shape, bool) if observed is None else np.asarray(observed, bool)
    if min(tsdf.shape) < 2:
        return TriMesh.empty()
    X, Y, Z = tsdf.shape
    corner_vals, corner_obs = [], []
    for dx, dy, dz in CORNERS:
        sl = (slice(dx, X - 1 + dx), slice(dy, Y - 1 + dy), slice(dz, Z - 1 + dz))
        corner_vals.append(tsdf[sl].reshape(-1))
        corner_obs.append(obs[sl].reshape(-1))
    vals = np.stack(corner_vals, axis=1)
    ok = np.all(np.stack(corner_obs, axis=1), axis=1)
    inside = vals <= iso
    ok &= inside.any(axis=1) & ~inside.all(axis=1)
    idx = np.flatnonzero(ok)
    base = np.stack(np.unravel_index(idx, (X - 1, Y - 1, Z - 1)), axis=1) + np.asarray(origin_key, np.int64)
    return _extract(vals[idx], base, level, np.zeros(3), iso)


# -- PLY ----------------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_mesh(mesh: TriMesh, path, ascii: bool = False, comments=()) -> None:
    """PLY with float32 vertices and int32 indices; binary little-endian unless ``ascii``.

    Each entry of ``comments`` becomes one ``comment`` header line.
    """
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    fmt = "ascii" if ascii else "binary_little_endian"
    notes = "".join(f"comment {' '.join(str(c).split())}\n" for c in comments)
    header = (f"ply\nformat {fmt} 1.0\n{notes}element vertex {nv}\n"
              "property float x\nproperty float y\nproperty float z\n"
              f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n")
    if ascii:
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.astype(np.float32).tolist()]
        lines += ["3 " + " ".join(str(i) for i in t) for t in mesh.triangles.tolist()]
        Path(path).write_text(header + "\n".join(lines) + ("\n" if lines else ""))
        return
    faces = np.zeros(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(faces.tobytes())


def _parse_header(buf: bytes) -> tuple[str, list, int]:
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise PlyError("byte 0: not a PLY file (missing 'ply' magic or 'end_header')")
    nl = buf.find(b"\n", end)
    body = nl + 1 if nl >= 0 else len(buf)
    fmt, elements, offset = None, [], 0
    for raw in buf[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        where = offset
        offset += len(raw) + 1
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"byte {where}: unsupported format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise PlyError(f"byte {where}: bad element line {line!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"byte {where}: property before any element")
            if len(parts) == 5 and parts[1] == "list" and parts[2] in _PLY_TYPES and parts[3] in _PLY_TYPES:
                elements[-1][2].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
            else:
                raise PlyError(f"byte {where}: bad property line {line!r}")
        else:
            raise PlyError(f"byte {where}: unexpected header line {line!r}")
    if fmt is None:
        raise PlyError("byte 0: missing format line")
    return fmt, elements, body


def read_mesh(path) -> TriMesh:
    """Read a triangle mesh from an ASCII or binary PLY file."""
    buf = Path(path).read_bytes()
    fmt, elements, pos = _parse_header(buf)
    verts, tris = np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    if fmt == "ascii":
        tokens = [(m.start() + pos, m.group()) for m in re.finditer(rb"\S+", buf[pos:])]
        k = 0

        def number(kind):
            nonlocal k
            if k >= len(tokens):
                raise PlyError(f"byte {len(buf)}: unexpected end of data")
            at, tok = tokens[k]
            k += 1
            try:
                return kind(tok)
            except ValueError:
                raise PlyError(f"byte {at}: cannot parse {tok!r} as a number") from None

        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for pname, t, item_t in props:
                    if item_t is None:
                        row.append(number(float))
                    else:
                        n = number(int)
                        row.append([number(float) for _ in range(n)])
                rows.append(row)
            verts, tris = _collect(name, props, rows, verts, tris, tokens[min(k, len(tokens) - 1)][0] if tokens else pos)
        return TriMesh(verts, tris)

    end = "<" if fmt == "binary_little_endian" else ">"
    for name, count, props in elements:
        if all(item_t is None for _, _, item_t in props):
            dt = np.dtype([(p, end + t) for p, t, _ in props])
            need = count * dt.itemsize
            if pos + need > len(buf):
                raise PlyError(f"byte {len(buf)}: file truncated in element {name!r} (needs {need} bytes from {pos})")
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
            pos += need
            rows = [[arr[p] for p, _, _ in props]]
            verts, tris = _collect_columns(name, props, rows[0], verts, tris)
            continue
        # lists: fast path for a single "count + 3 indices" property, else a generic loop
        if len(props) == 1 and props[0][2] is not None:
            _, ct, it = props[0]
            dt = np.dtype([("n", end + ct), ("idx", end + it, (3,))])
            need = count * dt.itemsize
            if pos + need <= len(buf):
                arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
                if np.all(arr["n"] == 3):
                    if name == "face":
                        tris = arr["idx"].astype(np.int64)
                    pos += need
                    continue
        rows = []
        for _ in range(count):
            row = []
            for pname, t, item_t in props:
                size = np.dtype(t).itemsize
                if pos + size > len(buf):
                    raise PlyError(f"byte {pos}: file truncated in element {name!r}")
                val = np.frombuffer(buf, dtype=end + t, count=1, offset=pos)[0]
                pos += size
                if item_t is None:
                    row.append(float(val))
                else:
                    isz = np.dtype(item_t).itemsize
                    if pos + int(val) * isz > len(buf):
                        raise PlyError(f"byte {pos}: file truncated in list {pname!r}")
                    row.append(np.frombuffer(buf, dtype=end + item_t, count=int(val), offset=pos).tolist())
                    pos += int(val) * isz
            rows.append(row)
        verts, tris = _collect(name, props, rows, verts, tris, pos)
    return TriMesh(verts, tris)


def _collect_columns(name, props, cols, verts, tris):
    if name == "vertex":
        names = [p for p, _, _ in props]
        try:
            verts = np.stack([np.asarray(cols[names.index(c)], np.float64) for c in "xyz"], axis=1)
        except ValueError:
            raise PlyError("byte 0: vertex element lacks x/y/z properties") from None
    return verts, tris


def _collect(name, props, rows, verts, tris, pos):
    names = [p for p, _, _ in props]
    if name == "vertex":
        try:
            idx = [names.index(c) for c in "xyz"]
        except ValueError:
            raise PlyError("byte 0: vertex element lacks x/y/z properties") from None
        verts = np.array([[r[i] for i in idx] for r in rows], dtype=np.float64).reshape(-1, 3)
    elif name == "face":
        key = "vertex_indices" if "vertex_indices" in names else "vertex_index"
        if key not in names:
            raise PlyError(f"byte {pos}: face element lacks vertex_indices")
        i = names.index(key)
        faces = [r[i] for r in rows]
        if any(len(f) != 3 for f in faces):
            raise PlyError(f"byte {pos}: only triangle faces are supported")
        tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return verts, tris


def euler_characteristic(mesh: TriMesh) -> int:
    return mesh.euler_characteristic()


__all__ = ["CORNERS", "EDGES", "FACES", "PlyError", "TRI_TABLE", "TriMesh", "marching_cubes",
           "marching_cubes_dense", "read_mesh", "write_mesh", "euler_characteristic"]
