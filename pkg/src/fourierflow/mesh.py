"""Triangle meshes: validation, inside/outside tests, marching cubes and file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from skimage.measure import marching_cubes

SURFACE_BAND = 1e-9
MIN_FACE_AREA = 1e-12


class EmptyIsosurfaceError(ValueError):
    """The sampled field has no cell straddling the level set."""


class NotWatertightError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh with optional per-vertex colors (``V x 3`` in [0, 1])."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.ascontiguousarray(self.colors, dtype=float).reshape(len(v), -1)
            object.__setattr__(self, "colors", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (positive for outward faces)."""
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def with_vertices(self, vertices) -> TriMesh:
        return TriMesh(vertices, self.faces, self.colors)

    def with_colors(self, colors) -> TriMesh:
        return TriMesh(self.vertices, self.faces, colors)

    def transformed(self, rotation, translation) -> TriMesh:
        return self.with_vertices(self.vertices @ np.asarray(rotation).T + np.asarray(translation))


def edge_manifold_report(faces: np.ndarray) -> tuple[int, int]:
    """Count (boundary-or-nonmanifold edges, inconsistently oriented edges).

    A closed, consistently oriented mesh has every directed edge (i, j) appear
    exactly once and its reverse (j, i) exactly once.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return 0, 0
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n = int(directed.max()) + 1
    key = directed[:, 0] * n + directed[:, 1]
    rkey = directed[:, 1] * n + directed[:, 0]
    uniq, counts = np.unique(key, return_counts=True)
    duplicated = int(np.sum(counts > 1))
    present = np.isin(rkey, uniq)
    unmatched = int(np.sum(~present))
    return unmatched, duplicated


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    unmatched, duplicated = edge_manifold_report(mesh.faces)
    return unmatched == 0 and duplicated == 0


def check_watertight(mesh: TriMesh, name: str = "mesh") -> None:
    unmatched, duplicated = edge_manifold_report(mesh.faces)
    if mesh.n_faces == 0 or unmatched or duplicated:
        raise NotWatertightError(
            f"{name} is not watertight: {unmatched} unmatched and {duplicated} duplicated directed edges"
        )


# ---------------------------------------------------------------------------
# inside/outside kernels


@numba.njit(parallel=True, cache=True)
def _winding_kernel(points, tri):
    m = points.shape[0]
    out = np.zeros(m)
    for i in numba.prange(m):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for f in range(tri.shape[0]):
            ax = tri[f, 0, 0] - px
            ay = tri[f, 0, 1] - py
            az = tri[f, 0, 2] - pz
            bx = tri[f, 1, 0] - px
            by = tri[f, 1, 1] - py
            bz = tri[f, 1, 2] - pz
            cx = tri[f, 2, 0] - px
            cy = tri[f, 2, 1] - py
            cz = tri[f, 2, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (
                la * lb * lc
                + (ax * bx + ay * by + az * bz) * lc
                + (bx * cx + by * cy + bz * cz) * la
                + (cx * ax + cy * ay + cz * az) * lb
            )
            total += 2.0 * math.atan2(det, den)
        out[i] = total / (4.0 * math.pi)
    return out


def winding_number(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number of ``points`` w.r.t. the mesh (solid-angle sum)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    if mesh.n_faces == 0:
        return np.zeros(len(pts))
    return _winding_kernel(pts, np.ascontiguousarray(mesh.triangles()))


@numba.njit(cache=True)
def _bin_triangles(tri, lo, cell, nbx, nby):
    counts = np.zeros(nbx * nby + 1, dtype=np.int64)
    nf = tri.shape[0]
    spans = np.empty((nf, 4), dtype=np.int64)
    for f in range(nf):
        x0 = min(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0])
        x1 = max(tri[f, 0, 0], tri[f, 1, 0], tri[f, 2, 0])
        y0 = min(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1])
        y1 = max(tri[f, 0, 1], tri[f, 1, 1], tri[f, 2, 1])
        i0 = max(0, min(nbx - 1, int((x0 - lo[0]) / cell[0])))
        i1 = max(0, min(nbx - 1, int((x1 - lo[0]) / cell[0])))
        j0 = max(0, min(nby - 1, int((y0 - lo[1]) / cell[1])))
        j1 = max(0, min(nby - 1, int((y1 - lo[1]) / cell[1])))
        spans[f, 0] = i0
        spans[f, 1] = i1
        spans[f, 2] = j0
        spans[f, 3] = j1
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                counts[i * nby + j + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for f in range(nf):
        for i in range(spans[f, 0], spans[f, 1] + 1):
            for j in range(spans[f, 2], spans[f, 3] + 1):
                items[fill[i * nby + j]] = f
                fill[i * nby + j] += 1
    return offsets, items


@numba.njit(parallel=True, cache=True)
def _parity_kernel(points, tri, lo, cell, nbx, nby, offsets, items):
    m = points.shape[0]
    out = np.zeros(m, dtype=np.bool_)
    for k in numba.prange(m):
        px, py, pz = points[k, 0], points[k, 1], points[k, 2]
        i = int((px - lo[0]) / cell[0])
        j = int((py - lo[1]) / cell[1])
        if i < 0 or j < 0 or i >= nbx or j >= nby:
            continue
        b = i * nby + j
        crossings = 0
        for s in range(offsets[b], offsets[b + 1]):
            f = items[s]
            ax = tri[f, 0, 0] - px
            ay = tri[f, 0, 1] - py
            bx = tri[f, 1, 0] - px
            by = tri[f, 1, 1] - py
            cx = tri[f, 2, 0] - px
            cy = tri[f, 2, 1] - py
            # signed areas of the sub-triangles seen from the ray's xy position
            w0 = bx * cy - by * cx
            w1 = cx * ay - cy * ax
            w2 = ax * by - ay * bx
            area = w0 + w1 + w2
            if area == 0.0:
                continue
            if area < 0.0:
                w0, w1, w2, area = -w0, -w1, -w2, -area
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            z = (w0 * tri[f, 0, 2] + w1 * tri[f, 1, 2] + w2 * tri[f, 2, 2]) / area
            if z > pz:
                crossings += 1
        out[k] = crossings % 2 == 1
    return out


def _rotation_to_z(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(d, z)
    s = np.linalg.norm(v)
    c = float(d @ z)
    if s < 1e-15:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / (s * s))


# irrational-ish default direction so rays essentially never graze edges
DEFAULT_RAY = (0.1237, 0.0719, 0.9897)


def ray_parity_inside(mesh: TriMesh, points, direction=DEFAULT_RAY) -> np.ndarray:
    """Inside test by counting ray crossings along ``direction`` (odd = inside)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if mesh.n_faces == 0:
        return np.zeros(len(pts), dtype=bool)
    rot = _rotation_to_z(direction)
    tri = np.ascontiguousarray(mesh.triangles() @ rot.T)
    q = np.ascontiguousarray(pts @ rot.T)
    lo = tri[:, :, :2].reshape(-1, 2).min(axis=0)
    hi = tri[:, :, :2].reshape(-1, 2).max(axis=0)
    nb = int(max(1, min(512, math.sqrt(mesh.n_faces))))
    cell = np.maximum((hi - lo) / nb, 1e-12)
    offsets, items = _bin_triangles(tri, lo, cell, nb, nb)
    return _parity_kernel(q, tri, lo, cell, nb, nb, offsets, items)


def voxelize(mesh: TriMesh, bbox_min, bbox_max, resolution: int) -> np.ndarray:
    """Boolean occupancy of voxel centers on a ``resolution^3`` grid over the box."""
    centers = voxel_centers(bbox_min, bbox_max, resolution)
    return ray_parity_inside(mesh, centers.reshape(-1, 3)).reshape(centers.shape[:3])


def voxel_centers(bbox_min, bbox_max, resolution: int) -> np.ndarray:
    lo = np.asarray(bbox_min, dtype=float)
    hi = np.asarray(bbox_max, dtype=float)
    h = (hi - lo) / resolution
    axes = [lo[d] + (np.arange(resolution) + 0.5) * h[d] for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def grid_nodes(bbox_min, bbox_max, resolution) -> np.ndarray:
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    axes = [np.linspace(bbox_min[d], bbox_max[d], res[d]) for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# ---------------------------------------------------------------------------
# isosurface extraction


def extract_isosurface(
    field,
    bbox_min,
    bbox_max,
    resolution: int,
    level: float = 0.0,
    inside: str = "below",
) -> TriMesh:
    """Marching-cubes mesh of a scalar field's level set.

    Args:
        field: callable mapping ``(M, 3)`` points to ``M`` values, or a
            precomputed ``resolution^3`` node array over the box.
        level: iso value; use 0 for signed distances, 0.5 for occupancy.
        inside: ``"below"`` when inside means ``value < level`` (SDF),
            ``"above"`` for occupancy-like fields.

    The grid is padded with one layer of outside values so the result is
    closed; faces are oriented outward.

    Raises:
        EmptyIsosurfaceError: no sample lies inside (or all do).
    """
    if resolution < 8:
        raise ValueError("isosurface resolution must be at least 8 per axis")
    if inside not in ("below", "above"):
        raise ValueError("inside must be 'below' or 'above'")
    lo = np.asarray(bbox_min, dtype=float)
    hi = np.asarray(bbox_max, dtype=float)
    if callable(field):
        nodes = grid_nodes(lo, hi, resolution)
        values = np.asarray(field(nodes.reshape(-1, 3)), dtype=float).reshape(nodes.shape[:3])
    else:
        values = np.asarray(field, dtype=float)
        if values.shape != (resolution,) * 3:
            raise ValueError(f"field array must have shape {(resolution,) * 3}")
    # work with "inside is negative" so the descent gradient gives outward faces
    signed = values - level if inside == "below" else level - values
    if not np.any(signed < 0):
        raise EmptyIsosurfaceError("field has no inside samples")
    spacing = (hi - lo) / (resolution - 1)
    # nodes at or very near the level create sliver triangles; push them off
    # by 1% of a typical node-to-node change, keeping their side
    steps = np.abs(np.diff(signed, axis=0))
    steps = steps[steps > 0]
    tiny = 1e-2 * float(np.median(steps)) if steps.size else 1e-9
    signed = np.where(np.abs(signed) < tiny, np.where(signed < 0, -tiny, tiny), signed)
    pad = float(np.abs(signed).max()) + 1.0
    padded = np.pad(signed, 1, constant_values=pad)
    verts, faces, _, _ = marching_cubes(padded, 0.0, spacing=tuple(spacing), gradient_direction="descent")
    verts = verts - spacing + lo
    mesh = TriMesh(verts, faces)
    if mesh.volume() < 0:
        mesh = TriMesh(verts, faces[:, ::-1])
    return mesh


# ---------------------------------------------------------------------------
# file formats


def write_obj(mesh: TriMesh, path) -> None:
    path = Path(path)
    lines = []
    if mesh.colors is not None:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %.17g %.17g %.17g %.9g %.9g %.9g" % (*v, *c[:3]))
    else:
        for v in mesh.vertices:
            lines.append("v %.17g %.17g %.17g" % tuple(v))
    for f in mesh.faces + 1:
        lines.append("f %d %d %d" % tuple(f))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    cols = np.asarray(colors) if colors and len(colors) == len(verts) else None
    return TriMesh(np.asarray(verts, dtype=float).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), cols)


def write_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY with float64 positions and optional uchar colors."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
              "property double x", "property double y", "property double z"]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    if mesh.colors is not None:
        rgb = np.clip(np.round(mesh.colors[:, :3] * 255), 0, 255).astype(np.uint8)
        vdt = np.dtype([("p", "<f8", 3), ("c", "u1", 3)])
        vbuf = np.empty(mesh.n_vertices, dtype=vdt)
        vbuf["p"] = mesh.vertices
        vbuf["c"] = rgb
    else:
        vbuf = mesh.vertices.astype("<f8")
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    fbuf = np.empty(mesh.n_faces, dtype=fdt)
    fbuf["n"] = 3
    fbuf["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vbuf.tobytes())
        fh.write(fbuf.tobytes())


def read_ply(path) -> TriMesh:
    """Reader for the files produced by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    has_color = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:2] == ["property", "uchar"] and parts[2] == "red":
            has_color = True
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    vdt = np.dtype([("p", "<f8", 3), ("c", "u1", 3)]) if has_color else np.dtype([("p", "<f8", 3)])
    verts = np.frombuffer(data, dtype=vdt, count=nv, offset=end)
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    faces = np.frombuffer(data, dtype=fdt, count=nf, offset=end + nv * vdt.itemsize)
    colors = verts["c"].astype(float) / 255.0 if has_color else None
    return TriMesh(verts["p"].copy(), faces["i"].astype(np.int64), colors)


def write_sequence(meshes, times, out_dir, stem: str = "frame", fmt: str = "obj") -> Path:
    """Write one mesh file per time plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for k, mesh in enumerate(meshes):
        name = f"{stem}_{k:04d}.{fmt}"
        (write_obj if fmt == "obj" else write_ply)(mesh, out_dir / name)
        files.append(name)
    manifest = {"times": [float(t) for t in times], "files": files}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def read_sequence(directory) -> tuple[list[float], list[TriMesh]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    meshes = []
    for name in manifest["files"]:
        reader = read_ply if name.endswith(".ply") else read_obj
        meshes.append(reader(directory / name))
    return [float(t) for t in manifest["times"]], meshes


def box_mesh(lo, hi) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[lo[0] if i & 1 == 0 else hi[0], lo[1] if i & 2 == 0 else hi[1], lo[2] if i & 4 == 0 else hi[2]]
                  for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(faces))

