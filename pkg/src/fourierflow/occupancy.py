"""Canonical occupancy, propagation along flows, corresponded reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .flowfield import TotalFlow
from .mesh import (
    MIN_FACE_AREA,
    TriMesh,
    check_watertight,
    extract_isosurface,
    ray_parity_inside,
    winding_number,
)
from .skinning import weights

__all__ = [
    "CanonicalShape",
    "ReconstructedSequence",
    "extract_isosurface",
    "occupancy",
    "propagate_occupancy",
    "reconstruct_sequence",
    "soft_occupancy",
    "transfer_attributes",
]


@dataclass(frozen=True)
class CanonicalShape:
    """Watertight rest-pose mesh plus optional per-vertex attributes (e.g. RGB)."""

    mesh: TriMesh
    vertex_attributes: np.ndarray | None = None

    def __post_init__(self):
        check_watertight(self.mesh, "canonical mesh")
        areas = self.mesh.face_areas()
        if np.any(areas < MIN_FACE_AREA):
            raise ValueError(f"{int(np.sum(areas < MIN_FACE_AREA))} faces have area below {MIN_FACE_AREA} m^2")
        if self.vertex_attributes is not None:
            attrs = np.array(self.vertex_attributes, dtype=float)
            if attrs.ndim == 1:
                attrs = attrs[:, None]
            if len(attrs) != self.mesh.n_vertices:
                raise ValueError("need one attribute row per vertex")
            attrs.setflags(write=False)
            object.__setattr__(self, "vertex_attributes", attrs)

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def faces(self) -> np.ndarray:
        return self.mesh.faces

    def attributed_mesh(self) -> TriMesh:
        return TriMesh(self.mesh.vertices, self.mesh.faces, self.vertex_attributes)


def occupancy(shape: CanonicalShape | TriMesh, points) -> np.ndarray:
    """Hard inside (1) / outside (0) labels by generalized winding number >= 0.5.

    Points within about 1e-9 m of the surface may land on either side.
    """
    mesh = shape.mesh if isinstance(shape, CanonicalShape) else shape
    return (winding_number(mesh, points) >= 0.5).astype(np.int8)


def occupancy_ray_parity(shape: CanonicalShape | TriMesh, points, direction=(0.5773, -0.4082, 0.7071)) -> np.ndarray:
    """Independent inside test by ray-crossing parity, for cross-checks."""
    mesh = shape.mesh if isinstance(shape, CanonicalShape) else shape
    return ray_parity_inside(mesh, points, direction).astype(np.int8)


def _point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distances from points ``(M, 3)`` to paired triangles ``(M, 3, 3)``."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.einsum("ij,ij->i", n, n)
    # barycentric projection onto the plane
    ap = p - a
    u = np.einsum("ij,ij->i", np.cross(ap, ac), n) / nn
    v = np.einsum("ij,ij->i", np.cross(ab, ap), n) / nn
    inside = (u >= 0) & (v >= 0) & (u + v <= 1)
    plane = np.abs(np.einsum("ij,ij->i", ap, n)) / np.sqrt(nn)

    def seg(x, y):
        d = y - x
        s = np.clip(np.einsum("ij,ij->i", p - x, d) / np.einsum("ij,ij->i", d, d), 0, 1)
        return np.linalg.norm(p - (x + s[:, None] * d), axis=1)

    edge = np.minimum(np.minimum(seg(a, b), seg(b, c)), seg(c, a))
    return np.where(inside, plane, edge)


def signed_distance(shape: CanonicalShape | TriMesh, points, candidates: int = 16) -> np.ndarray:
    """Signed distance (negative inside), using the nearest triangles by centroid."""
    mesh = shape.mesh if isinstance(shape, CanonicalShape) else shape
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles()
    k = min(candidates, len(tri))
    _, nearest = cKDTree(tri.mean(axis=1)).query(p, k=k)
    nearest = nearest.reshape(len(p), k)
    dist = np.full(len(p), np.inf)
    for j in range(k):
        dist = np.minimum(dist, _point_triangle_distance(p, tri[nearest[:, j]]))
    sign = np.where(winding_number(mesh, p) >= 0.5, -1.0, 1.0)
    return sign * dist


def soft_occupancy(shape: CanonicalShape | TriMesh, points, sharpness: float = 2000.0) -> np.ndarray:
    """Occupancy probability ``sigmoid(-sharpness * sdf)``; sharpness in 1/m."""
    return expit(-sharpness * signed_distance(shape, points))


@dataclass(frozen=True)
class ReconstructedSequence:
    """Meshes sharing one face array; vertex i corresponds across all times."""

    times: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 3 or v.shape[0] != len(t) or v.shape[2] != 3:
            raise ValueError("vertices must be (T, V, 3) with one frame per time")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def meshes(self) -> list[TriMesh]:
        return [TriMesh(v, self.faces) for v in self.vertices]


def reconstruct_sequence(flow: TotalFlow, shape: CanonicalShape, times) -> ReconstructedSequence:
    """Advect the canonical surface through the flow at every requested time."""
    times = np.asarray(times, dtype=float).reshape(-1)
    verts = shape.vertices
    w = weights(flow.weight_field, verts)
    frames = np.empty((len(times),) + verts.shape)
    for k, t in enumerate(times):
        frames[k] = flow.pose(verts, t, point_weights=w) + flow.shape(verts, t)
    return ReconstructedSequence(times, frames, shape.faces)


def propagate_occupancy(flow: TotalFlow, shape: CanonicalShape, canonical_points, t: float):
    """Carry canonical points to time ``t``; their occupancy values travel unchanged.

    Returns:
        ``(positions (M, 3), occupancies (M,))``.
    """
    p = np.asarray(canonical_points, dtype=float).reshape(-1, 3)
    return flow(p, t), occupancy(shape, p)


def transfer_attributes(seq: ReconstructedSequence, shape: CanonicalShape) -> list[TriMesh]:
    """Copy canonical per-vertex attributes onto every frame by vertex index."""
    if shape.vertex_attributes is None:
        raise ValueError("canonical shape has no vertex attributes to transfer")
    if seq.vertices.shape[1] != shape.mesh.n_vertices:
        raise ValueError(
            f"sequence has {seq.vertices.shape[1]} vertices but the canonical shape has {shape.mesh.n_vertices}"
        )
    attrs = shape.vertex_attributes
    return [TriMesh(v, seq.faces, attrs) for v in seq.vertices]
