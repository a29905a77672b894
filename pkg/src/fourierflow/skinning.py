"""Linear blend skinning with a grid-sampled skinning-weight field."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .grid import RegularGrid
from .skeleton import BoneTransforms, JointFlow, Skeleton, bone_transforms, eval_joint_flow

SIMPLEX_TOL = 1e-4
WFLD_MAGIC = b"WFLD"
WFLD_VERSION = 1


@dataclass(frozen=True)
class WeightField:
    """Skinning weights stored at the nodes of a regular grid.

    Attributes:
        grid: node layout over the canonical bounding box.
        values: ``(nx, ny, nz, B)`` simplex weight vectors.
    """

    grid: RegularGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[:3] != self.grid.resolution or v.ndim != 4:
            raise ValueError(f"weights must have shape {self.grid.resolution} + (B,), got {v.shape}")
        if np.any(v < -1e-12) or np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("stored weight vectors must lie on the probability simplex")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_flat", v.reshape(-1, v.shape[-1]))

    @property
    def n_bones(self) -> int:
        return self.values.shape[-1]

    def __call__(self, points) -> np.ndarray:
        return weights(self, points)

    def save(self, path) -> None:
        """Binary file: magic, version, bbox, resolution, B, then float32 weights (x fastest)."""
        res = self.grid.resolution
        header = WFLD_MAGIC + struct.pack(
            "<I6d3II", WFLD_VERSION, *self.grid.bbox_min, *self.grid.bbox_max, *res, self.n_bones
        )
        body = np.transpose(self.values, (2, 1, 0, 3)).astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body)

    @classmethod
    def load(cls, path) -> WeightField:
        data = open(path, "rb").read()
        if data[:4] != WFLD_MAGIC:
            raise ValueError("not a weight field file")
        fmt = "<I6d3II"
        version, *rest = struct.unpack_from(fmt, data, 4)
        if version != WFLD_VERSION:
            raise ValueError(f"unsupported weight field version {version}")
        lo, hi, res, n_bones = rest[0:3], rest[3:6], tuple(rest[6:9]), rest[9]
        offset = 4 + struct.calcsize(fmt)
        raw = np.frombuffer(data, dtype="<f4", offset=offset).astype(float)
        vals = raw.reshape(res[2], res[1], res[0], n_bones).transpose(2, 1, 0, 3)
        vals = np.clip(vals, 0.0, None)
        vals = vals / vals.sum(axis=-1, keepdims=True)
        return cls(RegularGrid(lo, hi, res), vals)


def point_segment_distance(points, a, b) -> np.ndarray:
    """Distances from ``(M, 3)`` points to each segment ``a[k]-b[k]``; returns ``(M, K)``."""
    p = np.asarray(points, dtype=float)[:, None, :]
    a = np.asarray(a, dtype=float)[None]
    ab = np.asarray(b, dtype=float)[None] - a
    s = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[..., None] * ab), axis=-1)


def bone_distance_weights(skeleton: Skeleton, points, sigma: float) -> np.ndarray:
    """Normalized ``exp(-d_b^2 / sigma^2)`` over bones, ``d_b`` the distance to bone b."""
    a = skeleton.joints[skeleton.bones[:, 0]]
    b = skeleton.joints[skeleton.bones[:, 1]]
    d = point_segment_distance(points, a, b)
    return softmax(-(d / sigma) ** 2, axis=1)


def default_sigma(skeleton: Skeleton) -> float:
    return 0.5 * float(np.median(skeleton.bone_lengths()))


def build_weight_field(
    skeleton: Skeleton,
    template=None,
    resolution=64,
    sigma: float | None = None,
    padding: float = 0.1,
    chunk: int = 65536,
) -> WeightField:
    """Sample distance-based skinning weights on a grid around the canonical hand.

    The box covers the skeleton joints and, when given, the template mesh,
    padded by ``padding`` times its extent on every side.
    """
    sigma = default_sigma(skeleton) if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = skeleton.joints
    if template is not None:
        pts = np.vstack([pts, template.mesh.vertices])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = padding * (hi - lo).max()
    grid = RegularGrid(lo - pad, hi + pad, resolution)
    nodes = grid.nodes().reshape(-1, 3)
    out = np.empty((len(nodes), skeleton.n_bones))
    for s in range(0, len(nodes), chunk):
        out[s : s + chunk] = bone_distance_weights(skeleton, nodes[s : s + chunk], sigma)
    return WeightField(grid, out.reshape(grid.resolution + (skeleton.n_bones,)))


def weights(field: WeightField, points) -> np.ndarray:
    """Trilinearly interpolated weight vectors, renormalized; ``(M, B)``."""
    idx, w = field.grid.trilinear(points)
    vec = np.einsum("mc,mcb->mb", w, field._flat[idx])
    return vec / vec.sum(axis=1, keepdims=True)


def skin_points(points, weight_vectors, transforms: BoneTransforms) -> np.ndarray:
    """Blend the bone-wise rigidly transformed points: ``sum_b w_b (R_b p + t_b)``."""
    p = np.asarray(points, dtype=float)
    w = np.asarray(weight_vectors, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    w = w.reshape(len(p), -1)
    if w.shape[1] != len(transforms):
        raise ValueError(f"{w.shape[1]} weights per point but {len(transforms)} bone transforms")
    if np.any(w < -SIMPLEX_TOL) or np.any(np.abs(w.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("weight vectors must lie on the simplex")
    # blend R_b - I so identity transforms return the input bit for bit
    delta = np.einsum("mb,bij->mij", w, transforms.rotations - np.eye(3))
    trans = w @ transforms.translations
    out = p + (np.einsum("mij,mj->mi", delta, p) + trans)
    return out[0] if single else out


def pose_flow(field: WeightField, skeleton: Skeleton, joint_flow: JointFlow, points, t: float) -> np.ndarray:
    """Canonical points carried to time ``t`` by skinning with the joint flow's bones."""
    p = np.asarray(points, dtype=float)
    transforms = bone_transforms(skeleton, eval_joint_flow(joint_flow, float(t)))
    return skin_points(p, weights(field, p.reshape(-1, 3)).reshape(p.shape[:-1] + (-1,)), transforms)
