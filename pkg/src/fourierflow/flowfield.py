"""Total query flow: skinning-driven pose flow plus a lattice Fourier shape flow."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .fourier import DEFAULT_HARMONICS, TWO_PI, basis
from .grid import RegularGrid
from .skeleton import JointFlow, Skeleton, bone_transforms, eval_joint_flow
from .skinning import WeightField, skin_points, weights

SFLT_MAGIC = b"SFLT"
SFLT_VERSION = 1
CG_TOL = 1e-10


@dataclass(frozen=True)
class ShapeFlowLattice:
    """Per-node displacement Fourier coefficients on a regular grid.

    ``coeffs`` has shape ``resolution + (3, 2N+1)``; per axis the layout is
    ``a_0..a_N, b_1..b_N`` as in :class:`~fourierflow.fourier.FourierSeries3`.
    """

    grid: RegularGrid
    coeffs: np.ndarray
    angular_scale: float = TWO_PI

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape[:3] != self.grid.resolution or c.ndim != 5 or c.shape[3] != 3 or c.shape[4] % 2 != 1:
            raise ValueError(f"lattice coefficients must be {self.grid.resolution} + (3, 2N+1), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "angular_scale", float(self.angular_scale))

    @classmethod
    def zeros(cls, grid: RegularGrid, n_harmonics: int = DEFAULT_HARMONICS, angular_scale: float = TWO_PI):
        return cls(grid, np.zeros(grid.resolution + (3, 2 * n_harmonics + 1)), angular_scale)

    @property
    def n_harmonics(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    def scaled(self, factor: float) -> ShapeFlowLattice:
        return ShapeFlowLattice(self.grid, self.coeffs * factor, self.angular_scale)

    def __call__(self, points, t) -> np.ndarray:
        return shape_flow(self, points, t)

    def save(self, path) -> None:
        res = self.grid.resolution
        header = SFLT_MAGIC + struct.pack(
            "<I6d3IId", SFLT_VERSION, *self.grid.bbox_min, *self.grid.bbox_max, *res,
            self.n_harmonics, self.angular_scale,
        )
        body = np.transpose(self.coeffs, (2, 1, 0, 3, 4)).astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body)

    @classmethod
    def load(cls, path) -> ShapeFlowLattice:
        data = Path(path).read_bytes()
        if data[:4] != SFLT_MAGIC:
            raise ValueError("not a shape-flow lattice file")
        fmt = "<I6d3IId"
        version, *rest = struct.unpack_from(fmt, data, 4)
        if version != SFLT_VERSION:
            raise ValueError(f"unsupported lattice version {version}")
        lo, hi, res, n, omega = rest[0:3], rest[3:6], tuple(rest[6:9]), rest[9], rest[10]
        raw = np.frombuffer(data, dtype="<f4", offset=4 + struct.calcsize(fmt)).astype(float)
        coeffs = raw.reshape(res[2], res[1], res[0], 3, 2 * n + 1).transpose(2, 1, 0, 3, 4)
        return cls(RegularGrid(lo, hi, res), coeffs, omega)


def shape_flow(lattice: ShapeFlowLattice, points, t: float) -> np.ndarray:
    """Displacement at canonical ``points`` and time ``t`` (trilinear in coefficients)."""
    p = np.asarray(points, dtype=float)
    idx, w = lattice.grid.trilinear(p.reshape(-1, 3))
    phi = basis(float(t), lattice.n_harmonics, lattice.angular_scale)
    node_disp = lattice.coeffs.reshape(-1, 3, phi.shape[0]) @ phi
    out = np.einsum("mc,mcd->md", w, node_disp[idx])
    return out.reshape(p.shape)


@dataclass(frozen=True)
class TotalFlow:
    """Query flow ``pose(p, t) + shape(p, t)``; a missing lattice means zero shape flow."""

    weight_field: WeightField
    skeleton: Skeleton
    joint_flow: JointFlow
    shape_lattice: ShapeFlowLattice | None = None

    def __post_init__(self):
        if self.weight_field.n_bones != self.skeleton.n_bones:
            raise ValueError("weight field and skeleton disagree on the bone count")
        if self.joint_flow.n_joints != self.skeleton.n_joints:
            raise ValueError("joint flow and skeleton disagree on the joint count")

    def without_shape(self) -> TotalFlow:
        return TotalFlow(self.weight_field, self.skeleton, self.joint_flow, None)

    def with_shape(self, lattice: ShapeFlowLattice | None) -> TotalFlow:
        return TotalFlow(self.weight_field, self.skeleton, self.joint_flow, lattice)

    def bone_transforms(self, t: float):
        return bone_transforms(self.skeleton, eval_joint_flow(self.joint_flow, float(t)))

    def pose(self, points, t: float, point_weights=None) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        w = weights(self.weight_field, p) if point_weights is None else point_weights
        return skin_points(p, w, self.bone_transforms(t))

    def shape(self, points, t: float) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.shape_lattice is None:
            return np.zeros_like(p)
        return shape_flow(self.shape_lattice, p, t)

    def __call__(self, points, t: float) -> np.ndarray:
        return total_flow(self, points, t)

    def save(self, path) -> None:
        """Write ``path`` (JSON) plus sibling ``.wfld`` / ``.sflt`` binaries."""
        path = Path(path)
        stem = path.with_suffix("")
        wpath = stem.with_name(stem.name + "_weights.wfld")
        self.weight_field.save(wpath)
        bundle = {
            "schema": 1,
            "skeleton": self.skeleton.to_dict(),
            "joint_flow": self.joint_flow.to_dict(),
            "weight_field": wpath.name,
            "shape_lattice": None,
        }
        if self.shape_lattice is not None:
            lpath = stem.with_name(stem.name + "_shape.sflt")
            self.shape_lattice.save(lpath)
            bundle["shape_lattice"] = lpath.name
        path.write_text(json.dumps(bundle, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> TotalFlow:
        path = Path(path)
        bundle = json.loads(path.read_text(encoding="utf-8"))
        lattice = None
        if bundle.get("shape_lattice"):
            lattice = ShapeFlowLattice.load(path.parent / bundle["shape_lattice"])
        return cls(
            WeightField.load(path.parent / bundle["weight_field"]),
            Skeleton.from_dict(bundle["skeleton"]),
            JointFlow.from_dict(bundle["joint_flow"]),
            lattice,
        )


def total_flow(flow: TotalFlow, points, t: float) -> np.ndarray:
    """Position at time ``t`` of canonical ``points`` under pose plus shape flow."""
    p = np.asarray(points, dtype=float)
    flat = p.reshape(-1, 3)
    return (flow.pose(flat, t) + flow.shape(flat, t)).reshape(p.shape)


def lattice_grid_for(points, resolution=16, padding: float = 0.05) -> RegularGrid:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = padding * max((hi - lo).max(), 1e-6)
    return RegularGrid(lo - pad, hi + pad, resolution)


def _jacobi_cg(matrix, rhs: np.ndarray, tol: float, maxiter: int) -> tuple[np.ndarray, int]:
    """Preconditioned conjugate gradients for a symmetric positive-definite system."""
    inv = 1.0 / matrix.diagonal()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x, 0
    z = inv * r
    d = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        q = matrix @ d
        alpha = rz / (d @ q)
        x += alpha * d
        r -= alpha * q
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = inv * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, maxiter


@dataclass
class LatticeFitInfo:
    objective_before: float
    objective_after: float
    iterations: tuple[int, int, int]
    n_unknowns: int


def fit_shape_lattice(
    flow_without_shape: TotalFlow,
    points,
    times,
    targets,
    resolution=16,
    ridge: float = 1e-6,
    n_harmonics: int | None = None,
    angular_scale: float | None = None,
    grid: RegularGrid | None = None,
    return_info: bool = False,
):
    """Least-squares shape lattice explaining what the pose flow misses.

    Minimizes ``sum |pose(p, t) + shape(p, t) - target|^2 + ridge |coeffs|^2``,
    which is linear in the node coefficients (trilinear weight times Fourier
    basis value). The normal equations are solved per axis with Jacobi
    preconditioned conjugate gradients restricted to nodes touched by samples;
    untouched nodes stay exactly zero.

    Args:
        points, times, targets: correspondence samples ``(S, 3)``, ``(S,)``, ``(S, 3)``.
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    t = np.asarray(times, dtype=float).reshape(-1)
    y = np.asarray(targets, dtype=float).reshape(-1, 3)
    if not (len(p) == len(t) == len(y)):
        raise ValueError("points, times and targets must have equal length")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise ValueError("correspondence samples must be finite")
    n_harmonics = flow_without_shape.joint_flow.n_harmonics if n_harmonics is None else n_harmonics
    omega = flow_without_shape.joint_flow.angular_scale if angular_scale is None else angular_scale
    grid = lattice_grid_for(p, resolution) if grid is None else grid
    dim = 2 * n_harmonics + 1

    residual = y - pose_at_times(flow_without_shape.without_shape(), p, t)

    idx, tw = grid.trilinear(p)
    phi = basis(t, n_harmonics, omega)
    rows = np.repeat(np.arange(len(p)), 8 * dim)
    cols = (idx[:, :, None] * dim + np.arange(dim)[None, None, :]).reshape(-1)
    vals = (tw[:, :, None] * phi[:, None, :]).reshape(-1)
    active, cols_compact = np.unique(cols, return_inverse=True)
    design = scipy.sparse.csr_matrix((vals, (rows, cols_compact)), shape=(len(p), len(active)))
    normal = (design.T @ design).tocsr() + ridge * scipy.sparse.identity(len(active), format="csr")
    maxiter = 10 * len(active)

    solution = np.zeros((grid.n_nodes * dim, 3))
    iterations = []
    rhs = design.T @ residual
    for axis in range(3):
        solution[active, axis], it = _jacobi_cg(normal, rhs[:, axis], CG_TOL, maxiter)
        iterations.append(it)
    coeffs = solution.reshape(grid.n_nodes, dim, 3).transpose(0, 2, 1).reshape(grid.resolution + (3, dim))
    lattice = ShapeFlowLattice(grid, coeffs, omega)
    if not return_info:
        return lattice
    before = float(np.sum(residual**2))
    fitted = design @ solution[active]
    after = float(np.sum((residual - fitted) ** 2) + ridge * np.sum(solution**2))
    return lattice, LatticeFitInfo(before, after, tuple(iterations), len(active))


def pose_at_times(flow: TotalFlow, points, times) -> np.ndarray:
    """Pose flow for per-sample times, grouping samples that share a time."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    t = np.asarray(times, dtype=float).reshape(-1)
    w = weights(flow.weight_field, p)
    out = np.empty_like(p)
    for tv in np.unique(t):
        sel = t == tv
        out[sel] = flow.pose(p[sel], tv, point_weights=w[sel])
    return out


def flow_at_times(flow: TotalFlow, points, times) -> np.ndarray:
    """Total flow for per-sample times."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    t = np.asarray(times, dtype=float).reshape(-1)
    out = pose_at_times(flow, p, t)
    if flow.shape_lattice is not None:
        for tv in np.unique(t):
            sel = t == tv
            out[sel] += shape_flow(flow.shape_lattice, p[sel], tv)
    return out


def ode_baseline_flow(velocity, points, t: float, steps: int) -> np.ndarray:
    """Integrate ``dp/dt = velocity(p, t)`` from 0 to ``t`` with classic RK4.

    ``velocity`` maps ``(M, 3)`` positions and a scalar time to ``(M, 3)``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = np.array(points, dtype=float)
    h = float(t) / steps
    s = 0.0
    for _ in range(steps):
        k1 = velocity(x, s)
        k2 = velocity(x + 0.5 * h * k1, s + 0.5 * h)
        k3 = velocity(x + 0.5 * h * k2, s + 0.5 * h)
        k4 = velocity(x + h * k3, s + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        s += h
    return x
