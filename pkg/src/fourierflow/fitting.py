"""Training objectives as evaluable losses and the two-stage fitting pipeline."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .fourier import DEFAULT_HARMONICS, TWO_PI
from .flowfield import TotalFlow, fit_shape_lattice, flow_at_times
from .mesh import TriMesh, winding_number
from .occupancy import CanonicalShape, occupancy, soft_occupancy
from .skeleton import Skeleton, eval_joint_flow, fit_joint_flow, mpjpe
from .skinning import WeightField, build_weight_field

DEFAULT_LAMBDA = 10.0


@dataclass(frozen=True)
class CorrSamples:
    """Correspondence samples: canonical point, time, ground-truth position."""

    points: np.ndarray
    times: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        t = np.asarray(self.times, dtype=float).reshape(-1)
        y = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if not (len(p) == len(t) == len(y)):
            raise ValueError("points, times and targets must have equal length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return len(self.times)

    def save(self, path) -> None:
        rows = [{"p": p, "t": t, "target": y}
                for p, t, y in zip(self.points.tolist(), self.times.tolist(), self.targets.tolist())]
        Path(path).write_text(json.dumps(rows), encoding="utf-8")

    @classmethod
    def load(cls, path) -> CorrSamples:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([r["p"] for r in rows], [r["t"] for r in rows], [r["target"] for r in rows])


@dataclass(frozen=True)
class OccSamples:
    """Occupancy samples: canonical point and time.

    The ground truth at the flowed position comes from ``gt_oracle(positions, t)``.
    ``labels``, when given, are frozen GT values used instead of the oracle.
    """

    points: np.ndarray
    times: np.ndarray
    gt_oracle: Callable[[np.ndarray, float], np.ndarray] | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        t = np.asarray(self.times, dtype=float).reshape(-1)
        if len(p) != len(t):
            raise ValueError("points and times must have equal length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "times", t)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=float).reshape(-1))

    def __len__(self) -> int:
        return len(self.times)

    def with_oracle(self, oracle) -> OccSamples:
        return OccSamples(self.points, self.times, oracle, self.labels)

    def save(self, path) -> None:
        rows = []
        for k, (p, t) in enumerate(zip(self.points.tolist(), self.times.tolist())):
            row = {"p": p, "t": t}
            if self.labels is not None:
                row["occ"] = float(self.labels[k])
            rows.append(row)
        Path(path).write_text(json.dumps(rows), encoding="utf-8")

    @classmethod
    def load(cls, path) -> OccSamples:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
        labels = [r["occ"] for r in rows] if rows and all("occ" in r for r in rows) else None
        return cls([r["p"] for r in rows], [r["t"] for r in rows], None, labels)


def mesh_sequence_oracle(times, meshes: list[TriMesh], tol: float = 1e-9):
    """GT occupancy oracle from per-time posed meshes (winding number >= 0.5)."""
    table = [(float(t), m) for t, m in zip(times, meshes)]

    def oracle(positions, t):
        for tv, mesh in table:
            if abs(tv - t) <= tol:
                return (winding_number(mesh, positions) >= 0.5).astype(float)
        raise KeyError(f"no ground-truth mesh at time {t}")

    return oracle


def make_occ_samples(template: CanonicalShape, times, n_per_frame: int, seed: int = 0,
                     near_sigma: float = 0.005, padding: float = 0.1) -> OccSamples:
    """Half uniform in the padded canonical box, half jittered surface vertices."""
    rng = np.random.default_rng(seed + 7919)
    lo, hi = template.mesh.bounds()
    pad = padding * (hi - lo)
    pts, ts = [], []
    for t in times:
        n_uni = n_per_frame // 2
        uni = rng.uniform(lo - pad, hi + pad, size=(n_uni, 3))
        verts = template.vertices[rng.integers(0, template.mesh.n_vertices, n_per_frame - n_uni)]
        near = verts + rng.normal(scale=near_sigma, size=verts.shape)
        pts.append(np.vstack([uni, near]))
        ts.append(np.full(n_per_frame, float(t)))
    return OccSamples(np.vstack(pts), np.concatenate(ts))


def _predicted_occupancy(shape: CanonicalShape, points, soft: bool, sharpness: float) -> np.ndarray:
    if soft:
        return soft_occupancy(shape, points, sharpness)
    return occupancy(shape, points).astype(float)


def loss_occ(flow: TotalFlow, shape: CanonicalShape, samples: OccSamples,
             soft: bool = False, sharpness: float = 2000.0) -> float:
    """Mean ``|o_canonical(p) - o_gt(flow(p, t), t)|`` over the samples."""
    if len(samples) == 0:
        raise ValueError("occupancy loss needs at least one sample")
    pred = _predicted_occupancy(shape, samples.points, soft, sharpness)
    if samples.labels is not None:
        gt = samples.labels
    else:
        if samples.gt_oracle is None:
            raise ValueError("occupancy samples have neither labels nor a GT oracle")
        flowed = flow_at_times(flow, samples.points, samples.times)
        gt = np.empty(len(samples))
        for t in np.unique(samples.times):
            sel = samples.times == t
            gt[sel] = samples.gt_oracle(flowed[sel], float(t))
    return float(np.mean(np.abs(pred - gt)))


def loss_corr(flow: TotalFlow, samples: CorrSamples) -> float:
    """Mean Euclidean distance between flowed canonical points and their targets."""
    if len(samples) == 0:
        raise ValueError("correspondence loss needs at least one sample")
    pred = flow_at_times(flow, samples.points, samples.times)
    return float(np.mean(np.linalg.norm(pred - samples.targets, axis=1)))


def loss_total(flow: TotalFlow, shape: CanonicalShape, occ_samples: OccSamples, corr_samples: CorrSamples,
               lam: float = DEFAULT_LAMBDA) -> float:
    return combine_losses(loss_occ(flow, shape, occ_samples), loss_corr(flow, corr_samples), lam)


def combine_losses(l_occ: float, l_corr: float, lam: float = DEFAULT_LAMBDA) -> float:
    return l_occ + lam * l_corr


@dataclass
class FitConfig:
    n_harmonics: int = DEFAULT_HARMONICS
    angular_scale: float = TWO_PI
    method: str = "least_squares"
    lam: float = DEFAULT_LAMBDA
    joint_ridge: float = 1e-8
    lattice_resolution: int = 16
    lattice_ridge: float = 1e-6
    weight_resolution: int = 64
    weight_sigma: float | None = None
    fit_shape: bool = True


@dataclass
class StageReport:
    name: str
    l_occ: float | None
    l_corr: float
    l_total: float | None
    seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class FitReport:
    config: FitConfig
    stages: list[StageReport] = field(default_factory=list)
    mpjpe_before: float | None = None
    mpjpe_after: float | None = None

    @property
    def final(self) -> StageReport:
        return self.stages[-1]

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "config": asdict(self.config),
            "stages": [asdict(s) for s in self.stages],
            "mpjpe_before_m": self.mpjpe_before,
            "mpjpe_after_m": self.mpjpe_after,
            "final": asdict(self.final) if self.stages else None,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def _evaluate(name, flow, shape, corr, occ, lam, seconds, extra=None) -> StageReport:
    l_corr = loss_corr(flow, corr)
    l_occ = loss_occ(flow, shape, occ) if occ is not None else None
    l_total = combine_losses(l_occ, l_corr, lam) if l_occ is not None else None
    return StageReport(name, l_occ, l_corr, l_total, seconds, extra or {})


def fit_pipeline(
    skeleton: Skeleton,
    shape: CanonicalShape,
    noisy_joints,
    times,
    corr_samples: CorrSamples,
    occ_samples: OccSamples | None = None,
    config: FitConfig | None = None,
    weight_field: WeightField | None = None,
    gt_joints=None,
) -> tuple[TotalFlow, FitReport]:
    """Fit the joint flow, then the shape lattice with the pose flow frozen.

    Stage 1 fits per-joint Fourier series to the noisy joints. Stage 2 fits
    the shape-flow lattice to the correspondence samples on top of the frozen
    pose flow. Losses are reported before fitting (canonical-constant joints)
    and after each stage; MPJPE before/after stage 1 when ``gt_joints`` is given.
    """
    config = config or FitConfig()
    noisy = np.asarray(noisy_joints, dtype=float)
    times = np.asarray(times, dtype=float)
    report = FitReport(config)

    start = time.perf_counter()
    if weight_field is None:
        weight_field = build_weight_field(skeleton, shape, config.weight_resolution, config.weight_sigma)
    from .skeleton import JointFlow

    rest = TotalFlow(weight_field, skeleton, JointFlow.constant(skeleton.joints, config.n_harmonics,
                                                                config.angular_scale))
    report.stages.append(_evaluate("initial", rest, shape, corr_samples, occ_samples, config.lam,
                                   time.perf_counter() - start))

    start = time.perf_counter()
    joint_flow = fit_joint_flow(noisy, times, config.n_harmonics, config.method, config.angular_scale,
                                config.joint_ridge)
    flow = TotalFlow(weight_field, skeleton, joint_flow)
    elapsed = time.perf_counter() - start
    if gt_joints is not None:
        gt = np.asarray(gt_joints, dtype=float)
        report.mpjpe_before = mpjpe(noisy, gt)
        report.mpjpe_after = mpjpe(eval_joint_flow(joint_flow, times), gt)
    report.stages.append(_evaluate("joint_flow", flow, shape, corr_samples, occ_samples, config.lam, elapsed))

    if config.fit_shape:
        start = time.perf_counter()
        lattice, info = fit_shape_lattice(
            flow, corr_samples.points, corr_samples.times, corr_samples.targets,
            config.lattice_resolution, config.lattice_ridge, return_info=True,
        )
        flow = flow.with_shape(lattice)
        elapsed = time.perf_counter() - start
        extra = {"objective_before": info.objective_before, "objective_after": info.objective_after,
                 "cg_iterations": list(info.iterations), "unknowns": info.n_unknowns}
        report.stages.append(_evaluate("shape_flow", flow, shape, corr_samples, occ_samples, config.lam,
                                       elapsed, extra))
    return flow, report
