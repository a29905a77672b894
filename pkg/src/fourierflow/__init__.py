"""Fourier query flows for articulated 4D shapes."""

import os

# numba's default TBB layer warns when the installed TBB is too old
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .fourier import FourierSeries3, RankDeficientError, TimedSamples3, fit_least_squares, fit_projection
from .skeleton import BoneTransforms, JointFlow, Skeleton, bone_transforms, default_skeleton, fit_joint_flow
from .skinning import WeightField, build_weight_field, pose_flow, skin_points
from .flowfield import ShapeFlowLattice, TotalFlow, fit_shape_lattice, ode_baseline_flow, total_flow
from .occupancy import CanonicalShape, occupancy, reconstruct_sequence, transfer_attributes
from .fitting import CorrSamples, FitConfig, OccSamples, fit_pipeline, loss_corr, loss_occ, loss_total
from .metrics import chamfer_l1, iou, l1_corr, mpjpe

__version__ = "0.1.0"

__all__ = [
    "BoneTransforms", "CanonicalShape", "CorrSamples", "FitConfig", "FourierSeries3", "JointFlow", "OccSamples",
    "RankDeficientError", "ShapeFlowLattice", "Skeleton", "TimedSamples3", "TotalFlow", "WeightField",
    "bone_transforms", "build_weight_field", "chamfer_l1", "default_skeleton", "fit_joint_flow",
    "fit_least_squares", "fit_pipeline", "fit_projection", "fit_shape_lattice", "iou", "l1_corr", "loss_corr",
    "loss_occ", "loss_total", "mpjpe", "occupancy", "ode_baseline_flow", "pose_flow", "reconstruct_sequence",
    "set_threads", "skin_points", "total_flow", "transfer_attributes",
]


def set_threads(n: int | None = None) -> int:
    """Set numba worker threads; ``0``/``None`` falls back to FOURIERFLOW_THREADS, then all cores."""
    import numba

    if not n:
        n = int(os.environ.get("FOURIERFLOW_THREADS", "0") or 0)
    if n <= 0:
        n = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()
