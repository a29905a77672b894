"""Hand kinematic structure, rigid bone transforms and per-joint Fourier flows."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .fourier import (
    DEFAULT_HARMONICS,
    TWO_PI,
    FourierSeries3,
    TimedSamples3,
    basis,
    fit_least_squares,
    fit_projection,
)

ROOT = -1
MIN_BONE_LENGTH = 1e-9


class DegenerateBoneError(ValueError):
    def __init__(self, bone: int, where: str):
        super().__init__(f"bone {bone} is degenerate (length < {MIN_BONE_LENGTH} m) in the {where} configuration")
        self.bone = bone


@dataclass(frozen=True)
class Skeleton:
    """Canonical joints, kinematic tree, skinning bones and per-bone twist references.

    Attributes:
        joints: ``(J, 3)`` canonical joint positions in meters.
        parents: length-J parent indices; the single root has ``-1``.
        bones: ``(B, 2)`` (parent joint, child joint) pairs.
        twist_axes: ``(B, 3)`` unit vectors fixing each bone's roll.
    """

    joints: np.ndarray
    parents: np.ndarray
    bones: np.ndarray
    twist_axes: np.ndarray

    def __post_init__(self):
        joints = np.array(self.joints, dtype=float).reshape(-1, 3)
        parents = np.array(self.parents, dtype=np.int64).reshape(-1)
        bones = np.array(self.bones, dtype=np.int64).reshape(-1, 2)
        twist = np.array(self.twist_axes, dtype=float).reshape(-1, 3)
        n = len(joints)
        if len(parents) != n:
            raise ValueError("parents must have one entry per joint")
        roots = np.flatnonzero(parents == ROOT)
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root joint, found {len(roots)}")
        if np.any((parents < ROOT) | (parents >= n)):
            raise ValueError("parent index out of range")
        # every joint must reach the root without revisiting a joint
        for j in range(n):
            seen, k = set(), j
            while k != ROOT:
                if k in seen:
                    raise ValueError(f"kinematic tree has a cycle through joint {j}")
                seen.add(k)
                k = parents[k]
        if len(twist) != len(bones):
            raise ValueError("need one twist axis per bone")
        for b, (p, c) in enumerate(bones):
            if not (0 <= c < n and parents[c] == p):
                raise ValueError(f"bone {b} ({p}, {c}) is not a parent-child pair")
        if np.any(np.abs(np.linalg.norm(twist, axis=1) - 1.0) > 1e-9):
            raise ValueError("twist axes must be unit length")
        for b, (p, c) in enumerate(bones):
            d = joints[c] - joints[p]
            length = np.linalg.norm(d)
            if length < MIN_BONE_LENGTH:
                raise DegenerateBoneError(b, "canonical")
            if np.linalg.norm(np.cross(d / length, twist[b])) < 1e-6:
                raise ValueError(f"twist axis of bone {b} is parallel to the bone")
        for name, arr in (("joints", joints), ("parents", parents), ("bones", bones), ("twist_axes", twist)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parents == ROOT)[0])

    def depth(self, joint: int) -> int:
        d = 0
        while self.parents[joint] != ROOT:
            joint = self.parents[joint]
            d += 1
        return d

    def children(self, joint: int) -> np.ndarray:
        return np.flatnonzero(self.parents == joint)

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.joints[self.bones[:, 1]] - self.joints[self.bones[:, 0]], axis=1)

    def to_dict(self) -> dict:
        return {
            "joints": self.joints.tolist(),
            "parents": self.parents.tolist(),
            "bones": self.bones.tolist(),
            "twist_axes": self.twist_axes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Skeleton:
        return cls(data["joints"], data["parents"], data["bones"], data["twist_axes"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Skeleton:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_skeleton() -> Skeleton:
    """The packaged 21-joint, 16-bone procedural hand."""
    text = resources.files("fourierflow.data").joinpath("hand21.json").read_text(encoding="utf-8")
    return Skeleton.from_dict(json.loads(text))


@dataclass(frozen=True)
class BoneTransforms:
    """Per-bone rigid transforms ``x -> R x + t`` w.r.t. the canonical pose."""

    rotations: np.ndarray
    translations: np.ndarray

    def __len__(self) -> int:
        return len(self.rotations)

    @classmethod
    def identity(cls, n_bones: int) -> BoneTransforms:
        return cls(np.tile(np.eye(3), (n_bones, 1, 1)), np.zeros((n_bones, 3)))

    @classmethod
    def uniform(cls, rotation, translation, n_bones: int) -> BoneTransforms:
        return cls(np.tile(np.asarray(rotation, dtype=float), (n_bones, 1, 1)),
                   np.tile(np.asarray(translation, dtype=float), (n_bones, 1)))

    def apply(self, bone: int, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotations[bone].T + self.translations[bone]

    def matrices(self) -> np.ndarray:
        out = np.tile(np.eye(4), (len(self), 1, 1))
        out[:, :3, :3] = self.rotations
        out[:, :3, 3] = self.translations
        return out


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Best rotation taking centered ``src`` onto centered ``dst``."""
    a = src - src.mean(axis=0)
    b = dst - dst.mean(axis=0)
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def _frame(direction: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose first column is ``direction`` and second lies toward ``reference``."""
    u = reference - direction * (direction @ reference)
    norm = np.linalg.norm(u)
    if norm < 1e-12:
        # reference collinear with the bone: fall back to any perpendicular
        helper = np.eye(3)[np.argmin(np.abs(direction))]
        u = helper - direction * (direction @ helper)
        norm = np.linalg.norm(u)
    u = u / norm
    return np.column_stack([direction, u, np.cross(direction, u)])


def root_rotation(skeleton: Skeleton, posed_joints) -> np.ndarray:
    """Rotation of the root frame from the root and its direct children (Kabsch)."""
    posed = np.asarray(posed_joints, dtype=float)
    r = skeleton.root
    idx = np.concatenate([[r], skeleton.children(r)])
    if len(idx) < 3:
        return np.eye(3)
    return _kabsch(skeleton.joints[idx], posed[idx])


def bone_transforms(skeleton: Skeleton, posed_joints) -> BoneTransforms:
    """Rigid transform per bone mapping the canonical segment onto the posed one.

    Each bone's rotation sends the canonical bone direction to the posed
    direction exactly; the remaining roll is fixed by carrying the bone's twist
    axis through the parent frame (the nearest ancestor bone's rotation, or
    the root frame for bones leaving the root) and aligning the projections of
    the canonical and carried twist axes onto the planes normal to the bone.
    The translation pins the canonical parent joint to the posed parent joint.

    Raises:
        DegenerateBoneError: a bone has (near) zero length in the posed joints.
    """
    posed = np.asarray(posed_joints, dtype=float).reshape(skeleton.n_joints, 3)
    if not np.all(np.isfinite(posed)):
        raise ValueError("posed joints must be finite")
    canon = skeleton.joints
    n_bones = skeleton.n_bones
    if np.array_equal(posed, canon):
        return BoneTransforms.identity(n_bones)
    rotations = np.empty((n_bones, 3, 3))
    translations = np.empty((n_bones, 3))
    # rotation attached to each joint by the bone ending there
    joint_frame: dict[int, np.ndarray] = {skeleton.root: root_rotation(skeleton, posed)}
    order = sorted(range(n_bones), key=lambda b: skeleton.depth(int(skeleton.bones[b, 1])))
    for b in order:
        p, c = (int(x) for x in skeleton.bones[b])
        dc = canon[c] - canon[p]
        dp = posed[c] - posed[p]
        lp = np.linalg.norm(dp)
        if lp < MIN_BONE_LENGTH:
            raise DegenerateBoneError(b, "posed")
        dc = dc / np.linalg.norm(dc)
        dp = dp / lp
        parent_rot = _ancestor_frame(skeleton, p, joint_frame)
        twist = skeleton.twist_axes[b]
        rot = _frame(dp, parent_rot @ twist) @ _frame(dc, twist).T
        rotations[b] = rot
        translations[b] = posed[p] - rot @ canon[p]
        joint_frame[c] = rot
    return BoneTransforms(rotations, translations)


def _ancestor_frame(skeleton: Skeleton, joint: int, joint_frame: dict) -> np.ndarray:
    k = joint
    while k not in joint_frame:
        k = int(skeleton.parents[k])
    return joint_frame[k]


# ---------------------------------------------------------------------------
# joint flows


@dataclass(frozen=True)
class JointFlow:
    """One Fourier trajectory per joint, sharing harmonic count and angular scale.

    Stored as a ``(J, 3, 2N+1)`` coefficient array for vectorized evaluation.
    """

    coeffs: np.ndarray
    angular_scale: float = TWO_PI

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[1] != 3 or c.shape[2] % 2 != 1:
            raise ValueError(f"joint flow coefficients must be (J, 3, 2N+1), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "angular_scale", float(self.angular_scale))

    @classmethod
    def from_series(cls, flows) -> JointFlow:
        flows = list(flows)
        if not flows:
            raise ValueError("a joint flow needs at least one joint")
        n, w = flows[0].n_harmonics, flows[0].angular_scale
        if any(f.n_harmonics != n or f.angular_scale != w for f in flows):
            raise ValueError("all joint series must share n_harmonics and angular_scale")
        return cls(np.stack([f.coeffs for f in flows]), w)

    @classmethod
    def constant(cls, joints, n_harmonics: int = DEFAULT_HARMONICS, angular_scale: float = TWO_PI) -> JointFlow:
        joints = np.asarray(joints, dtype=float)
        c = np.zeros((len(joints), 3, 2 * n_harmonics + 1))
        c[:, :, 0] = 2.0 * joints
        return cls(c, angular_scale)

    @property
    def n_joints(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_harmonics(self) -> int:
        return (self.coeffs.shape[2] - 1) // 2

    @property
    def flows(self) -> list[FourierSeries3]:
        return [FourierSeries3(c, self.angular_scale) for c in self.coeffs]

    def __call__(self, t) -> np.ndarray:
        return eval_joint_flow(self, t)

    def to_dict(self) -> dict:
        return {"angular_scale": self.angular_scale, "n_harmonics": self.n_harmonics,
                "joints": [f.to_dict() for f in self.flows]}

    @classmethod
    def from_dict(cls, data: dict) -> JointFlow:
        return cls.from_series(FourierSeries3.from_dict(d) for d in data["joints"])


def eval_joint_flow(flow: JointFlow, t) -> np.ndarray:
    """Joint positions at ``t``: ``(J, 3)`` for scalar t, ``t.shape + (J, 3)`` otherwise."""
    phi = basis(t, flow.n_harmonics, flow.angular_scale)
    return np.einsum("...k,jdk->...jd", phi, flow.coeffs)


def fit_joint_flow(
    noisy_joints,
    times,
    n_harmonics: int = DEFAULT_HARMONICS,
    method: str = "least_squares",
    angular_scale: float = TWO_PI,
    ridge: float = 1e-8,
) -> JointFlow:
    """Fit an independent Fourier series to every joint's trajectory.

    Args:
        noisy_joints: ``(T, J, 3)`` per-frame observations.
        times: ``T`` increasing frame times in [0, 1].
        method: ``"least_squares"`` or ``"projection"`` (trapezoidal low-pass).
    """
    frames = np.asarray(noisy_joints, dtype=float)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ValueError(f"joints must be (T, J, 3), got {frames.shape}")
    if len(frames) < 2:
        raise ValueError("joint flow fitting needs at least 2 frames")
    if not np.all(np.isfinite(frames)):
        raise ValueError("joint observations must be finite")
    if method == "least_squares":
        fitter = lambda s: fit_least_squares(s, n_harmonics, angular_scale, ridge)  # noqa: E731
    elif method == "projection":
        fitter = lambda s: fit_projection(s, n_harmonics, angular_scale)  # noqa: E731
    else:
        raise ValueError(f"unknown fitting method {method!r}")
    series = [fitter(TimedSamples3(times, frames[:, j])) for j in range(frames.shape[1])]
    return JointFlow.from_series(series)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (meters); extra leading axes are averaged too."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))
