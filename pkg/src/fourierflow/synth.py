"""Deterministic synthetic hands: capsule template, scripted motion, GT meshes and noisy joints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .fourier import TWO_PI, basis
from .mesh import TriMesh, extract_isosurface, read_obj, read_sequence, write_obj, write_sequence
from .occupancy import CanonicalShape
from .skeleton import JointFlow, Skeleton, bone_transforms, eval_joint_flow
from .skinning import WeightField, build_weight_field, point_segment_distance, skin_points, weights

DEFAULT_NOISE_SIGMA = 0.005
DEFAULT_FRAMES = 17
DENSE_SAMPLES = 256

# 16-color palette for per-bone vertex colors
_PALETTE = np.array([
    [0.90, 0.75, 0.60], [0.85, 0.30, 0.25], [0.90, 0.45, 0.30], [0.95, 0.60, 0.35],
    [0.30, 0.60, 0.85], [0.40, 0.70, 0.90], [0.55, 0.80, 0.95], [0.30, 0.75, 0.40],
    [0.45, 0.85, 0.50], [0.60, 0.92, 0.62], [0.70, 0.45, 0.85], [0.80, 0.58, 0.90],
    [0.88, 0.72, 0.95], [0.85, 0.80, 0.30], [0.92, 0.88, 0.45], [0.96, 0.94, 0.62],
])


def default_radii(skeleton: Skeleton) -> np.ndarray:
    """Capsule radii: a thick palm for bones leaving the root, tapering finger segments."""
    radii = np.empty(skeleton.n_bones)
    for b, (p, _) in enumerate(skeleton.bones):
        if p == skeleton.root:
            radii[b] = 0.028
            continue
        # position along the finger chain: 0 for the bone nearest the palm
        k = skeleton.depth(int(p)) - 1
        radii[b] = (0.0085, 0.0075, 0.0065)[min(k, 2)]
    return radii


def capsule_sdf(skeleton: Skeleton, radii, chunk: int = 65536):
    """Signed distance of the union of capsules around the canonical bones."""
    radii = np.asarray(radii, dtype=float).reshape(skeleton.n_bones)
    if np.any(radii <= 0):
        raise ValueError("capsule radii must be positive")
    a = skeleton.joints[skeleton.bones[:, 0]]
    b = skeleton.joints[skeleton.bones[:, 1]]

    def sdf(points):
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.empty(len(p))
        for s in range(0, len(p), chunk):
            out[s : s + chunk] = (point_segment_distance(p[s : s + chunk], a, b) - radii).min(axis=1)
        return out

    return sdf


def make_template(skeleton: Skeleton, radii=None, resolution: int = 80, colors: bool = True) -> CanonicalShape:
    """Watertight union-of-capsules hand extracted from the min-distance field.

    Vertex attributes are RGB colors of each vertex's nearest bone.
    """
    radii = default_radii(skeleton) if radii is None else np.asarray(radii, dtype=float)
    sdf = capsule_sdf(skeleton, radii)
    a = skeleton.joints[skeleton.bones[:, 0]]
    b = skeleton.joints[skeleton.bones[:, 1]]
    lo = np.minimum(a, b).min(axis=0) - radii.max()
    hi = np.maximum(a, b).max(axis=0) + radii.max()
    pad = 0.05 * (hi - lo).max()
    mesh = extract_isosurface(sdf, lo - pad, hi + pad, resolution)
    attrs = None
    if colors:
        nearest = np.argmin(point_segment_distance(mesh.vertices, a, b) - radii, axis=1)
        attrs = _PALETTE[nearest % len(_PALETTE)]
    return CanonicalShape(mesh, attrs)


# ---------------------------------------------------------------------------
# motion scripts


@dataclass(frozen=True)
class AngleCurve:
    """Rotation of the subtree below ``joint`` about a canonical-frame ``axis``.

    The angle (radians) is ``a_0/2 + sum a_n cos(w n t) + b_n sin(w n t)``.
    """

    joint: int
    axis: np.ndarray
    cos: np.ndarray
    sin: np.ndarray

    def angle(self, t, angular_scale: float) -> np.ndarray:
        n = len(self.sin)
        return basis(t, n, angular_scale) @ np.concatenate([self.cos, self.sin])


@dataclass(frozen=True)
class MotionScript:
    """Band-limited joint-angle curves (at most ``harmonics`` harmonics each)."""

    harmonics: int
    curves: tuple[AngleCurve, ...] = field(default_factory=tuple)
    angular_scale: float = TWO_PI

    def __post_init__(self):
        for c in self.curves:
            if len(c.cos) != self.harmonics + 1 or len(c.sin) != self.harmonics:
                raise ValueError(f"curve for joint {c.joint} does not have {self.harmonics} harmonics")
            if not np.isclose(np.linalg.norm(c.axis), 1.0):
                raise ValueError(f"rotation axis for joint {c.joint} is not a unit vector")

    def to_dict(self) -> dict:
        return {
            "harmonics": self.harmonics,
            "angular_scale": self.angular_scale,
            "curves": [
                {"joint": c.joint, "axis": list(map(float, c.axis)), "cos": list(map(float, c.cos)),
                 "sin": list(map(float, c.sin))}
                for c in self.curves
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> MotionScript:
        k = int(data["harmonics"])
        curves = []
        for c in data.get("curves", []):
            axis = np.asarray(c["axis"], dtype=float)
            cos = np.zeros(k + 1)
            sin = np.zeros(k)
            given_cos = np.asarray(c.get("cos", []), dtype=float)
            given_sin = np.asarray(c.get("sin", []), dtype=float)
            if len(given_cos) > k + 1 or len(given_sin) > k:
                raise ValueError(f"curve for joint {c['joint']} exceeds {k} harmonics")
            cos[: len(given_cos)] = given_cos
            sin[: len(given_sin)] = given_sin
            curves.append(AngleCurve(int(c["joint"]), axis / np.linalg.norm(axis), cos, sin))
        return cls(k, tuple(curves), float(data.get("angular_scale", TWO_PI)))


def flexion_axis(skeleton: Skeleton, joint: int) -> np.ndarray:
    """Axis that curls the bone leaving ``joint`` toward the palm (-z side)."""
    child = skeleton.children(joint)
    if len(child) == 0:
        raise ValueError(f"joint {joint} has no child bone to flex")
    d = skeleton.joints[child[0]] - skeleton.joints[joint]
    d /= np.linalg.norm(d)
    normal = np.array([0.0, 0.0, 1.0])
    axis = np.cross(normal, d)
    return axis / np.linalg.norm(axis)


def default_script(skeleton: Skeleton, harmonics: int = 3, seed: int = 0) -> MotionScript:
    """Staggered curl-and-release of all fingers with a little wrist motion.

    Higher harmonics (up to ``harmonics``) get small deterministic amplitudes.
    """
    rng = np.random.default_rng(seed)
    curves = []
    root = skeleton.root
    fingers = [int(c) for c in skeleton.children(root)]
    for f, base in enumerate(fingers):
        chain = [base]
        while len(skeleton.children(chain[-1])) == 1 and len(skeleton.children(skeleton.children(chain[-1])[0])):
            chain.append(int(skeleton.children(chain[-1])[0]))
        is_thumb = f == 0
        for depth, joint in enumerate(chain):
            if depth == 0 and not is_thumb:
                amp = 0.45
            else:
                amp = (0.25 if is_thumb else 0.55) * (1.0 if depth < 2 else 0.7)
            phase = 0.35 * f
            cos = np.zeros(harmonics + 1)
            sin = np.zeros(harmonics)
            cos[0] = amp  # mean angle amp/2
            if harmonics >= 1:
                cos[1] = -0.5 * amp * np.cos(phase)
                sin[0] = -0.5 * amp * np.sin(phase)
            for n in range(2, harmonics + 1):
                cos[n] = rng.uniform(-1, 1) * 0.08 * amp / (n - 1)
                sin[n - 1] = rng.uniform(-1, 1) * 0.08 * amp / (n - 1)
            curves.append(AngleCurve(joint, flexion_axis(skeleton, joint), cos, sin))
    if harmonics >= 1:
        cos = np.zeros(harmonics + 1)
        sin = np.zeros(harmonics)
        sin[0] = 0.15
        curves.append(AngleCurve(root, np.array([1.0, 0.0, 0.0]), cos, sin))
    return MotionScript(harmonics, tuple(curves))


def single_finger_script(skeleton: Skeleton, joint: int, harmonics: int = 3, amplitude: float = 0.6) -> MotionScript:
    """Flexion of one joint only; everything else stays canonical."""
    cos = np.zeros(harmonics + 1)
    sin = np.zeros(harmonics)
    cos[0] = amplitude
    if harmonics >= 1:
        cos[1] = -0.5 * amplitude
    if harmonics >= 2:
        sin[1] = 0.1 * amplitude
    if harmonics >= 3:
        cos[3] = 0.05 * amplitude
    return MotionScript(harmonics, (AngleCurve(joint, flexion_axis(skeleton, joint), cos, sin),))


def forward_kinematics(skeleton: Skeleton, script: MotionScript, times) -> np.ndarray:
    """Rigid FK of the script's joint angles; returns ``(T, J, 3)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    local = np.tile(np.eye(3), (len(times), skeleton.n_joints, 1, 1))
    for c in script.curves:
        rot = Rotation.from_rotvec(c.angle(times, script.angular_scale)[:, None] * c.axis[None, :]).as_matrix()
        local[:, c.joint] = local[:, c.joint] @ rot
    order = sorted(range(skeleton.n_joints), key=skeleton.depth)
    world = np.empty_like(local)
    posed = np.empty((len(times), skeleton.n_joints, 3))
    for j in order:
        p = skeleton.parents[j]
        if p < 0:
            world[:, j] = local[:, j]
            posed[:, j] = skeleton.joints[j]
        else:
            world[:, j] = world[:, p] @ local[:, j]
            offset = skeleton.joints[j] - skeleton.joints[p]
            posed[:, j] = posed[:, p] + world[:, p] @ offset
    return posed


def band_limited_joint_flow(skeleton: Skeleton, script: MotionScript) -> JointFlow:
    """Project the script's FK trajectories onto the script's harmonic band.

    Joint positions under rigid rotation are not band-limited in time even when
    the angles are, so the ground-truth joint flow is the orthogonal projection
    of densely sampled FK onto ``harmonics`` harmonics. Motion built from it is
    exactly representable by any fit with at least that many harmonics.
    """
    period = TWO_PI / script.angular_scale
    t = np.arange(DENSE_SAMPLES) / DENSE_SAMPLES * period
    fk = forward_kinematics(skeleton, script, t)
    phi = basis(t, script.harmonics, script.angular_scale)
    coeffs, *_ = np.linalg.lstsq(phi, fk.reshape(len(t), -1), rcond=None)
    coeffs = coeffs.T.reshape(skeleton.n_joints, 3, -1)
    return JointFlow(coeffs, script.angular_scale)


def frame_times(n_frames: int) -> np.ndarray:
    """``T`` uniform frame times ``k / T`` in [0, 1)."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    return np.arange(n_frames) / n_frames


@dataclass
class SyntheticSequence:
    skeleton: Skeleton
    template: CanonicalShape
    weight_field: WeightField
    script: MotionScript
    gt_flow: JointFlow
    times: np.ndarray
    clean_joints: np.ndarray
    noisy_joints: np.ndarray
    gt_vertices: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def gt_meshes(self) -> list[TriMesh]:
        return [TriMesh(v, self.template.faces) for v in self.gt_vertices]

    def corr_samples(self, stride: int = 1):
        """GT correspondences (canonical vertex, t, skinned position) for every frame."""
        from .fitting import CorrSamples

        idx = np.arange(0, self.template.mesh.n_vertices, stride)
        canon = self.template.vertices[idx]
        pts = np.tile(canon, (len(self.times), 1))
        ts = np.repeat(self.times, len(idx))
        tgt = self.gt_vertices[:, idx].reshape(-1, 3)
        return CorrSamples(pts, ts, tgt)


def make_motion(
    skeleton: Skeleton,
    script: MotionScript,
    n_frames: int = DEFAULT_FRAMES,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
    template: CanonicalShape | None = None,
    weight_field: WeightField | None = None,
    weight_resolution: int = 64,
) -> SyntheticSequence:
    """Scripted articulated sequence with GT meshes and noisy joint observations.

    GT meshes skin the template with the same grid weight field a fitted flow
    would use, so correspondences are exact by construction.
    """
    if template is None:
        template = make_template(skeleton)
    if weight_field is None:
        weight_field = build_weight_field(skeleton, template, weight_resolution)
    times = frame_times(n_frames)
    gt_flow = band_limited_joint_flow(skeleton, script)
    clean = eval_joint_flow(gt_flow, times)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(scale=noise_sigma, size=clean.shape) if noise_sigma > 0 else clean.copy()
    verts = template.vertices
    w = weights(weight_field, verts)
    gt_vertices = np.stack([skin_points(verts, w, bone_transforms(skeleton, q)) for q in clean])
    return SyntheticSequence(skeleton, template, weight_field, script, gt_flow, times, clean, noisy,
                             gt_vertices, float(noise_sigma), int(seed))


# ---------------------------------------------------------------------------
# dataset directories


def _write_joints(path: Path, times, frames) -> None:
    data = {"times": [float(t) for t in times], "frames": np.asarray(frames).tolist()}
    path.write_text(json.dumps(data), encoding="utf-8")


def read_joints(path) -> tuple[np.ndarray, np.ndarray]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return np.asarray(data["times"], dtype=float), np.asarray(data["frames"], dtype=float)


def write_dataset(seq: SyntheticSequence, out_dir, corr_stride: int = 1, n_occ: int = 500) -> Path:
    """Write the dataset directory layout consumed by ``fit`` and ``eval``."""
    from .fitting import make_occ_samples

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq.skeleton.save(out / "skeleton.json")
    write_obj(seq.template.attributed_mesh(), out / "template.obj")
    (out / "script.json").write_text(json.dumps(seq.script.to_dict(), indent=2), encoding="utf-8")
    _write_joints(out / "joints_clean.json", seq.times, seq.clean_joints)
    _write_joints(out / "joints_noisy.json", seq.times, seq.noisy_joints)
    write_sequence(seq.gt_meshes, seq.times, out / "gt")
    _write_joints(out / "gt" / "joints.json", seq.times, seq.clean_joints)
    seq.corr_samples(corr_stride).save(out / "corr_samples.json")
    make_occ_samples(seq.template, seq.times, n_occ, seed=seq.seed).save(out / "occ_samples.json")
    manifest = {
        "schema": 1,
        "frames": len(seq.times),
        "times": [float(t) for t in seq.times],
        "noise_sigma": seq.noise_sigma,
        "seed": seq.seed,
        "harmonics": seq.script.harmonics,
        "n_vertices": seq.template.mesh.n_vertices,
        "weight_resolution": int(seq.weight_field.grid.resolution[0]),
        "files": {
            "skeleton": "skeleton.json",
            "template": "template.obj",
            "script": "script.json",
            "joints_clean": "joints_clean.json",
            "joints_noisy": "joints_noisy.json",
            "gt": "gt/manifest.json",
            "corr_samples": "corr_samples.json",
            "occ_samples": "occ_samples.json",
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


@dataclass
class Dataset:
    skeleton: Skeleton
    template: CanonicalShape
    times: np.ndarray
    clean_joints: np.ndarray | None
    noisy_joints: np.ndarray
    gt_times: list[float]
    gt_meshes: list[TriMesh]
    corr_samples: object
    occ_samples: object | None
    manifest: dict


def load_dataset(directory) -> Dataset:
    """Read a dataset directory; raises ``FileNotFoundError`` naming the missing file."""
    from .fitting import CorrSamples, OccSamples

    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    files = manifest["files"]
    for key in ("skeleton", "template", "joints_noisy", "gt", "corr_samples"):
        if not (d / files[key]).exists():
            raise FileNotFoundError(f"dataset file missing: {d / files[key]}")
    skeleton = Skeleton.load(d / files["skeleton"])
    mesh = read_obj(d / files["template"])
    template = CanonicalShape(TriMesh(mesh.vertices, mesh.faces), mesh.colors)
    times, noisy = read_joints(d / files["joints_noisy"])
    clean = None
    if (d / files.get("joints_clean", "")).is_file():
        _, clean = read_joints(d / files["joints_clean"])
    gt_times, gt_meshes = read_sequence((d / files["gt"]).parent)
    corr = CorrSamples.load(d / files["corr_samples"])
    occ = None
    if files.get("occ_samples") and (d / files["occ_samples"]).is_file():
        occ = OccSamples.load(d / files["occ_samples"])
    return Dataset(skeleton, template, times, clean, noisy, gt_times, gt_meshes, corr, occ, manifest)
