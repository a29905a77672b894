"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
from scipy.spatial.transform import Rotation

from conftest import FIT_SECONDS
from fourierflow.cli import finite_difference_velocity
from fourierflow.fitting import (
    CorrSamples,
    FitConfig,
    OccSamples,
    fit_pipeline,
    loss_corr,
    loss_occ,
    loss_total,
    make_occ_samples,
    mesh_sequence_oracle,
)
from fourierflow.flowfield import ShapeFlowLattice, TotalFlow, flow_at_times, ode_baseline_flow, shape_flow
from fourierflow.fourier import FourierSeries3
from fourierflow.grid import RegularGrid
from fourierflow.mesh import TriMesh, box_mesh, winding_number
from fourierflow.metrics import chamfer_l1, iou, l1_corr, voxel_edge
from fourierflow.occupancy import occupancy, occupancy_ray_parity, reconstruct_sequence, signed_distance
from fourierflow.skeleton import BoneTransforms, bone_transforms, eval_joint_flow, fit_joint_flow, mpjpe
from fourierflow.skinning import skin_points, weights
from fourierflow.synth import default_script, make_motion


def _clean_sequence(skeleton, template, field, harmonics):
    script = default_script(skeleton, harmonics=harmonics)
    return make_motion(skeleton, script, noise_sigma=0.0, template=template, weight_field=field)


def test_criterion_1_band_limited_exactness(skeleton, template, noisy_sequence, criterion):
    seq = _clean_sequence(skeleton, template, noisy_sequence.weight_field, 3)
    start = time.perf_counter()
    flow, report = fit_pipeline(skeleton, template, seq.clean_joints, seq.times, seq.corr_samples(), None,
                                FitConfig(n_harmonics=6, angular_scale=2 * math.pi), seq.weight_field,
                                seq.clean_joints)
    seconds = time.perf_counter() - start
    l_corr = report.final.l_corr
    err = mpjpe(eval_joint_flow(flow.joint_flow, seq.times), seq.clean_joints)
    ok = l_corr <= 1e-6 and err <= 1e-6 and seconds <= 60
    criterion(1, "band-limited exactness", ok,
              f"L_corr={l_corr:.2e} m, MPJPE={err:.2e} m, fit {seconds:.1f} s (limits 1e-6, 1e-6, 60 s)")
    assert ok


def test_criterion_2_noise_contraction(skeleton, noisy_sequence, criterion):
    seq = noisy_sequence
    # one correspondence sample keeps the loss bookkeeping cheap; stage 1 ignores it
    corr = CorrSamples(skeleton.joints[:1], [0.0], skeleton.joints[:1])
    config = FitConfig(fit_shape=False)
    improved = 0
    for trial in range(1000):
        noisy = seq.clean_joints + np.random.default_rng(10_000 + trial).normal(scale=0.005,
                                                                               size=seq.clean_joints.shape)
        _, report = fit_pipeline(skeleton, None, noisy, seq.times, corr, None, config, seq.weight_field,
                                 seq.clean_joints)
        improved += report.mpjpe_after < report.mpjpe_before
    rng = np.random.default_rng(2)
    ratios = []
    for _ in range(1000):
        noise = rng.normal(scale=0.005, size=(17, skeleton.n_joints, 3))
        fit = fit_joint_flow(noise, seq.times, 6)
        ratios.append(np.sqrt(np.mean(eval_joint_flow(fit, seq.times) ** 2) / np.mean(noise**2)))
    expected = math.sqrt(13 / 17)
    ratio = float(np.mean(ratios))
    ok = improved >= 950 and abs(ratio - expected) <= 0.15 * expected
    criterion(2, "noise contraction", ok,
              f"MPJPE improved in {improved}/1000 trials (need 950); RMS ratio {ratio:.4f} vs {expected:.4f} +-15%")
    assert ok


def test_criterion_3_reconstruction_fidelity(fitted_noisy, noisy_sequence, template, criterion):
    flow, _ = fitted_noisy
    seq = noisy_sequence
    rec = reconstruct_sequence(flow, template, seq.times)
    ious, cds, edges = [], [], []
    for pred, gt in zip(rec.meshes, seq.gt_meshes):
        ious.append(iou(pred, gt, 64))
        cds.append(chamfer_l1(pred, gt, 10_000))
        edges.append(voxel_edge(pred, gt, 64))
    cd_voxels = float(np.mean(np.asarray(cds) / np.asarray(edges)))
    corr = l1_corr(rec.vertices, seq.gt_vertices)
    seconds = FIT_SECONDS["fitted_noisy"]
    ok = np.mean(ious) >= 0.90 and cd_voxels <= 2.0 and corr <= 0.003 and seconds <= 300
    criterion(3, "reconstruction fidelity", ok,
              f"mean IoU {np.mean(ious):.3f} (min {np.min(ious):.3f}), CD {cd_voxels:.2f} voxel edges, "
              f"L1-Corr {corr * 1000:.3f} mm, fit {seconds:.1f} s")
    assert ok


def test_criterion_4_invariant_suites(skeleton, template, noisy_sequence, criterion):
    rng = np.random.default_rng(44)
    field = noisy_sequence.weight_field
    failures = []

    lo, hi = field.grid.bbox_min, field.grid.bbox_max
    w = weights(field, rng.uniform(lo - 0.02, hi + 0.02, size=(100_000, 3)))
    if np.abs(w.sum(axis=1) - 1).max() > 1e-12 or w.min() < 0:
        failures.append("partition of unity")

    p = rng.normal(scale=0.1, size=(100_000, 3))
    wr = rng.exponential(size=(100_000, skeleton.n_bones))
    wr /= wr.sum(axis=1, keepdims=True)
    rot = Rotation.random(random_state=5).as_matrix()
    trans = rng.normal(scale=0.1, size=3)
    skinned = skin_points(p, wr, BoneTransforms.uniform(rot, trans, skeleton.n_bones))
    if np.abs(skinned - (p @ rot.T + trans)).max() > 1e-12:
        failures.append("LBS rigid invariance")

    grid = RegularGrid(lo, hi, 6)
    lattice = ShapeFlowLattice(grid, rng.normal(scale=0.005, size=grid.resolution + (3, 13)))
    base = TotalFlow(field, skeleton, noisy_sequence.gt_flow)
    full = base.with_shape(lattice)
    q = rng.uniform(lo, hi, size=(5000, 3))
    for t in rng.uniform(0, 1, 4):
        if np.abs(full(q, t) - base.pose(q, t) - shape_flow(lattice, q, t)).max() > 1e-12:
            failures.append("flow additivity")
            break

    for _ in range(200):
        a = FourierSeries3(rng.normal(size=(3, 13)))
        b = FourierSeries3(rng.normal(size=(3, 13)))
        t = rng.uniform(-1, 2)
        alpha, beta = rng.normal(size=2)
        lin = (a.scaled(alpha) + b.scaled(beta))(t)
        if np.linalg.norm(lin - (alpha * a(t) + beta * b(t))) > 1e-5 * max(np.linalg.norm(lin), 1.0):
            failures.append("Fourier linearity")
            break
        h = 1e-5
        d = a.eval_derivative(t)
        if np.linalg.norm((a(t + h) - a(t - h)) / (2 * h) - d) > 1e-5 * max(np.linalg.norm(d), 1.0):
            failures.append("Fourier derivative")
            break

    tlo, thi = template.mesh.bounds()
    pts = rng.uniform(tlo - 0.1 * (thi - tlo), thi + 0.1 * (thi - tlo), size=(10_000, 3))
    band = np.abs(signed_distance(template, pts)) <= 1e-9
    agree = occupancy(template, pts) == occupancy_ray_parity(template, pts)
    if not np.all(agree[~band]):
        failures.append("occupancy dual oracle")

    ident = bone_transforms(skeleton, skeleton.joints)
    if np.abs(ident.rotations - np.eye(3)).max() > 1e-8 or np.abs(ident.translations).max() > 1e-8:
        failures.append("bone transform identity")
    posed = noisy_sequence.clean_joints[5]
    g_rot = Rotation.random(random_state=9).as_matrix()
    g_t = rng.normal(size=3)
    tr = bone_transforms(skeleton, posed)
    moved = bone_transforms(skeleton, posed @ g_rot.T + g_t)
    if (np.abs(moved.rotations - g_rot @ tr.rotations).max() > 1e-8
            or np.abs(moved.translations - (tr.translations @ g_rot.T + g_t)).max() > 1e-8):
        failures.append("bone transform equivariance")

    ok = not failures
    criterion(4, "invariant suites", ok, "all hold" if ok else "failed: " + ", ".join(failures))
    assert ok


def test_criterion_5_metric_oracles(skeleton, template, noisy_sequence, criterion):
    a, b = box_mesh([0, 0, 0], [1, 1, 1]), box_mesh([0.5, 0, 0], [1.5, 1, 1])
    cube = iou(a, b, 64)
    cube_tol = 2 * voxel_edge(a, b, 64) / 1.5
    square = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float), np.array([[0, 1, 2], [0, 2, 3]]))
    lifted = TriMesh(square.vertices + [0, 0, 1.0], square.faces)
    cd = chamfer_l1(square, lifted, 10_000)

    seq = noisy_sequence
    flow = TotalFlow(seq.weight_field, skeleton, seq.gt_flow)
    rng = np.random.default_rng(6)
    corr = seq.corr_samples(11)
    targets = corr.targets + rng.normal(scale=0.002, size=corr.targets.shape)
    pred = flow_at_times(flow, corr.points, corr.times)
    brute_corr = sum(math.sqrt(sum((pred[i, k] - targets[i, k]) ** 2 for k in range(3)))
                     for i in range(len(targets))) / len(targets)
    got_corr = loss_corr(flow, CorrSamples(corr.points, corr.times, targets))

    occ = make_occ_samples(template, seq.times, 60, seed=8)
    oracle = mesh_sequence_oracle(seq.times, seq.gt_meshes)
    got_occ = loss_occ(flow, template, occ.with_oracle(oracle))
    flowed = flow_at_times(flow, occ.points, occ.times)
    inside = winding_number(template.mesh, occ.points) >= 0.5
    wrong = 0
    for k, t in enumerate(seq.times):
        sel = np.flatnonzero(occ.times == t)
        posed = winding_number(seq.gt_meshes[k], flowed[sel]) >= 0.5
        wrong += sum(int(inside[j] != posed[i]) for i, j in enumerate(sel))
    brute_occ = wrong / len(occ)
    frozen = OccSamples(occ.points, occ.times, labels=rng.integers(0, 2, len(occ)))
    got_total = loss_total(flow, template, frozen, CorrSamples(corr.points, corr.times, targets), 10.0)
    brute_total = float(np.mean(np.abs(inside.astype(float) - frozen.labels))) + 10.0 * brute_corr

    loss_err = max(abs(got_corr - brute_corr), abs(got_occ - brute_occ), abs(got_total - brute_total))
    ok = abs(cube - 1 / 3) <= cube_tol and abs(cd - 1.0) <= 0.02 and loss_err <= 1e-12
    criterion(5, "metric oracles", ok,
              f"cube IoU {cube:.4f} (1/3 +- {cube_tol:.4f}), plane CD {cd:.4f} (1 +- 2%), "
              f"max loss deviation {loss_err:.1e}")
    assert ok


def test_criterion_6_efficiency(fitted_noisy, criterion):
    flow, _ = fitted_noisy
    rng = np.random.default_rng(0)
    lo, hi = flow.weight_field.grid.bbox_min, flow.weight_field.grid.bbox_max
    pts = rng.uniform(lo, hi, size=(20_000, 3))
    flow(pts[:8], 0.5)

    def per_query(fn, repeats=7):
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter_ns()
            fn()
            best = min(best, time.perf_counter_ns() - start)
        return best / len(pts)

    t_values = np.linspace(0, 1, 8, endpoint=False) + 1 / 16
    fourier = [per_query(lambda t=t: flow(pts, t)) for t in t_values]
    spread = (max(fourier) - min(fourier)) / np.mean(fourier)
    velocity = finite_difference_velocity(flow)
    steps = [1, 2, 4, 8, 16, 32]
    sub = pts[:2000]
    ode = [per_query(lambda s=s: ode_baseline_flow(velocity, sub, 1.0, s), 3) * len(pts) / len(sub)
           for s in steps]
    slope, intercept = np.polyfit(steps, ode, 1)
    resid = np.asarray(ode) - (slope * np.asarray(steps) + intercept)
    r2 = 1 - np.sum(resid**2) / np.sum((np.asarray(ode) - np.mean(ode)) ** 2)
    ode16 = ode[steps.index(16)]
    ok = spread <= 0.10 and r2 >= 0.95 and np.mean(fourier) < ode16
    criterion(6, "efficiency", ok,
              f"Fourier {np.mean(fourier):.0f} ns/query, spread over t {spread * 100:.1f}%; ODE R^2 {r2:.4f}; "
              f"16-step ODE {ode16:.0f} ns/query")
    assert ok


def test_criterion_7_ablation_structure(skeleton, template, noisy_sequence, criterion):
    field = noisy_sequence.weight_field
    seq = _clean_sequence(skeleton, template, field, 3)
    corr = seq.corr_samples()
    # smooth in space and time but not exactly representable by the trilinear lattice
    x, y, z = (corr.points - template.vertices.mean(axis=0)).T
    t = corr.times
    residual = 0.002 * np.stack([np.sin(30 * x) * np.cos(2 * np.pi * t),
                                 np.cos(25 * y) * np.sin(4 * np.pi * t),
                                 np.sin(20 * z + 15 * x) * np.cos(2 * np.pi * t + 0.5)], axis=1)
    injected = CorrSamples(corr.points, corr.times, corr.targets + residual)
    _, report = fit_pipeline(skeleton, template, seq.clean_joints, seq.times, injected, None, FitConfig(), field)
    pose_only, pose_shape = report.stages[1].l_corr, report.stages[2].l_corr
    reduction = 1 - pose_shape / pose_only

    rich = _clean_sequence(skeleton, template, field, 6)
    rich_corr = rich.corr_samples()
    losses = {}
    for n in (4, 6):
        _, rep = fit_pipeline(skeleton, template, rich.clean_joints, rich.times, rich_corr, None,
                              FitConfig(n_harmonics=n), field)
        losses[n] = rep.final.l_corr
    ok = reduction >= 0.80 and losses[4] > losses[6]
    criterion(7, "ablation structure", ok,
              f"shape stage removes {reduction * 100:.1f}% of injected residual "
              f"({pose_only * 1000:.3f} -> {pose_shape * 1000:.4f} mm); "
              f"K=6 script: L_corr N=4 {losses[4]:.2e} m vs N=6 {losses[6]:.2e} m")
    assert ok
