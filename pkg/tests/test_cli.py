import json
import subprocess
import sys

import numba
import numpy as np
import pytest

from fourierflow.cli import main
from fourierflow.flowfield import TotalFlow
from fourierflow.mesh import TriMesh, read_obj, read_sequence, write_obj
from fourierflow.skeleton import JointFlow, default_skeleton
from fourierflow.skinning import build_weight_field
from fourierflow.synth import load_dataset

SMALL = ["--template-res", "40", "--weight-res", "24", "--occ-samples", "40"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(work):
    out = work / "data"
    assert run("synth", "--noise-sigma", "0", "--out-dir", out, *SMALL) == 0
    return out


@pytest.fixture(scope="module")
def fitted(work, dataset):
    out = work / "flow.json"
    assert run("fit", "--dataset", dataset, "--lattice-res", "8", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def identity_flow(work, dataset):
    data = load_dataset(dataset)
    flow = TotalFlow(build_weight_field(data.skeleton, data.template, 24), data.skeleton,
                     JointFlow.constant(data.skeleton.joints))
    path = work / "identity.json"
    flow.save(path)
    return path


# --- synth ---------------------------------------------------------------------------


def test_synth_layout(dataset):
    for name in ("skeleton.json", "joints_clean.json", "joints_noisy.json", "manifest.json", "template.obj"):
        assert (dataset / name).is_file()
    times, meshes = read_sequence(dataset / "gt")
    assert len(meshes) == 17 and len(list((dataset / "gt").glob("*.obj"))) == 17
    np.testing.assert_allclose(times, np.arange(17) / 17)
    assert json.loads((dataset / "manifest.json").read_text())["schema"] == 1


def test_synth_seed_is_deterministic(work):
    dirs = [work / f"seed{k}" for k in range(2)]
    for d in dirs:
        assert run("synth", "--seed", "1", "--frames", "5", "--out-dir", d, *SMALL) == 0
    for f in sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file()):
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes(), f


def test_synth_usage_errors(work, capsys):
    assert run("synth", "--frames", "1", "--out-dir", work / "x") == 2
    assert run("synth", "--frames", "many", "--out-dir", work / "x") == 2
    assert run("synth") == 2
    assert run("synth", "--script", work / "missing.json", "--out-dir", work / "x", *SMALL) == 1


# --- fit -----------------------------------------------------------------------------


def test_fit_noiseless_dataset(fitted):
    report = json.loads(fitted.with_name("flow_report.json").read_text())
    assert report["schema"] == 1
    assert [s["name"] for s in report["stages"]] == ["initial", "joint_flow", "shape_flow"]
    assert report["final"]["l_corr"] <= 1e-6
    assert report["mpjpe_after_m"] <= 1e-6
    assert TotalFlow.load(fitted).shape_lattice is not None


@pytest.mark.parametrize("n", [4, 8])
def test_fit_accepts_other_harmonic_counts(work, dataset, n):
    out = work / f"flow{n}.json"
    assert run("fit", "--dataset", dataset, "--n-harmonics", n, "--no-shape", "--out", out) == 0
    assert TotalFlow.load(out).joint_flow.n_harmonics == n


def test_fit_lambda_zero_total_is_occupancy_loss(work, dataset):
    out = work / "flow_l0.json"
    report_path = work / "l0_report.json"
    assert run("fit", "--dataset", dataset, "--lambda", "0", "--no-shape", "--out", out, "--report", report_path) == 0
    for stage in json.loads(report_path.read_text())["stages"]:
        assert stage["l_total"] == stage["l_occ"]


def test_fit_errors(work, dataset):
    assert run("fit", "--dataset", work / "nope", "--out", work / "f.json") == 1
    assert run("fit", "--dataset", dataset, "--method", "magic", "--out", work / "f.json") == 2
    assert run("fit", "--dataset", dataset, "--ridge", "0", "--out", work / "f.json") == 2


# --- reconstruct ---------------------------------------------------------------------


def test_reconstruct_uniform(work, fitted, dataset):
    out = work / "rec17"
    assert run("reconstruct", "--flow", fitted, "--template", dataset / "template.obj", "--uniform", 17,
               "--out-dir", out) == 0
    times, meshes = read_sequence(out)
    assert len(meshes) == 17
    assert all(np.array_equal(m.faces, meshes[0].faces) for m in meshes)
    assert (out / "joints.json").is_file()


def test_reconstruct_interpolated_and_extrapolated(work, fitted, dataset):
    tpl = dataset / "template.obj"
    assert run("reconstruct", "--flow", fitted, "--template", tpl, "--times", "0.5", "--out-dir", work / "r1") == 0
    assert len(read_sequence(work / "r1")[1]) == 1
    assert run("reconstruct", "--flow", fitted, "--template", tpl, "--range", "-0.1", "1.1", "13",
               "--out-dir", work / "r13") == 0
    times, meshes = read_sequence(work / "r13")
    assert len(meshes) == 13 and times[0] == pytest.approx(-0.1) and times[-1] == pytest.approx(1.1)
    assert all(np.all(np.isfinite(m.vertices)) for m in meshes)


def test_reconstruct_malformed_times(work, fitted, dataset):
    tpl = dataset / "template.obj"
    assert run("reconstruct", "--flow", fitted, "--template", tpl, "--times", "0.1,abc", "--out-dir", work / "e") == 2
    assert run("reconstruct", "--flow", fitted, "--template", tpl, "--out-dir", work / "e") == 2
    assert run("reconstruct", "--flow", fitted, "--template", tpl, "--uniform", 3, "--times", "0",
               "--out-dir", work / "e") == 2


# --- eval ----------------------------------------------------------------------------


def test_eval_gt_against_itself(work, dataset):
    out = work / "self.json"
    assert run("eval", "--pred-dir", dataset / "gt", "--gt-dir", dataset / "gt", "--cd-samples", 2000,
               "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["iou"] == 1.0 and report["cd_m"] == 0.0 and report["l1_corr_m"] == 0.0
    assert report["mpjpe_m"] == 0.0 and report["schema"] == 1
    assert report["resolution"] == 64 and report["n_samples"] == 2000
    assert len(report["frames"]) == 17


def test_eval_fitted_reconstruction(work, fitted, dataset):
    rec = work / "rec_eval"
    assert run("reconstruct", "--flow", fitted, "--template", dataset / "template.obj", "--uniform", 17,
               "--out-dir", rec) == 0
    out = work / "eval.json"
    assert run("eval", "--pred-dir", rec, "--gt-dir", dataset / "gt", "--cd-samples", 3000, "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["iou"] >= 0.90
    assert report["mpjpe_m"] <= 1e-6


def test_eval_missing_frame(work, fitted, dataset, capsys):
    rec = work / "rec_short"
    assert run("reconstruct", "--flow", fitted, "--template", dataset / "template.obj", "--times", "0,0.5",
               "--out-dir", rec) == 0
    assert run("eval", "--pred-dir", rec, "--gt-dir", dataset / "gt") == 1
    err = capsys.readouterr().err
    assert f"{1 / 17:.6g}" in err


# --- bench ---------------------------------------------------------------------------


def test_bench_report(work, fitted):
    out = work / "bench.json"
    assert run("bench", "--flow", fitted, "--queries", 500, "--ode-steps", "1,2,4", "--t-samples", 3,
               "--repeats", 2, "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["schema"] == 1 and len(report["fourier_ns_per_query"]) == 3
    assert set(report["ode_ns_per_query"]) == {"1", "2", "4"}
    assert report["ode_linear_r2"] is not None
    assert run("bench", "--flow", fitted, "--ode-steps", "0") == 2


# --- texture -------------------------------------------------------------------------


def test_texture_identity_returns_colored_template(work, identity_flow, dataset):
    out = work / "tex_id"
    assert run("texture", "--flow", identity_flow, "--template-with-colors", dataset / "template.obj",
               "--times", "0,0.3", "--out-dir", out) == 0
    template = read_obj(dataset / "template.obj")
    for mesh in read_sequence(out)[1]:
        np.testing.assert_array_equal(mesh.vertices, template.vertices)
        np.testing.assert_array_equal(mesh.colors, template.colors)


def test_texture_two_flows_share_colors(work, identity_flow, fitted, dataset):
    tpl = dataset / "template.obj"
    for name, flow in (("a", identity_flow), ("b", fitted)):
        assert run("texture", "--flow", flow, "--template-with-colors", tpl, "--uniform", 2,
                   "--out-dir", work / f"tex_{name}") == 0
    a = read_sequence(work / "tex_a")[1]
    b = read_sequence(work / "tex_b")[1]
    for ma, mb in zip(a, b):
        np.testing.assert_array_equal(ma.colors, mb.colors)


def test_texture_without_colors(work, identity_flow, dataset, capsys):
    plain = read_obj(dataset / "template.obj")
    write_obj(TriMesh(plain.vertices, plain.faces), work / "plain.obj")
    assert run("texture", "--flow", identity_flow, "--template-with-colors", work / "plain.obj", "--times", "0",
               "--out-dir", work / "tex_plain") == 2
    assert "colors" in capsys.readouterr().err


# --- global options ------------------------------------------------------------------


def test_thread_count_from_environment(monkeypatch, work, dataset):
    import fourierflow

    seen = []
    real = fourierflow.set_threads
    monkeypatch.setattr(fourierflow, "set_threads", lambda n=None: seen.append(n) or real(n))
    args = ["eval", "--pred-dir", dataset / "gt", "--gt-dir", dataset / "gt", "--cd-samples", 10, "--iou-res", 8]
    monkeypatch.setenv("FOURIERFLOW_THREADS", "2")
    assert run(*args) == 0
    assert run("--threads", "1", *args) == 0
    assert seen == [2, 1]
    assert numba.get_num_threads() == 1
    monkeypatch.setenv("FOURIERFLOW_THREADS", "lots")
    assert run(*args) == 2
    monkeypatch.delenv("FOURIERFLOW_THREADS")
    assert run("--threads", "-1", *args) == 2
    assert run(*args) == 0
    assert seen[-1] == 0
    assert numba.get_num_threads() == numba.config.NUMBA_NUM_THREADS


def test_unknown_subcommand():
    assert run("explode") == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fourierflow.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "fit", "reconstruct", "eval", "bench", "texture"):
        assert name in proc.stdout


def test_default_skeleton_is_loadable_from_dataset(dataset):
    data = load_dataset(dataset)
    np.testing.assert_allclose(data.skeleton.joints, default_skeleton().joints)
