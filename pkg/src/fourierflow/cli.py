"""Command-line entry point: ``fourierflow <subcommand> ...``.

Exit codes: 0 success, 1 I/O or data failure, 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_IO, EXIT_USAGE = 0, 1, 2
TIME_TOL = 1e-9


class UsageError(Exception):
    """Bad flag values detected after parsing; maps to exit code 2."""


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")


def _parse_times(args) -> np.ndarray:
    chosen = [x is not None for x in (args.times, args.uniform, args.range)]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --times, --uniform or --range")
    if args.times is not None:
        try:
            values = [float(v) for v in args.times.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"malformed time list {args.times!r}") from exc
        if not values or not all(math.isfinite(v) for v in values):
            raise UsageError(f"malformed time list {args.times!r}")
        return np.asarray(values)
    if args.uniform is not None:
        if args.uniform < 1:
            raise UsageError("--uniform needs a positive count")
        return np.arange(args.uniform) / args.uniform
    a, b, k = args.range
    try:
        a, b, k = float(a), float(b), int(k)
    except ValueError as exc:
        raise UsageError("--range expects two numbers and a count") from exc
    if k < 1 or not (math.isfinite(a) and math.isfinite(b)):
        raise UsageError("--range expects finite bounds and a positive count")
    return np.linspace(a, b, k)


def _add_time_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--times", help="comma-separated time values, e.g. 0,0.25,0.5")
    p.add_argument("--uniform", type=int, help="K uniform times k/K in [0, 1)")
    p.add_argument("--range", nargs=3, metavar=("A", "B", "K"), help="K evenly spaced times from A to B inclusive")


def _load_template(path):
    from .mesh import TriMesh, read_obj
    from .occupancy import CanonicalShape

    mesh = read_obj(path)
    return CanonicalShape(TriMesh(mesh.vertices, mesh.faces), mesh.colors)


def _flow_joints(flow, times) -> np.ndarray:
    from .skeleton import eval_joint_flow

    return np.stack([eval_joint_flow(flow.joint_flow, float(t)) for t in times])


def _write_joints(path, times, frames) -> None:
    _write_json(path, {"times": [float(t) for t in times], "frames": np.asarray(frames).tolist()})


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .skeleton import Skeleton, default_skeleton
    from .synth import MotionScript, default_script, make_motion, make_template, write_dataset

    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be non-negative")
    skeleton = Skeleton.load(args.skeleton) if args.skeleton else default_skeleton()
    if args.script:
        script = MotionScript.from_dict(json.loads(Path(args.script).read_text(encoding="utf-8")))
    else:
        script = default_script(skeleton, harmonics=args.harmonics, seed=args.seed)
    template = make_template(skeleton, resolution=args.template_res)
    seq = make_motion(skeleton, script, args.frames, args.noise_sigma, args.seed, template,
                      weight_resolution=args.weight_res)
    manifest = write_dataset(seq, args.out_dir, corr_stride=args.corr_stride, n_occ=args.occ_samples)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .fitting import FitConfig, fit_pipeline, mesh_sequence_oracle
    from .skinning import build_weight_field
    from .synth import load_dataset

    if args.n_harmonics < 1:
        raise UsageError("--n-harmonics must be at least 1")
    if args.method not in ("least_squares", "projection"):
        raise UsageError("--method must be least_squares or projection")
    if args.ridge <= 0 or args.lattice_res < 2 or args.lambda_ < 0:
        raise UsageError("--ridge must be positive, --lattice-res at least 2, --lambda non-negative")
    data = load_dataset(args.dataset)
    weight_res = data.manifest.get("weight_resolution", 64)
    config = FitConfig(
        n_harmonics=args.n_harmonics,
        angular_scale=args.omega,
        method=args.method,
        lam=args.lambda_,
        joint_ridge=args.joint_ridge,
        lattice_resolution=args.lattice_res,
        lattice_ridge=args.ridge,
        weight_resolution=weight_res,
        fit_shape=not args.no_shape,
    )
    occ = None
    if data.occ_samples is not None:
        occ = data.occ_samples
        if occ.labels is None:
            occ = occ.with_oracle(mesh_sequence_oracle(data.gt_times, data.gt_meshes))
    weight_field = build_weight_field(data.skeleton, data.template, weight_res)
    start = time.perf_counter()
    flow, report = fit_pipeline(data.skeleton, data.template, data.noisy_joints, data.times, data.corr_samples,
                                occ, config, weight_field, data.clean_joints)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flow.save(out)
    body = report.to_dict()
    body["seconds"] = time.perf_counter() - start
    body["flow"] = out.name
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_report.json")
    _write_json(report_path, body)
    final = report.final
    print(f"final L_corr={final.l_corr:.3e} m  L_occ={final.l_occ}  -> {out}, {report_path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .flowfield import TotalFlow
    from .mesh import write_sequence
    from .occupancy import reconstruct_sequence

    times = _parse_times(args)
    flow = TotalFlow.load(args.flow)
    shape = _load_template(args.template)
    seq = reconstruct_sequence(flow, shape, times)
    manifest = write_sequence(seq.meshes, times, args.out_dir)
    _write_joints(Path(args.out_dir) / "joints.json", times, _flow_joints(flow, times))
    print(f"wrote {len(times)} meshes; manifest {manifest}")
    return EXIT_OK


def _match_times(pred_times, gt_times):
    pairs, missing = [], []
    for j, t in enumerate(gt_times):
        hits = [i for i, s in enumerate(pred_times) if abs(s - t) <= TIME_TOL]
        if hits:
            pairs.append((hits[0], j))
        else:
            missing.append(t)
    return pairs, missing


def _read_joints_if_any(directory):
    path = Path(directory) / "joints.json"
    if not path.is_file():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    return np.asarray(data["times"], dtype=float), np.asarray(data["frames"], dtype=float)


def cmd_eval(args) -> int:
    from .metrics import chamfer_l1, iou, l1_corr, mpjpe
    from .mesh import read_sequence

    if args.iou_res < 2 or args.cd_samples < 1:
        raise UsageError("--iou-res must be at least 2 and --cd-samples at least 1")
    pred_times, pred = read_sequence(args.pred_dir)
    gt_times, gt = read_sequence(args.gt_dir)
    pairs, missing = _match_times(pred_times, gt_times)
    if missing:
        listed = ", ".join(f"{t:.6g}" for t in missing)
        print(f"error: prediction has no frame at time(s) {listed}", file=sys.stderr)
        return EXIT_IO
    pj, gj = _read_joints_if_any(args.pred_dir), _read_joints_if_any(args.gt_dir)
    frames = []
    for i, j in pairs:
        a, b = pred[i], gt[j]
        row = {
            "t": float(gt_times[j]),
            "iou": iou(a, b, args.iou_res),
            "cd_m": chamfer_l1(a, b, args.cd_samples),
            "l1_corr_m": l1_corr(a.vertices, b.vertices) if a.n_vertices == b.n_vertices else None,
            "mpjpe_m": None,
        }
        if pj is not None and gj is not None:
            pi = np.flatnonzero(np.abs(pj[0] - gt_times[j]) <= TIME_TOL)
            gi = np.flatnonzero(np.abs(gj[0] - gt_times[j]) <= TIME_TOL)
            if len(pi) and len(gi):
                row["mpjpe_m"] = mpjpe(pj[1][pi[0]], gj[1][gi[0]])
        frames.append(row)

    def mean(key):
        vals = [f[key] for f in frames if f[key] is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "schema": 1,
        "resolution": args.iou_res,
        "n_samples": args.cd_samples,
        "iou": mean("iou"),
        "cd_m": mean("cd_m"),
        "l1_corr_m": mean("l1_corr_m"),
        "mpjpe_m": mean("mpjpe_m"),
        "frames": frames,
    }
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("iou", "cd_m", "l1_corr_m", "mpjpe_m")}))
    return EXIT_OK


def _time_per_query(fn, n_queries: int, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - start)
    return best / n_queries


def finite_difference_velocity(flow, h: float = 1e-4):
    """Velocity ``dPhi/dt`` by central differences, treating positions as queries."""

    def velocity(points, t):
        return (flow(points, t + h) - flow(points, t - h)) / (2 * h)

    return velocity


def cmd_bench(args) -> int:
    from .flowfield import TotalFlow, ode_baseline_flow

    try:
        steps = [int(s) for s in args.ode_steps.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"malformed --ode-steps {args.ode_steps!r}") from exc
    if not steps or min(steps) < 1 or args.queries < 1:
        raise UsageError("--ode-steps entries and --queries must be positive")
    flow = TotalFlow.load(args.flow)
    rng = np.random.default_rng(args.seed)
    lo, hi = flow.weight_field.grid.bbox_min, flow.weight_field.grid.bbox_max
    pts = rng.uniform(lo, hi, size=(args.queries, 3))
    t_values = np.linspace(0.0, 1.0, args.t_samples, endpoint=False) + 0.5 / args.t_samples
    flow(pts[:8], 0.5)  # warm caches and jit
    fourier = [_time_per_query(lambda t=t: flow(pts, t), args.queries, args.repeats) for t in t_values]
    velocity = finite_difference_velocity(flow)
    ode = [_time_per_query(lambda s=s: ode_baseline_flow(velocity, pts, 1.0, s), args.queries, args.repeats)
           for s in steps]
    mean_f = float(np.mean(fourier))
    spread = float((max(fourier) - min(fourier)) / mean_f)
    r2 = None
    if len(steps) >= 2:
        slope, intercept = np.polyfit(steps, ode, 1)
        fitted = slope * np.asarray(steps) + intercept
        ss_res = float(np.sum((np.asarray(ode) - fitted) ** 2))
        ss_tot = float(np.sum((np.asarray(ode) - np.mean(ode)) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    report = {
        "schema": 1,
        "queries": args.queries,
        "fourier_ns_per_query": {f"{t:.6g}": v for t, v in zip(t_values, fourier)},
        "fourier_mean_ns_per_query": mean_f,
        "fourier_relative_spread": spread,
        "ode_ns_per_query": {str(s): v for s, v in zip(steps, ode)},
        "ode_linear_r2": r2,
        "fourier_faster_than_ode": {str(s): mean_f < v for s, v in zip(steps, ode)},
    }
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("fourier_mean_ns_per_query", "fourier_relative_spread", "ode_linear_r2")}))
    return EXIT_OK


def cmd_texture(args) -> int:
    from .flowfield import TotalFlow
    from .mesh import write_sequence
    from .occupancy import reconstruct_sequence, transfer_attributes

    times = _parse_times(args)
    shape = _load_template(args.template_with_colors)
    if shape.vertex_attributes is None:
        raise UsageError(f"template {args.template_with_colors} has no per-vertex colors")
    flow = TotalFlow.load(args.flow)
    meshes = transfer_attributes(reconstruct_sequence(flow, shape, times), shape)
    manifest = write_sequence(meshes, times, args.out_dir)
    print(f"wrote {len(meshes)} colored meshes; manifest {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fourierflow", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (0 = all cores; default from FOURIERFLOW_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic hand dataset")
    p.add_argument("--skeleton", help="skeleton JSON (default: built-in 21-joint hand)")
    p.add_argument("--script", help="motion script JSON (default: staggered finger flexion)")
    p.add_argument("--harmonics", type=int, default=3, help="harmonics of the default script")
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--noise-sigma", type=float, default=0.005, help="joint noise std in meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-res", type=int, default=80)
    p.add_argument("--weight-res", type=int, default=64)
    p.add_argument("--corr-stride", type=int, default=1, help="use every k-th template vertex")
    p.add_argument("--occ-samples", type=int, default=500, help="occupancy samples per frame")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit joint flow then shape flow to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-harmonics", type=int, default=6)
    p.add_argument("--omega", type=float, default=2 * math.pi)
    p.add_argument("--method", default="least_squares")
    p.add_argument("--lambda", dest="lambda_", type=float, default=10.0)
    p.add_argument("--ridge", type=float, default=1e-6, help="shape-lattice ridge")
    p.add_argument("--joint-ridge", type=float, default=1e-8)
    p.add_argument("--lattice-res", type=int, default=16)
    p.add_argument("--no-shape", action="store_true", help="skip the shape-flow stage")
    p.add_argument("--out", required=True, help="flow bundle JSON path")
    p.add_argument("--report", help="fit report path (default: <out>_report.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reconstruct", help="corresponded meshes at chosen times")
    p.add_argument("--flow", required=True)
    p.add_argument("--template", required=True)
    _add_time_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="IoU / Chamfer / L1-Corr / MPJPE against GT meshes")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--iou-res", type=int, default=64)
    p.add_argument("--cd-samples", type=int, default=10000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time Fourier flow queries against the ODE baseline")
    p.add_argument("--flow", required=True)
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--ode-steps", default="1,2,4,8,16,32")
    p.add_argument("--t-samples", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("texture", help="carry template vertex colors through the flow")
    p.add_argument("--flow", required=True)
    p.add_argument("--template-with-colors", required=True)
    _add_time_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_texture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    from . import set_threads

    threads = args.threads
    if threads is None:
        raw = os.environ.get("FOURIERFLOW_THREADS", "0") or "0"
        try:
            threads = int(raw)
        except ValueError:
            print(f"error: FOURIERFLOW_THREADS must be an integer, got {raw!r}", file=sys.stderr)
            return EXIT_USAGE
    if threads < 0:
        print("error: --threads must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    set_threads(threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
