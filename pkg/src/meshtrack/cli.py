"""Command-line front end: ``meshtrack {phantom,track,slice,evaluate,report}``.

Machine-readable results go to stdout as JSON (or CSV for ``report``);
logs go to stderr. Exit codes: 0 ok, 2 usage or validation error, 3 I/O
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as mio
from .geometry import GeometryError, ImagePlane
from .losses import VIEW_ORDER, LossWeights, canonical_view
from .metrics import boundf, extract_contour, hausdorff_2d, mean_surface_distance, MetricReport
from .phantom import FrameInputs, PhantomSpec, PhantomSpecError, deform, make_mesh, render
from .rasterizer import COMBINE_RULES, SliceRasterizer, boundary_map
from .tracker import TrackConfig, TrackingDiverged, TrackResult, track_pair

log = logging.getLogger("meshtrack")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
FORMAT_VERSION = "1"
SUPPORTED_VERSIONS = {"1"}
CSV_HEADER = ["frame", "msd_mm", "hd_sa", "hd_lax1", "hd_lax2", "boundf_sa", "boundf_lax1", "boundf_lax2"]
# CLI spelling of each view in flag names
VIEW_FLAGS = {"sa": "sa", "lax1": "2ch", "lax2": "4ch"}


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")
    sys.stdout.flush()


# -- manifest -----------------------------------------------------------------

def load_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise mio.FormatError(f"{path}: {exc}") from exc
    version = man.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise mio.FormatError(f"{path}: unsupported manifest version {version!r}")
    root = path.parent / man.get("root", ".")
    for rel in _manifest_files(man):
        if not (root / rel).exists():
            raise FileNotFoundError(f"manifest entry missing: {root / rel}")
    return root, man


def _manifest_files(man: dict):
    yield man["mesh_ed"]
    for fr in man["frames"]:
        yield fr["mesh"]
        yield fr["dv"]
        for stem in [fr["volume"], *fr["planes"].values(), *fr["boundaries"].values()]:
            yield stem + ".json"
            yield stem + ".raw"


def _frame_inputs(root: Path, rec: dict, views) -> FrameInputs:
    planes = {v: mio.read_plane(root / rec["planes"][v]) for v in views if v in rec["planes"]}
    bounds = {v: mio.read_plane(root / rec["boundaries"][v]) for v in views if v in rec["boundaries"]}
    return FrameInputs(mio.read_volume(root / rec["volume"]), planes, bounds)


# -- phantom ------------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = PhantomSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mio.write_json(spec.to_dict(), out / "spec.json")
    mesh_0 = make_mesh(spec)
    mio.write_obj(mesh_0, out / "mesh_ed.obj")
    frames = []
    for t in range(spec.n_frames):
        mesh_t, dv = deform(mesh_0, spec, t)
        inputs = render(mesh_t, spec, t)
        d = out / f"frame_{t:03d}"
        d.mkdir(exist_ok=True)
        rel = Path(d.name)
        mio.write_obj(mesh_t, d / "mesh.obj")
        mio.write_json(dv.tolist(), d / f"dv_{t}.json")
        mio.write_volume(inputs.sa, d / "sa_volume")
        rec = {"frame": t, "mesh": str(rel / "mesh.obj"), "dv": str(rel / f"dv_{t}.json"),
               "volume": str(rel / "sa_volume"), "planes": {}, "boundaries": {}}
        for v in VIEW_ORDER:
            mio.write_plane(inputs.planes[v], d / f"image_{v}", view=v)
            mio.write_plane(inputs.boundaries[v], d / f"boundary_{v}", view=v)
            rec["planes"][v] = str(rel / f"image_{v}")
            rec["boundaries"][v] = str(rel / f"boundary_{v}")
        frames.append(rec)
        log.info("frame %d written", t)
    manifest = {"format_version": FORMAT_VERSION, "root": ".", "spec": "spec.json",
                "mesh_ed": "mesh_ed.obj", "views": list(VIEW_ORDER), "frames": frames}
    mio.write_json(manifest, out / "manifest.json")
    _emit({"manifest": str(out / "manifest.json"), "n_frames": spec.n_frames,
           "n_vertices": mesh_0.n_vertices})
    return EXIT_OK


# -- track --------------------------------------------------------------------

def _track_config(args) -> TrackConfig:
    views = tuple(canonical_view(v.strip()) for v in args.views.split(",") if v.strip())
    weights = LossWeights(lam=args.lam, beta=args.beta, tau=args.tau)
    kw = {}
    if args.param_scale is not None:
        kw["param_scale"] = args.param_scale
    return TrackConfig(weights=weights, control_spacing=args.control_spacing, iters=args.iters,
                       lr=args.lr, seed=args.seed or 0, views=views, combine=args.combine, **kw)


def write_track_outputs(res: TrackResult, cfg: TrackConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    mio.write_obj(res.mesh_t, out / "mesh_t.obj")
    mio.write_json(res.dv.tolist(), out / "dv.json")
    mio.write_volume(res.field.to_volume(), out / "field")
    cfg_d = asdict(cfg)
    mio.write_json({"config": cfg_d, "converged": res.converged, "best_iteration": res.best_iteration,
                    "final": res.final.as_dict(),
                    "history": [r.as_dict() for r in res.loss_history]}, out / "losses.json")


def _track_one(payload):
    """Worker: returns ``(frame, report dict, error)``; runs in a child process under --jobs."""
    mesh_0, ed, t_in, cfg, out, frame = payload
    try:
        res = track_pair(mesh_0, ed, t_in, cfg)
    except TrackingDiverged as exc:
        last = exc.last_report.as_dict() if exc.last_report else None
        return frame, last, str(exc)
    write_track_outputs(res, cfg, out)
    return frame, res.final.as_dict(), None


def _explicit_inputs(args, views):
    if not (args.mesh and args.ed_sa and args.t_sa):
        raise UsageError("track needs --manifest, or --mesh with --ed-sa and --t-sa")
    mesh_0 = mio.read_obj(args.mesh)
    ed_planes, t_planes, bounds = {}, {}, {}
    # --ed-sa / --t-sa name volumes; the long-axis flags name planes
    for v in VIEW_ORDER:
        flag = VIEW_FLAGS[v]
        stores = ((bounds, "b"),) if v == "sa" else ((ed_planes, "ed"), (t_planes, "t"), (bounds, "b"))
        for store, prefix in stores:
            p = getattr(args, f"{prefix}_{flag}")
            if p:
                store[v] = mio.read_plane(p)
    missing = [VIEW_FLAGS[v] for v in views if v not in bounds]
    if missing:
        raise UsageError(f"missing boundary maps for views: {', '.join('--b-' + m for m in missing)}")
    ed = FrameInputs(mio.read_volume(args.ed_sa), ed_planes, {})
    t_in = FrameInputs(mio.read_volume(args.t_sa), t_planes, bounds)
    return mesh_0, ed, t_in


def cmd_track(args) -> int:
    cfg = _track_config(args)
    out = Path(args.out_dir)
    if args.manifest:
        root, man = load_manifest(args.manifest)
        mesh_0 = mio.read_obj(root / man["mesh_ed"])
        recs = {r["frame"]: r for r in man["frames"]}
        ed = _frame_inputs(root, recs[0], [])
        wanted = _parse_frames(args.frames, sorted(recs))
        jobs = [(mesh_0, ed, _frame_inputs(root, recs[t], cfg.views), cfg, out / f"frame_{t:03d}", t)
                for t in wanted]
    else:
        mesh_0, ed, t_in = _explicit_inputs(args, cfg.views)
        jobs = [(mesh_0, ed, t_in, cfg, out, None)]

    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_track_one, jobs))
    else:
        results = [_track_one(j) for j in jobs]

    failed = [(f, rep, err) for f, rep, err in results if err]
    for f, _, err in failed:
        log.error("frame %s diverged: %s", f, err)
    if args.manifest:
        _emit([{"frame": f, "report": rep, "error": err} for f, rep, err in results])
    else:
        f, rep, err = results[0]
        _emit(rep if err is None else {"error": err, "last_report": rep})
    return EXIT_NUMERIC if failed else EXIT_OK


def _parse_frames(spec: str | None, available: list[int]) -> list[int]:
    if not spec:
        return [t for t in available if t != 0] or available
    out = []
    for part in spec.split(","):
        t = int(part)
        if t not in available:
            raise UsageError(f"frame {t} not in manifest")
        out.append(t)
    return out


# -- slice --------------------------------------------------------------------

def cmd_slice(args) -> int:
    if args.out and len(args.plane) != 1:
        raise UsageError("--out takes a single --plane; use --out-dir for several")
    mesh = mio.read_obj(args.mesh)
    out = Path(args.out_dir) if args.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, p in enumerate(args.plane):
        meta = mio.plane_metadata(p)
        frame = mio.frame_from_dict(meta)
        name = meta.get("view", f"plane{i}")
        r = SliceRasterizer(frame, args.tau, args.combine)
        pmap = r.forward(mesh)
        stem = Path(args.out) if args.out else out / f"prob_{name}"
        mio.write_plane(ImagePlane(frame, pmap), stem, view=name, tau=args.tau, combine=args.combine)
        summary.append({"view": name, "file": str(stem) + ".json", "support": int(len(r.support)),
                        "mass": float(pmap.sum())})
    _emit(summary)
    return EXIT_OK


# -- evaluate / report ----------------------------------------------------------

def _contours_from_files(paths, threshold: float) -> tuple[dict, dict, dict]:
    pts, spacing, frames = {}, {}, {}
    for i, p in enumerate(paths):
        plane = mio.read_plane(p)
        name = mio.plane_metadata(p).get("view", VIEW_ORDER[i] if i < len(VIEW_ORDER) else f"plane{i}")
        pts[name] = extract_contour(plane, threshold)
        spacing[name] = plane.frame.spacing
        frames[name] = plane.frame
    return pts, spacing, frames


def metric_report(pred_mesh, gt_mesh, pred_pts: dict, gt_pts: dict, spacing: dict, theta: float) -> MetricReport:
    hd, bf = {}, {}
    for v in sorted(gt_pts, key=lambda k: (VIEW_ORDER.index(k) if k in VIEW_ORDER else 9, k)):
        if v not in pred_pts:
            raise UsageError(f"no predicted contour for view {v}")
        hd[v] = hausdorff_2d(pred_pts[v], gt_pts[v], spacing[v])
        bf[v] = boundf(pred_pts[v], gt_pts[v], theta)
    msd = mean_surface_distance(pred_mesh, gt_mesh) if pred_mesh is not None and gt_mesh is not None else 0.0
    return MetricReport(msd, hd, bf)


def csv_row(frame, rep: MetricReport) -> list:
    row = [frame, _num(rep.msd_mm)]
    row += [_num(rep.hd_mm.get(v, float("nan"))) for v in VIEW_ORDER]
    row += [_num(rep.boundf_pct.get(v, float("nan"))) for v in VIEW_ORDER]
    return row


def _num(x: float) -> str:
    return repr(float(x))


def cmd_evaluate(args) -> int:
    if not args.gt_contours and not (args.pred_mesh and args.gt_mesh):
        raise UsageError("evaluate needs --gt-contours or both --pred-mesh and --gt-mesh")
    pred_mesh = mio.read_obj(args.pred_mesh) if args.pred_mesh else None
    gt_mesh = mio.read_obj(args.gt_mesh) if args.gt_mesh else None
    gt_pts, spacing, frames = _contours_from_files(args.gt_contours or [], args.threshold)
    if args.pred_contours:
        pred_pts, _, _ = _contours_from_files(args.pred_contours, args.threshold)
    elif gt_pts:
        if pred_mesh is None:
            raise UsageError("predicted contours need --pred-contours or --pred-mesh")
        pred_pts = {v: extract_contour(boundary_map(pred_mesh, f)) for v, f in frames.items()}
    else:
        pred_pts = {}
    rep = metric_report(pred_mesh, gt_mesh, pred_pts, gt_pts, spacing, args.theta)
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(CSV_HEADER)
            w.writerow(csv_row(args.frame, rep))
    _emit(rep.as_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    root, man = load_manifest(args.manifest)
    results = Path(args.results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    rows = 0
    for rec in man["frames"]:
        t = rec["frame"]
        pred_path = results / f"frame_{t:03d}" / "mesh_t.obj"
        if not pred_path.exists():
            continue
        pred = mio.read_obj(pred_path)
        gt = mio.read_obj(root / rec["mesh"])
        gt_pts, pred_pts, spacing = {}, {}, {}
        for v, stem in rec["boundaries"].items():
            b = mio.read_plane(root / stem)
            gt_pts[v] = extract_contour(b, args.threshold)
            pred_pts[v] = extract_contour(boundary_map(pred, b.frame))
            spacing[v] = b.frame.spacing
        w.writerow(csv_row(t, metric_report(pred, gt, pred_pts, gt_pts, spacing, args.theta)))
        rows += 1
    if rows == 0:
        raise FileNotFoundError(f"no tracked frames under {results}")
    if args.out:
        Path(args.out).write_text(buf.getvalue())
        _emit({"csv": args.out, "rows": rows})
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=d if suppress else None, help="random seed")
    parser.add_argument("--jobs", type=int, default=d if suppress else 1, help="parallel frame workers")
    parser.add_argument("--quiet", action="store_true", default=d if suppress else False,
                        help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meshtrack", description="Mesh motion tracking from multi-view cardiac images.")
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("track", parents=[common], help="estimate mesh motion")
    p.add_argument("--manifest", help="phantom manifest; tracks every non-ED frame unless --frames")
    p.add_argument("--frames", help="comma-separated frame indices (manifest mode)")
    p.add_argument("--mesh", help="ED mesh (OBJ)")
    for prefix, what in (("ed", "ED image"), ("t", "frame-t image"), ("b", "frame-t boundary map")):
        for flag in ("sa", "2ch", "4ch"):
            p.add_argument(f"--{prefix}-{flag}", help=f"{what}, {flag} view")
    p.add_argument("--views", default="sa,lax1,lax2", help="comma-separated subset of sa, lax1 (2ch), lax2 (4ch)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=300.0)
    p.add_argument("--beta", type=float, default=200.0)
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--control-spacing", type=int, default=4)
    p.add_argument("--param-scale", type=float, default=None, help="mm of displacement per parameter unit")
    p.add_argument("--combine", choices=COMBINE_RULES, default=TrackConfig.combine)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("slice", parents=[common], help="soft-slice a mesh onto planes")
    p.add_argument("--mesh", required=True)
    p.add_argument("--plane", action="append", required=True, help="plane JSON whose frame is used (repeatable)")
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--combine", choices=COMBINE_RULES, default="max")
    dest = p.add_mutually_exclusive_group(required=True)
    dest.add_argument("--out", help="output stem for a single plane (writes .raw and .json)")
    dest.add_argument("--out-dir", help="directory receiving prob_<view> per plane")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for one prediction")
    p.add_argument("--pred-mesh")
    p.add_argument("--gt-mesh")
    p.add_argument("--pred-contours", nargs="+", help="plane files; sliced from --pred-mesh if omitted")
    p.add_argument("--gt-contours", nargs="+", help="boundary plane files")
    p.add_argument("--theta", type=float, default=2.0, help="BoundF tolerance (px)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--csv", help="append a CSV row to this file")
    p.add_argument("--frame", type=int, default=0, help="frame index for the CSV row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="batch metrics CSV over tracked frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="track --out-dir of a manifest run")
    p.add_argument("--theta", type=float, default=2.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.jobs < 1:
        log.error("--jobs must be >= 1")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (OSError, mio.FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except TrackingDiverged as exc:
        log.error("%s", exc)
        _emit({"error": str(exc), "last_report": exc.last_report.as_dict() if exc.last_report else None})
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (PhantomSpecError, GeometryError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
