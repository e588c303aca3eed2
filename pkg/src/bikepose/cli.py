"""Command-line entry point: ``bikepose {generate,fit,eval,render,oracle-check,replay}``.

Every command writes ``<out>.manifest.json`` next to its main output. The
manifest records the resolved arguments so ``bikepose replay`` can rerun the
command and reproduce the outputs byte for byte.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import Camera
from .metrics import EvaluationError, build_report
from .model import CanonicalTemplate, TemplateError, canonical_keypoints, load_template, project_keypoints, repose
from .oracles import run_all
from .predictions import Prediction, read_predictions, write_predictions
from .render import orthographic_views, render_overlay
from .solver import SolverConfig, fit_pose, observation_from_record
from .synth import (
    SCHEMA_NAME as ANNOTATION_SCHEMA,
    AnnotationFormatError,
    DatasetConfig,
    default_template_set,
    generate_dataset,
    read_records,
    templates_from_header,
    write_records,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ORACLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are code 1 here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}", EXIT_CONFIG)


def write_manifest(out, command, args, config, inputs, outputs, duration):
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "seed": args.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "duration_s": round(duration, 3),
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _load_dataset(path):
    try:
        header, records = read_records(path)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {path}", EXIT_DATA) from None
    except (AnnotationFormatError, OSError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_DATA) from None
    templates = templates_from_header(header)
    for rec in records:
        if rec.template_id not in templates:
            raise CliError(f"{path}: record {rec.sample_id} uses unknown template {rec.template_id!r}", EXIT_DATA)
    return header, records, templates


def load_generate_config(path):
    """Parse a generate config: DatasetConfig fields plus optional ``camera``
    and ``template_files`` (a list of paths, or a mapping id -> path)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object", EXIT_CONFIG)
    raw = dict(raw)
    camera_raw = raw.pop("camera", None)
    files = raw.pop("template_files", None)
    try:
        cfg = DatasetConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    try:
        camera = Camera() if camera_raw is None else Camera.from_dict(camera_raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: field 'camera': {exc}", EXIT_CONFIG) from None
    if files is None:
        templates = default_template_set(cfg.n_templates)
    else:
        if isinstance(files, list):
            files = {f"bike_{i:02d}": f for i, f in enumerate(files)}
        templates = {}
        for tid, f in files.items():
            f = Path(f) if Path(f).is_absolute() else path.parent / f
            try:
                templates[tid] = load_template(f)
            except FileNotFoundError:
                raise CliError(f"template file not found: {f}", EXIT_CONFIG) from None
            except (TemplateError, KeyError, TypeError, ValueError) as exc:
                raise CliError(f"template file {f}: {exc}", EXIT_CONFIG) from None
        if len(templates) != cfg.n_templates:
            raise CliError(
                f"{path}: field 'n_templates' is {cfg.n_templates} but {len(templates)} template files were given",
                EXIT_CONFIG,
            )
    return cfg, camera, templates


def cmd_generate(args):
    if args.config:
        cfg, camera, templates = load_generate_config(args.config)
    else:
        cfg, camera = DatasetConfig(), Camera()
        templates = default_template_set(cfg.n_templates)
    if args.seed is not None:
        cfg = DatasetConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    records = list(generate_dataset(cfg, templates, camera))
    write_records(args.out, records, templates, camera)
    n_train = sum(r.split == "train" for r in records)
    print(f"{len(records)} records ({n_train} train / {len(records) - n_train} val)")
    config = {**cfg.to_dict(), "camera": camera.to_dict()}
    return config, [args.config] if args.config else [], [args.out], EXIT_OK


def _fit_one(rec, template, cfg, noise_px, seed, index):
    # Noise depends only on (seed, index) so results do not depend on scheduling.
    rng = np.random.default_rng([seed, index])
    try:
        obs = observation_from_record(rec, noise_px, rng)
        res = fit_pose(obs, template, cfg)
    except ValueError as exc:
        return Prediction(rec.sample_id, None, error=f"{type(exc).__name__}: {exc}")
    return Prediction(
        rec.sample_id,
        res.pose,
        res.residuals,
        objective=res.objective,
        converged=res.converged,
        iterations=res.iterations_used,
    )


def cmd_fit(args):
    _, records, templates = _load_dataset(args.dataset)
    try:
        cfg = SolverConfig(yaw_starts=args.yaw_starts, fit_shape=args.fit_shape)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    seed = args.seed if args.seed is not None else 0
    jobs = [(rec, templates[rec.template_id], cfg, args.noise_px, seed, i) for i, rec in enumerate(records)]
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            preds = list(pool.map(lambda j: _fit_one(*j), jobs))
    else:
        preds = [_fit_one(*j) for j in jobs]
    meta = {"dataset": str(args.dataset), "noise_px": args.noise_px, "seed": seed, "solver": _solver_dict(cfg)}
    write_predictions(args.out, preds, meta)
    failed = [p for p in preds if p.failed]
    conv = sum(bool(p.converged) for p in preds)
    print(f"{len(preds)} fitted, {conv} converged, {len(failed)} failed")
    for p in failed:
        print(f"  {p.sample_id}: {p.error}", file=sys.stderr)
    return meta, [args.dataset], [args.out], EXIT_DATA if failed else EXIT_OK


def _solver_dict(cfg):
    d = dict(cfg.__dict__)
    d["domain"] = cfg.domain.to_dict()
    d["weights"] = list(cfg.weights.as_tuple())
    return d


def cmd_eval(args):
    _, records, templates = _load_dataset(args.dataset)
    try:
        preds = read_predictions(args.predictions)
    except FileNotFoundError:
        raise CliError(f"predictions not found: {args.predictions}", EXIT_DATA) from None
    except AnnotationFormatError as exc:
        raise CliError(f"{args.predictions}: {exc}", EXIT_DATA) from None
    try:
        report = build_report(
            records,
            preds,
            templates,
            iou_mode=args.iou_mode,
            mc_samples=args.mc_samples,
            seed=args.seed if args.seed is not None else 0,
        )
    except EvaluationError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    print(report.format_table(), end="")
    Path(args.out).write_text(report.to_json_lines())
    config = {"iou_mode": args.iou_mode, "mc_samples": args.mc_samples}
    return config, [args.dataset, args.predictions], [args.out], EXIT_OK


def _find_keypoints(path, sample_id, dataset):
    """2D keypoints, visibility and 3D keypoints of one sample from either file kind."""
    with open(path) as fh:
        schema = json.loads(fh.readline()).get("schema")
    if schema == ANNOTATION_SCHEMA:
        _, records, _ = _load_dataset(path)
        rec = next((r for r in records if r.sample_id == sample_id), None)
        if rec is None:
            raise CliError(f"unknown sample id: {sample_id}", EXIT_DATA)
        return rec.keypoints_2d_I, rec.visibility, rec.keypoints_3d, rec.camera
    if dataset is None:
        raise CliError("rendering predictions needs --dataset for the camera and templates", EXIT_CONFIG)
    pred = next((p for p in read_predictions(path) if p.sample_id == sample_id), None)
    if pred is None:
        raise CliError(f"unknown sample id: {sample_id}", EXIT_DATA)
    if pred.failed:
        raise CliError(f"sample {sample_id} has no fitted pose ({pred.error})", EXIT_DATA)
    _, records, templates = _load_dataset(dataset)
    rec = next((r for r in records if r.sample_id == sample_id), None)
    if rec is None:
        raise CliError(f"unknown sample id: {sample_id}", EXIT_DATA)
    template = templates[rec.template_id]
    res = np.zeros((len(rec.visibility), 3)) if pred.residuals is None else pred.residuals
    k3d = repose(template, canonical_keypoints(template, res, None), pred.pose)
    return project_keypoints(rec.camera, k3d), rec.visibility, k3d, rec.camera


def cmd_render(args):
    try:
        uv, vis, k3d, camera = _find_keypoints(args.input, args.sample_id, args.dataset)
    except (FileNotFoundError, json.JSONDecodeError, AnnotationFormatError) as exc:
        raise CliError(f"{args.input}: {exc}", EXIT_DATA) from None
    out = Path(args.out)
    render_overlay(uv, vis, (camera.width, camera.height), args.background).save(out)
    views = out.with_name(out.stem + "_views" + out.suffix)
    orthographic_views(k3d).save(views)
    print(f"wrote {out} and {views}")
    inputs = [args.input] + ([args.dataset] if args.dataset else [])
    return {"sample_id": args.sample_id}, inputs, [str(out), str(views)], EXIT_OK


def cmd_oracle_check(args):
    seed = args.seed if args.seed is not None else 0
    suites = run_all(seed=seed, iou_tol=args.iou_tol)
    ok = True
    for s in suites:
        status = "PASS" if s["passed"] == s["total"] else "FAIL"
        ok &= status == "PASS"
        print(f"{status} {s['name']}: {s['passed']}/{s['total']} (tol {s['tolerance']:g})")
        for case in s["failures"]:
            print("  failing case: " + json.dumps(case), file=sys.stderr)
    Path(args.out).write_text(json.dumps(suites, indent=2) + "\n")
    return {"iou_tol": args.iou_tol}, [], [args.out], EXIT_OK if ok else EXIT_ORACLE


def cmd_replay(args):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = manifest["args"]["argv"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"{args.manifest}: not a usable manifest ({exc})", EXIT_CONFIG) from None
    return main(argv)


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "render": cmd_render,
    "oracle-check": cmd_oracle_check,
}


def build_parser():
    p = _Parser(prog="bikepose", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic annotation file")
    g.add_argument("--config", help="JSON config with dataset fields, camera and template_files")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="fit 8D poses to every record of a dataset")
    f.add_argument("dataset")
    f.add_argument("--out", required=True)
    f.add_argument("--noise-px", type=float, default=0.0)
    f.add_argument("--fit-shape", action="store_true")
    f.add_argument("--yaw-starts", type=int, default=8)
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("dataset")
    e.add_argument("predictions")
    e.add_argument("--out", required=True)
    e.add_argument("--iou-mode", choices=("exact", "mc"), default="exact")
    e.add_argument("--mc-samples", type=int, default=200_000)
    e.add_argument("--seed", type=int)

    r = sub.add_parser("render", help="draw one sample's skeleton and orthographic views")
    r.add_argument("input", help="annotation or predictions file")
    r.add_argument("--sample-id", required=True)
    r.add_argument("--dataset", help="annotation file (needed when input holds predictions)")
    r.add_argument("--background")
    r.add_argument("--out", required=True)

    o = sub.add_parser("oracle-check", help="run the embedded oracle suites")
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--iou-tol", type=float, default=0.01)

    m = sub.add_parser("replay", help="rerun a command from its manifest")
    m.add_argument("manifest")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            return cmd_replay(args)
        t0 = time.perf_counter()
        config, inputs, outputs, code = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    resolved = {k: v for k, v in vars(args).items()}
    resolved["argv"] = argv
    write_manifest(args.out, args.command, resolved, config, inputs, outputs, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
