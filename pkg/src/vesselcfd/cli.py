"""Command-line entry point: ``vesselcfd <command> ...``.

Exit codes: 0 success, 1 a case or input failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from vesselcfd.errors import VesselCFDError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _print_json(obj) -> None:
    from vesselcfd.pipeline import _clean, _json_default

    print(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default))


def _load(path):
    from vesselcfd.volume import load_volume

    if not Path(path).is_file():
        raise _UsageError(f"input file {path} not found")
    return load_volume(path)


def _defaults(cls) -> str:
    from dataclasses import fields

    return ", ".join(f"{f.name}={f.default!r}" for f in fields(cls))


# ------------------------------------------------------------------ commands

def cmd_inspect(a) -> int:
    from vesselcfd.topology import TopologyPolicy, vta_check

    vol = _load(a.mask)
    v = vta_check(vol, TopologyPolicy(a.max_components, a.max_loops, a.max_cavities))
    if v.betti is None:
        print(f"b=(0,0,0) chi=0 foreground=0 vta={v.vta}")
    else:
        b = v.betti.as_tuple()
        print(f"b=({b[0]},{b[1]},{b[2]}) chi={v.betti.euler} foreground={int(vol.bool().sum())} vta={v.vta}")
    for r in v.reasons:
        print(f"  {r}")
    return EXIT_OK


def cmd_preprocess(a) -> int:
    from vesselcfd.morphology import PreprocessConfig, preprocess
    from vesselcfd.volume import save_volume

    cfg = PreprocessConfig(a.median_mm, a.fill_holes, not a.no_keep_largest)
    out = preprocess(_load(a.mask), cfg)
    save_volume(out, a.out)
    print(f"wrote {a.out} ({int(out.bool().sum())} foreground voxels)")
    return EXIT_OK


def cmd_mesh(a) -> int:
    from vesselcfd.surface import diagnose, marching_cubes, mesh_mask_dice, write_stl

    vol = _load(a.mask)
    mesh = marching_cubes(vol, relax_iterations=a.relax)
    write_stl(mesh, a.out)
    d = diagnose(mesh)
    _print_json({"stl": str(a.out), "triangles": mesh.n_triangles, "diagnostics": d.to_dict(),
                 "mask_dice": mesh_mask_dice(vol, mesh)})
    return EXIT_OK if d.watertight else EXIT_FAIL


def cmd_centerline(a) -> int:
    from vesselcfd.centerline import skeletonize

    g = skeletonize(_load(a.mask), prune=not a.no_prune)
    info = {"nodes": g.n_nodes, "edges": int(len(g.edges)), "endpoints": g.endpoints,
            "branch_points": g.branch_points, "components": g.n_components(), "cycle_rank": g.cycle_rank()}
    if a.out:
        Path(a.out).write_text(json.dumps(g.to_dict(), indent=2))
        info["graph"] = str(a.out)
    _print_json(info)
    return EXIT_OK


def _domain(vol):
    from vesselcfd.centerline import build_flow_domain, plan_cuts, skeletonize

    g = skeletonize(vol)
    return build_flow_domain(vol, plan_cuts(g), g)


def cmd_cut(a) -> int:
    from vesselcfd.surface import export_labeled

    vol = _load(a.mask)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    dom = _domain(vol)
    (out / "cut_plan.json").write_text(json.dumps(dom.plan.to_dict(), indent=2))
    labels = export_labeled(dom.mesh, out / "domain.stl")
    _print_json({"plan": dom.plan.to_dict(), "domain": dom.summary(), "labels": labels})
    return EXIT_OK


def cmd_simulate(a) -> int:
    from vesselcfd.solver import SolverConfig, bfa_check, solve_steady

    overrides = {k: v for k, v in (("grid_spacing_mm", a.spacing), ("mass_flow", a.mass_flow),
                                   ("max_steps", a.max_steps), ("residual_tol", a.tol), ("cfl", a.cfl))
                 if v is not None}
    cfg = replace(SolverConfig(), **overrides)
    field = solve_steady(_domain(_load(a.mask)), cfg)
    ok = bfa_check(field)
    summary = {**field.summary(), "bfa": int(ok)}
    if a.out:
        Path(a.out).write_text(json.dumps(_json_ready(summary), indent=2))
    _print_json(summary)
    return EXIT_OK if ok else EXIT_FAIL


def _json_ready(obj):
    from vesselcfd.pipeline import _clean, _json_default

    return json.loads(json.dumps(_clean(obj), default=_json_default))


def cmd_metrics(a) -> int:
    from vesselcfd.errors import UndefinedMetricError
    from vesselcfd.metrics import SegPair, boundary_iou, cl_dice, dice, hd95

    pair = SegPair.of(_load(a.pred), _load(a.gt))
    out = {"dice": dice(pair), "biou": boundary_iou(pair, d=a.band)}
    for name, fn in (("hd95_mm", hd95), ("cldice", lambda p: cl_dice(p, literal=a.literal_cldice))):
        try:
            out[name] = fn(pair)
        except UndefinedMetricError:
            out[name] = None
    _print_json(out)
    return EXIT_OK


_LOSS_KEYS = {"loss", "pred", "target", "centers", "sigma", "alpha", "beta", "lam", "iterations", "eps",
              "logits", "true_count", "gradient_check", "seed", "step"}


def cmd_losses(a) -> int:
    from vesselcfd import losses as L

    path = Path(a.config)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise _UsageError(f"config {path} not found") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise _UsageError(f"cannot read config {path}: {exc}") from exc
    unknown = sorted(set(cfg) - _LOSS_KEYS)
    if unknown:
        raise _UsageError(f"unknown loss config key(s): {', '.join(unknown)}")
    kind = cfg.get("loss", "stage2")
    base = path.parent

    def vol(key):
        if key not in cfg:
            raise _UsageError(f"loss '{kind}' needs '{key}'")
        return _load(base / cfg[key]).data.astype(float)

    signature = None
    if kind == "focal":
        p = L.clamp_probabilities(vol("pred"))
        target = L.gaussian_heatmap(cfg.get("centers", []), cfg.get("sigma", 3.0), p.shape)
        fc = L.FocalConfig(cfg.get("alpha", 2.0), cfg.get("beta", 4.0))
        fn, x = (lambda q: L.heatmap_focal_loss(q, target, fc)), p
    elif kind == "count":
        if "logits" not in cfg or "true_count" not in cfg:
            raise _UsageError("loss 'count' needs 'logits' and 'true_count'")
        fn, x = (lambda z: L.count_ce_loss(z, cfg["true_count"])), np.asarray(cfg["logits"], float)
    elif kind in ("stage2", "dice-ce"):
        p = L.clamp_probabilities(vol("pred"))
        g = (vol("target") > 0.5).astype(float)
        cc = L.ClDiceConfig(cfg.get("lam", 0.5) if kind == "stage2" else 0.0, cfg.get("iterations", 10),
                            cfg.get("eps", 1e-6))
        fn, x = (lambda q: L.stage2_loss(q, g, cc)), p
        signature = lambda q: L.stage2_signature(q, cc)  # noqa: E731
    else:
        raise _UsageError(f"unknown loss '{kind}' (focal, count, stage2, dice-ce)")
    value, grad = fn(x)
    report = {"loss": kind, "value": value, "grad_norm": float(np.linalg.norm(grad))}
    n = int(cfg.get("gradient_check", 0))
    if n > 0:
        rep = L.gradient_check(fn, x, n_points=n, h=cfg.get("step", 1e-4), seed=cfg.get("seed", 0),
                               signature=signature)
        report["gradient_check"] = rep.to_dict()
    _print_json(report)
    return EXIT_OK


def cmd_phantom(a) -> int:
    from vesselcfd.phantom import DefectSpec, PhantomSpec, Shape, generate_phantom, inject_defect, write_suite
    from vesselcfd.volume import save_volume

    if a.suite:
        manifest = write_suite(a.suite, threads=a.threads)
        print(f"wrote {len(manifest['cases'])} cases and run.json to {a.suite}")
        return EXIT_OK
    if not a.shape or not a.out:
        raise _UsageError("phantom needs SHAPE and OUT, or --suite DIR")
    spec = PhantomSpec(Shape(a.shape), a.radius, a.length, a.aneurysm_radius, a.spacing, a.seed, a.major_radius)
    vol, graph, facts = generate_phantom(spec)
    if a.defect:
        vol = inject_defect(vol, DefectSpec(a.defect, a.location, a.magnitude))
    save_volume(vol, a.out)
    facts_path = Path(a.out).with_name(Path(a.out).name.split(".")[0] + "_facts.json")
    facts_path.write_text(json.dumps(facts.to_dict(), indent=2))
    print(f"wrote {a.out} dims={vol.dims} and {facts_path.name}")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    from vesselcfd.pipeline import ConfigError, RunConfig, evaluate_dataset

    try:
        cfg = RunConfig.load(a.config)
        if a.threads:
            cfg = replace(cfg, threads=a.threads)
        cfg.effective_threads()
    except ConfigError as exc:
        raise _UsageError(str(exc)) from exc
    report = evaluate_dataset(cfg)
    agg = report.aggregate()
    print(f"cases={agg['cases']} invalid={agg['invalid']} tp={agg['tp']} fp={agg['fp']} fn={agg['fn']} "
          f"tp_hat={agg['tp_hat']} cfd_as={agg['cfd_as']:.4f} f1={agg['f1']:.4f} -> {cfg.output}")
    return EXIT_FAIL if report.invalid else EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    from vesselcfd.morphology import PreprocessConfig
    from vesselcfd.solver import SolverConfig

    p = _Parser(prog="vesselcfd", description="Check vascular segmentation masks for CFD usability.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="Betti numbers and topology verdict of a mask")
    s.add_argument("mask")
    s.add_argument("--max-components", type=int, default=1)
    s.add_argument("--max-loops", type=int, default=0)
    s.add_argument("--max-cavities", type=int, default=0)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("preprocess", help="median filter, hole filling, largest component",
                       epilog=f"defaults: {_defaults(PreprocessConfig)}")
    s.add_argument("mask")
    s.add_argument("out")
    s.add_argument("--median-mm", type=float, default=PreprocessConfig.median_kernel_mm)
    s.add_argument("--fill-holes", type=int, default=PreprocessConfig.fill_hole_max_voxels,
                   help="largest enclosed hole (voxels) to fill")
    s.add_argument("--no-keep-largest", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("mesh", help="marching-cubes surface to STL with diagnostics")
    s.add_argument("mask")
    s.add_argument("out")
    s.add_argument("--relax", type=int, default=None, help="edge relaxation iterations")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("centerline", help="skeleton graph of a mask")
    s.add_argument("mask")
    s.add_argument("--out", help="write the graph as JSON")
    s.add_argument("--no-prune", action="store_true")
    s.set_defaults(func=cmd_centerline)

    s = sub.add_parser("cut", help="plan inlet/outlet cuts and write the labelled capped mesh")
    s.add_argument("mask")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_cut)

    s = sub.add_parser("simulate", help="steady flow solve on the cut domain",
                       epilog=f"defaults: {_defaults(SolverConfig)}")
    s.add_argument("mask")
    s.add_argument("--spacing", type=float, help="solver grid spacing (mm)")
    s.add_argument("--mass-flow", type=float, help="inlet mass flow (kg/s)")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--tol", type=float, help="residual tolerance")
    s.add_argument("--cfl", type=float)
    s.add_argument("--out", help="write the flow summary as JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("metrics", help="Dice, HD95, clDice and boundary IoU of a prediction")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--band", type=int, default=1, help="boundary band width (voxels)")
    s.add_argument("--literal-cldice", action="store_true", help="Dice of the two skeletons instead")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("losses", help="evaluate a loss and optionally check its gradient")
    lsub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = lsub.add_parser("eval", help="JSON report of loss value and gradient check",
                        epilog="config keys: " + ", ".join(sorted(_LOSS_KEYS)))
    e.add_argument("--config", required=True)
    e.set_defaults(func=cmd_losses)

    s = sub.add_parser("phantom", help="synthetic phantom, or the standard suite with --suite")
    s.add_argument("shape", nargs="?", help="straight-tube, curved-tube, bifurcation, tube-with-aneurysm, "
                                            "torus, hollow-shell or sphere")
    s.add_argument("out", nargs="?")
    s.add_argument("--radius", type=float, default=1.5)
    s.add_argument("--length", type=float, default=20.0)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--aneurysm-radius", type=float)
    s.add_argument("--major-radius", type=float)
    s.add_argument("--defect", help="adhesion-bridge, internal-cavity, break, surface-spike, surface-dent, "
                                    "stub-branch")
    s.add_argument("--location", type=float, default=0.5)
    s.add_argument("--magnitude", type=int, default=2)
    s.add_argument("--suite", metavar="DIR", help="write the 30-case evaluation suite and run.json")
    s.add_argument("--threads", type=int, default=1, help="threads recorded in the suite run.json")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("evaluate", help="run the full pipeline over a dataset manifest",
                       epilog="config: JSON with dataset, output, and optional preprocess, topology, solver, "
                              "metrics, loss sections and threads; AF_THREADS overrides threads")
    s.add_argument("--config", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"vesselcfd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VesselCFDError, ValueError, OSError) as exc:
        print(f"vesselcfd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
