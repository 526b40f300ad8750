"""Per-case evaluation chain and dataset aggregation.

A case runs topology check, preprocessing, surface extraction, centreline,
cutting, domain construction and the flow solve in that order.  The first
failing stage zeroes its flag and every later flag, and later stages are
recorded as skipped.  Segmentation metrics and detection matching are
computed for every readable case whatever the flags say.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from vesselcfd.errors import UndefinedMetricError, VesselCFDError
from vesselcfd.metrics import (ApplicabilityRecord, DetectionCounts, SegPair, boundary_iou, cfd_as, cl_dice,
                               dice, hd95, match_detections, prf)
from vesselcfd.morphology import PreprocessConfig, preprocess
from vesselcfd.solver import SolverConfig
from vesselcfd.topology import TopologyPolicy, vta_check
from vesselcfd.volume import load_volume

log = logging.getLogger(__name__)

STAGES = ("topology", "preprocess", "surface", "centerline", "cut", "domain", "solve")
OK, SKIPPED = "ok", "skipped"
# Flag owning each stage: a failure there zeroes this flag and all later ones.
STAGE_FLAG = {"topology": "vta", "preprocess": "mga", "surface": "mga", "centerline": "mga",
              "cut": "mga", "domain": "mga", "solve": "bfa"}
CSV_COLUMNS = ("case_id", "dice", "hd95_mm", "cldice", "biou", "tp", "fp", "fn", "vta", "mga", "bfa", "ae")


class ConfigError(ValueError):
    """Run configuration is missing, unreadable or inconsistent."""


@dataclass(frozen=True)
class MetricConfig:
    biou_band: int = 1
    match_min_radius_mm: float = 2.0
    cldice_literal: bool = False


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}' section: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    output: Path
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    topology: TopologyPolicy = field(default_factory=TopologyPolicy)
    solver: SolverConfig = field(default_factory=SolverConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    loss: dict = field(default_factory=dict)
    threads: int = 1

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "RunConfig":
        base = Path(base or ".")
        allowed = {"dataset", "output", "preprocess", "topology", "solver", "metrics", "loss", "threads"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "dataset" not in data or "output" not in data:
            raise ConfigError("config needs 'dataset' and 'output'")
        dataset = (base / data["dataset"]).resolve()
        if not (dataset / "manifest.json").is_file():
            raise ConfigError(f"no manifest.json in dataset directory {dataset}")
        threads = data.get("threads", 1)
        if not isinstance(threads, int) or threads < 1:
            raise ConfigError("threads must be a positive integer")
        return cls(
            dataset=dataset,
            output=(base / data["output"]).resolve(),
            preprocess=_section(PreprocessConfig, data.get("preprocess"), "preprocess"),
            topology=_section(TopologyPolicy, data.get("topology"), "topology"),
            solver=_section(SolverConfig, data.get("solver"), "solver"),
            metrics=_section(MetricConfig, data.get("metrics"), "metrics"),
            loss=dict(data.get("loss") or {}),
            threads=threads,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def effective_threads(self) -> int:
        env = os.environ.get("AF_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise ConfigError(f"AF_THREADS must be an integer, got {env!r}") from exc
            if n < 1:
                raise ConfigError("AF_THREADS must be positive")
            return n
        return self.threads

    def describe(self) -> dict:
        """Path-free view of the settings, embedded in the summary."""
        return {"preprocess": asdict(self.preprocess), "topology": asdict(self.topology),
                "solver": asdict(self.solver), "metrics": asdict(self.metrics), "loss": dict(self.loss)}


@dataclass
class CaseReport:
    case_id: str
    stages: dict = field(default_factory=lambda: {s: SKIPPED for s in STAGES})
    vta: int = 0
    mga: int = 0
    bfa: int = 0
    metrics: dict = field(default_factory=dict)
    detection: DetectionCounts = field(default_factory=DetectionCounts)
    details: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)

    @property
    def ae(self) -> int:
        return int(self.vta and self.mga and self.bfa)

    def records(self) -> list[ApplicabilityRecord]:
        """One applicability record per true-positive match of this case."""
        return [ApplicabilityRecord(self.vta, self.mga, self.bfa, self.case_id) for _ in range(self.detection.tp)]

    def to_dict(self, timings: bool = True) -> dict:
        out = {
            "case_id": self.case_id,
            "stages": dict(self.stages),
            "vta": self.vta, "mga": self.mga, "bfa": self.bfa, "ae": self.ae,
            "metrics": dict(self.metrics),
            "detection": self.detection.to_dict(),
            "details": self.details,
        }
        if timings:
            out["timings_ms"] = dict(self.timings_ms)
        return out


def _metric_block(pred, gt, cfg: MetricConfig) -> dict:
    pair = SegPair.of(pred, gt)
    out = {"dice": dice(pair), "biou": boundary_iou(pair, d=cfg.biou_band)}
    for name, fn in (("hd95_mm", hd95), ("cldice", lambda p: cl_dice(p, literal=cfg.cldice_literal))):
        try:
            out[name] = fn(pair)
        except UndefinedMetricError:
            out[name] = None
    return out


def evaluate_case(pred, gt, gt_aneurysms=(), cfg: RunConfig | None = None, case_id: str = "case",
                  pred_centers=(), solver_overrides: dict | None = None, artifacts: Path | None = None) -> CaseReport:
    """Run the availability chain on one prediction and score it against its ground truth."""
    from vesselcfd.centerline import build_flow_domain, plan_cuts, skeletonize
    from vesselcfd.solver import bfa_check, solve_steady
    from vesselcfd.surface import INLET_BASE, OUTLET_BASE, diagnose, export_labeled, marching_cubes

    if cfg is None:
        raise ValueError("evaluate_case needs a RunConfig")
    rep = CaseReport(case_id)
    rep.metrics = _metric_block(pred, gt, cfg.metrics)
    rep.detection = match_detections(pred_centers, list(gt_aneurysms), cfg.metrics.match_min_radius_mm)
    solver_cfg = replace(cfg.solver, **(solver_overrides or {}))

    flags = {"vta": 1, "mga": 1, "bfa": 1}
    state = {}

    def stage_topology():
        verdict = vta_check(pred, cfg.topology)
        rep.details["topology"] = verdict.to_dict()
        if not verdict.vta:
            raise _StageFailure("topology check failed: " + ", ".join(verdict.reasons))

    def stage_preprocess():
        state["mask"] = out = preprocess(pred, cfg.preprocess)
        if not out.bool().any():
            raise _StageFailure("preprocessing left an empty mask")

    def stage_surface():
        mesh = marching_cubes(state["mask"])
        d = diagnose(mesh)
        rep.details["mesh"] = d.to_dict()
        if not d.watertight:
            raise _StageFailure(f"surface is not watertight ({d.boundary_edges} boundary, "
                                f"{d.non_manifold_edges} non-manifold edges)")

    def stage_centerline():
        state["graph"] = g = skeletonize(state["mask"])
        rep.details["centerline"] = {"nodes": g.n_nodes, "endpoints": len(g.endpoints),
                                     "branch_points": len(g.branch_points)}

    def stage_cut():
        state["plan"] = plan = plan_cuts(state["graph"])
        rep.details["cut_plan"] = plan.to_dict()

    def stage_domain():
        dom = build_flow_domain(state["mask"], state["plan"], state["graph"])
        d = diagnose(dom.mesh)
        labels = set(int(x) for x in dom.mesh.labels)
        n_in = sum(1 for x in labels if INLET_BASE <= x < OUTLET_BASE)
        n_out = sum(1 for x in labels if x >= OUTLET_BASE)
        rep.details["domain"] = {**dom.summary(), "capped_mesh": d.to_dict(),
                                 "inlet_labels": n_in, "outlet_labels": n_out}
        if not d.watertight:
            raise _StageFailure("capped mesh is not watertight")
        if n_in < 1 or n_out < 1:
            raise _StageFailure("capped mesh lacks an inlet or outlet patch")
        if artifacts is not None:
            artifacts.mkdir(parents=True, exist_ok=True)
            export_labeled(dom.mesh, artifacts / f"{case_id}_capped.stl")
        state["domain"] = dom

    def stage_solve():
        fld = solve_steady(state["domain"], solver_cfg)
        rep.details["flow"] = fld.summary()
        if not bfa_check(fld):
            raise _StageFailure(fld.error or "flow solution failed the mass-balance check")

    steps = dict(zip(STAGES, (stage_topology, stage_preprocess, stage_surface, stage_centerline,
                              stage_cut, stage_domain, stage_solve)))
    failed = False
    for name in STAGES:
        if failed:
            rep.stages[name] = SKIPPED
            continue
        t0 = time.perf_counter()
        try:
            steps[name]()
            rep.stages[name] = OK
        except _StageFailure as exc:
            rep.stages[name] = str(exc)
            failed = True
        except Exception as exc:  # a bad case must never abort the dataset run
            rep.stages[name] = f"{type(exc).__name__}: {exc}"
            failed = True
        rep.timings_ms[name] = round(1000.0 * (time.perf_counter() - t0), 3)
        if failed:
            hit = False
            for f in ("vta", "mga", "bfa"):
                hit = hit or f == STAGE_FLAG[name]
                if hit:
                    flags[f] = 0
    rep.vta, rep.mga, rep.bfa = flags["vta"], flags["mga"], flags["bfa"]
    assert rep.ae == int(rep.vta and rep.mga and rep.bfa)
    return rep


class _StageFailure(Exception):
    pass


# ------------------------------------------------------------------ datasets

@dataclass
class DatasetReport:
    cases: list[CaseReport]
    invalid: list[dict]
    config: dict

    @property
    def counts(self) -> DetectionCounts:
        total = DetectionCounts()
        for c in self.cases:
            total = total + DetectionCounts(c.detection.tp, c.detection.fp, c.detection.fn)
        return total

    def records(self) -> list[ApplicabilityRecord]:
        return [r for c in self.cases for r in c.records()]

    @property
    def cfd_as(self) -> float:
        return cfd_as(self.counts, self.records())

    def aggregate(self) -> dict:
        counts = self.counts
        pr, re, acc, f1 = prf(counts)
        recs = self.records()
        return {
            "cases": len(self.cases),
            "invalid": len(self.invalid),
            "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
            "tp_hat": sum(r.ae for r in recs),
            "cfd_as": self.cfd_as,
            "precision": pr, "recall": re, "accuracy": acc, "f1": f1,
            "vta": sum(c.vta for c in self.cases),
            "mga": sum(c.mga for c in self.cases),
            "bfa": sum(c.bfa for c in self.cases),
            "ae": sum(c.ae for c in self.cases),
        }

    def summary(self) -> dict:
        return {"aggregate": self.aggregate(), "config": self.config,
                "cases": [c.to_dict(timings=False) for c in self.cases], "invalid": self.invalid}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cases:
            m = c.metrics
            w.writerow([c.case_id, _fmt(m.get("dice")), _fmt(m.get("hd95_mm")), _fmt(m.get("cldice")),
                        _fmt(m.get("biou")), c.detection.tp, c.detection.fp, c.detection.fn,
                        c.vta, c.mga, c.bfa, c.ae])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def read_manifest(dataset: Path) -> list[dict]:
    try:
        data = json.loads((dataset / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest in {dataset}: {exc}") from exc
    cases = data.get("cases") if isinstance(data, dict) else None
    if not isinstance(cases, list):
        raise ConfigError("manifest must hold a 'cases' list")
    ids = [c.get("id") for c in cases]
    if any(not isinstance(i, str) for i in ids) or len(set(ids)) != len(ids):
        raise ConfigError("every manifest case needs a unique string 'id'")
    return cases


def _run_entry(args) -> tuple[str, dict | None, str | None]:
    """Worker body: load one case and evaluate it (picklable for process pools)."""
    entry, cfg = args
    cid = entry["id"]
    root = cfg.dataset
    try:
        pred = load_volume(root / entry["pred"])
        gt = load_volume(root / entry["gt"])
        anes = [load_volume(root / a) for a in entry.get("aneurysms", [])]
        if pred.dims != gt.dims or any(a.dims != gt.dims for a in anes):
            raise ValueError("case volumes have different dimensions")
    except (OSError, VesselCFDError, ValueError, KeyError) as exc:
        return cid, None, f"{type(exc).__name__}: {exc}"
    rep = evaluate_case(pred, gt, anes, cfg, cid, entry.get("pred_centers", []),
                        entry.get("solver_overrides"), cfg.output / "cases")
    return cid, _pack(rep), None


def _pack(rep: CaseReport) -> dict:
    d = rep.to_dict()
    d["detection"] = rep.detection
    return d


def _unpack(d: dict) -> CaseReport:
    return CaseReport(d["case_id"], d["stages"], d["vta"], d["mga"], d["bfa"], d["metrics"], d["detection"],
                      d["details"], d.get("timings_ms", {}))


def evaluate_dataset(cfg: RunConfig) -> DatasetReport:
    """Evaluate every manifest case and write per-case JSON, summary.csv and summary.json."""
    entries = read_manifest(cfg.dataset)
    threads = cfg.effective_threads()
    jobs = [(e, cfg) for e in entries]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_run_entry, jobs))
    else:
        results = [_run_entry(j) for j in jobs]
    cases, invalid = [], []
    for cid, packed, err in sorted(results, key=lambda r: r[0]):  # case-id order, whatever the pool did
        if err is not None:
            warnings.warn(f"case {cid} excluded: {err}", stacklevel=2)
            invalid.append({"case_id": cid, "error": err})
            continue
        cases.append(_unpack(packed))
    report = DatasetReport(cases, invalid, cfg.describe())
    write_outputs(report, cfg.output)
    return report


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "item"):
        return o.item()
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so every report is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_outputs(report: DatasetReport, out: Path) -> None:
    out = Path(out)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    for c in report.cases:
        (out / "cases" / f"{c.case_id}.json").write_text(_dump(_clean(c.to_dict())))
    (out / "summary.csv").write_text(report.csv_text())
    (out / "summary.json").write_text(_dump(_clean(report.summary())))
