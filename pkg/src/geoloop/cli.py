"""Experiment driver: config ingestion, pipeline orchestration, artifacts.

Pipeline: diameter -> cover -> cut locus -> Berger point and taus -> digon
contractions -> slicing -> min-max over the two cycle families -> two-loop
report.  Every stage's outputs and timings land in the run manifest; loops,
slicing, cut locus and level traces are emitted as CSV/JSON artifacts.

Exit codes: 0 success, 2 degenerate (infinite-family) flag, 3 resolution
warning, 1 hard error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as pkg_version
from . import curves as cv
from . import cutlocus, diskflow, minmax, slicing, surface, tensor
from .curves import DiscreteCurve
from .errors import ConfigError, GeoloopError
from .surface import SurfacePoint
from .tensor import MetricSpec

_ALLOWED_TOP = {"version", "metric", "base_point", "tolerances", "seed"}
_ALLOWED_TOL = {"h_frac", "tol_stall", "slack", "fan_size", "n_samples",
                "u0_nodes", "u1_t", "u1_s", "slicing_slices", "minmax_depth"}


@dataclass
class ExperimentConfig:
    """Validated run configuration; unknown keys are rejected."""

    metric: MetricSpec
    base_point: object            # "pole" or [chart, u, v]
    seed: int = 0
    h_frac: float = 512.0         # h = diameter / h_frac
    tol_stall: float = None
    slack: float = 0.05
    fan_size: int = 512
    n_samples: int = 64
    u0_nodes: int = 96
    u1_t: int = 48
    u1_s: int = 12
    slicing_slices: int = 128
    minmax_depth: int = 8
    raw: dict = field(default_factory=dict)

    @staticmethod
    def from_json_obj(obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(obj) - _ALLOWED_TOP
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if obj.get("version") != 1:
            raise ConfigError("config version must be 1")
        if "metric" not in obj or "base_point" not in obj:
            raise ConfigError("config needs 'metric' and 'base_point'")
        try:
            metric = MetricSpec.from_config(obj["metric"])
        except (KeyError, TypeError, ValueError) as ex:
            raise ConfigError(f"bad metric: {ex}") from ex
        tol = obj.get("tolerances", {})
        unknown = set(tol) - _ALLOWED_TOL
        if unknown:
            raise ConfigError(f"unknown tolerance keys: {sorted(unknown)}")
        for key, val in tol.items():
            if not (isinstance(val, (int, float)) and val > 0):
                raise ConfigError(f"tolerance {key} must be positive")
        cfg = ExperimentConfig(metric=metric, base_point=obj["base_point"],
                               seed=int(obj.get("seed", 0)), raw=obj)
        for key in _ALLOWED_TOL:
            if key in tol:
                setattr(cfg, key, type(getattr(cfg, key) or 0.0)(tol[key])
                        if getattr(cfg, key) is not None else float(tol[key]))
        return cfg

    def resolve_base_point(self) -> SurfacePoint:
        if self.base_point == "pole":
            return SurfacePoint.pole(self.metric, "north")
        try:
            chart, u, v = self.base_point
            return SurfacePoint.make(self.metric, int(chart), (float(u), float(v)))
        except (TypeError, ValueError) as ex:
            raise ConfigError(f"bad base_point: {ex}") from ex


def _json_dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1, default=_json_default)
        f.write("\n")


def _json_default(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _export_loop(out_dir, name, curve: DiscreteCurve):
    with open(os.path.join(out_dir, name + ".csv"), "w") as f:
        f.write(cv.curve_to_csv(curve))
    _json_dump(cv.curve_to_json_obj(curve), os.path.join(out_dir, name + ".json"))


def run_pipeline(config: ExperimentConfig, out_dir: str, verbose: bool = False,
                 threads: int = None) -> dict:
    """Execute the full experiment; returns the manifest dict.

    The manifest is also written to <out_dir>/manifest.json together with the
    loop polylines, slicing export, cut locus export and level traces.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = config.metric
    manifest = {
        "config": config.raw,
        "versions": {"geoloop": pkg_version, "numpy": np.__version__},
        "timings": {},
        "warnings": [],
        "stage": None,
        "exit_code": 0,
    }

    def log(msg):
        if verbose:
            print(msg, flush=True)

    def stage(name):
        manifest["stage"] = name
        log(f"[{name}]")
        return time.time()

    try:
        t0 = stage("diameter")
        d = surface.estimate_diameter(spec, n_samples=config.n_samples)
        manifest["timings"]["diameter"] = round(time.time() - t0, 3)
        manifest["d"] = d
        h = d / config.h_frac
        manifest["h"] = h
        p = config.resolve_base_point()
        log(f"  d = {d:.6f}, h = {h:.6f}")

        t0 = stage("cover")
        cover = diskflow.build_cover(spec, p, h=h)
        manifest["timings"]["cover"] = round(time.time() - t0, 3)
        manifest["n_balls"] = len(cover.balls)

        t0 = stage("cutlocus")
        tree = cutlocus.build_cut_locus(spec, p, fan_size=config.fan_size, h=h)
        manifest["timings"]["cutlocus"] = round(time.time() - t0, 3)
        manifest["cutlocus"] = {
            "single_point": tree.is_single_point,
            "infinite_family": tree.infinite_family,
            "n_vertices": len(tree.vertices),
            "n_edges": len(tree.edges),
        }
        _json_dump(_tree_json(tree), os.path.join(out_dir, "cutlocus.json"))

        t0 = stage("berger")
        q, berger_ok = slicing.find_berger_point(spec, p, fan=tree.fan,
                                                 tree=tree)
        if not berger_ok:
            manifest["warnings"].append("berger direction check failed")
        taus = slicing.select_tau_geodesics(spec, p, q, tree, h=h)
        segs, angles, degenerate = taus
        manifest["timings"]["berger"] = round(time.time() - t0, 3)
        manifest["q"] = [float(x) for x in q.xyz]
        manifest["n_taus"] = len(segs)
        manifest["degenerate_Berger"] = bool(degenerate)

        early_loops = []
        if not degenerate:
            t0 = stage("digons")
            digons = slicing.make_digons(spec, p, q, segs, angles)
            contr = {}
            for k, dig in enumerate(digons):
                got = slicing.contract_digon(spec, cover, tree, dig, d=d, h=h)
                if isinstance(got, slicing.LoopsFound):
                    early_loops.extend(got.loops)
                else:
                    contr[("digon", k)] = got
            manifest["timings"]["digons"] = round(time.time() - t0, 3)
            manifest["digon_loops_found"] = len(early_loops)

        distinct_early = []
        if early_loops:
            seen = []
            for entry in sorted(early_loops, key=lambda e: e[3]):
                if all(diskflow.image_separation(entry[0], s) > 10 * h
                       for s in seen):
                    seen.append(entry[0])
                    distinct_early.append(entry)
        if len(distinct_early) >= 2:
            report = minmax.extract_two_loops(spec, None, None, d, h=h,
                                              early_loops=distinct_early)
            manifest["early_exit"] = True
        else:
            t0 = stage("slicing")
            fam = slicing.build_slicing(spec, cover, tree, p, q, taus,
                                        n_slices=config.slicing_slices,
                                        h=h, d=d)
            manifest["timings"]["slicing"] = round(time.time() - t0, 3)
            manifest["slicing"] = {
                "n_curves": len(fam.curves),
                "max_length": fam.max_length,
                "degree": fam.degree,
                "degenerate": fam.degenerate,
            }
            _export_slicing(out_dir, spec, fam)

            t0 = stage("minmax_u0")
            u0 = minmax.build_cycle_u0(spec, fam, n_nodes=config.u0_nodes,
                                       h=h, variant="anchored")
            run0 = minmax.run_minmax(spec, cover, u0,
                                     sweeps=config.minmax_depth,
                                     tol_stall=config.tol_stall)
            manifest["timings"]["minmax_u0"] = round(time.time() - t0, 3)
            manifest["l0_levels"] = [float(x) for x in run0.levels]

            t0 = stage("minmax_u1")
            u1 = minmax.build_cycle_u1(spec, fam, nt=config.u1_t,
                                       ns=config.u1_s, h=h)
            run1 = minmax.run_minmax(spec, cover, u1,
                                     sweeps=config.minmax_depth,
                                     tol_stall=config.tol_stall)
            manifest["timings"]["minmax_u1"] = round(time.time() - t0, 3)
            manifest["l1_levels"] = [float(x) for x in run1.levels]
            with open(os.path.join(out_dir, "levels.jsonl"), "w") as f:
                for tag, run in (("u0", run0), ("u1", run1)):
                    for k, lv in enumerate(run.levels):
                        f.write(json.dumps({"family": tag, "sweep": k,
                                            "level": float(lv)}) + "\n")

            t0 = stage("extract")
            report = minmax.extract_two_loops(spec, run0, run1, d, h=h)
            if run0.point_only or run1.point_only:
                manifest["warnings"].append(
                    "a min-max run produced no realizing loops")
            manifest["timings"]["extract"] = round(time.time() - t0, 3)

        manifest["l0"] = report.l0
        manifest["l1"] = max(report.l1, report.l0)
        manifest["ratio_l0_d"] = manifest["l0"] / d
        manifest["ratio_l1_d"] = manifest["l1"] / d
        manifest["bounds"] = {
            "l0_le_8d": manifest["l0"] <= 8 * d * (1 + config.slack),
            "l1_le_14d": manifest["l1"] <= 14 * d * (1 + config.slack),
        }
        manifest["degenerate_flag"] = bool(report.degenerate_flag or
                                           (not report.early_exit and
                                            manifest.get("degenerate_Berger")))
        manifest["report"] = report.to_json_obj()

        loop_files = []
        all_loops = []
        if report.distinct_pair is not None:
            pair = report.distinct_pair
            manifest["pair_separation"] = pair[2]
        for k, entry in enumerate(_report_loop_entries(report)):
            name = f"loop_{k}"
            _export_loop(out_dir, name, entry[0])
            loop_files.append(name + ".csv")
            all_loops.append({"file": name + ".csv", "length": entry[3],
                              "residual": entry[4], "multiplicity": entry[2]})
        manifest["loops"] = all_loops
        manifest["stage"] = "done"
        if manifest["degenerate_flag"]:
            manifest["exit_code"] = 2
        if run0_point_only_warn(manifest):
            manifest["exit_code"] = 3
    except GeoloopError as ex:
        manifest["error"] = f"{type(ex).__name__}: {ex}"
        manifest["exit_code"] = 1
    except ValueError as ex:
        manifest["error"] = f"ValueError: {ex}"
        manifest["exit_code"] = 1

    _json_dump(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def run0_point_only_warn(manifest) -> bool:
    return any("no realizing loops" in w for w in manifest.get("warnings", []))


def _report_loop_entries(report):
    """Loop entries backing the report, shortest first (up to six)."""
    return list(report.entries)[:6]


def _tree_json(tree) -> dict:
    return {
        "single_point": tree.is_single_point,
        "infinite_family": tree.infinite_family,
        "fan_size": tree.fan_size,
        "vertices": [
            {"xyz": [float(x) for x in v.position.xyz], "degree": v.degree,
             "conjugate": v.conjugate,
             "minimizer_lengths": [float(m.arc_length) for m in v.minimizers]}
            for v in tree.vertices
        ],
        "edges": [
            {"v0": e.v0, "v1": e.v1,
             "polyline": [[float(x) for x in row] for row in e.line.xyz]}
            for e in tree.edges
        ],
    }


def _export_slicing(out_dir, spec, fam):
    obj = {
        "degenerate": fam.degenerate,
        "max_length": fam.max_length,
        "degree": fam.degree,
        "t": [float(x) for x in fam.t],
        "curves": [cv.curve_to_json_obj(c) for c in fam.curves],
    }
    _json_dump(obj, os.path.join(out_dir, "slicing.json"))
    with open(os.path.join(out_dir, "slicing.csv"), "w") as f:
        f.write("curve,t,chart,u,v,x,y,z\n")
        for i, c in enumerate(fam.curves):
            for k in range(len(c.line)):
                f.write(f"{i},{fam.t[i]:.12g},{int(c.line.chart[k])},"
                        f"{c.line.uv[k, 0]:.12g},{c.line.uv[k, 1]:.12g},"
                        f"{c.line.xyz[k, 0]:.12g},{c.line.xyz[k, 1]:.12g},"
                        f"{c.line.xyz[k, 2]:.12g}\n")


# ----------------------------------------------------------------------------
# verification of emitted artifacts
# ----------------------------------------------------------------------------

def verify_manifest(manifest_path: str) -> dict:
    """Recompute lengths, residuals and bound ratios from the artifacts."""
    out = {"pass": True, "checks": []}

    def check(name, ok, detail=""):
        out["checks"].append({"name": name, "ok": bool(ok), "detail": detail})
        if not ok:
            out["pass"] = False

    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as ex:
        check("manifest readable", False, str(ex))
        return out
    base = os.path.dirname(os.path.abspath(manifest_path))
    if manifest.get("exit_code", 1) == 1:
        check("pipeline completed", False, manifest.get("error", ""))
        return out
    spec = MetricSpec.from_config(manifest["config"]["metric"])
    d = manifest["d"]
    h = manifest["h"]
    cfg_slack = manifest["config"].get("tolerances", {}).get("slack", 0.05)
    p = ExperimentConfig(metric=spec,
                         base_point=manifest["config"]["base_point"],
                         raw=manifest["config"]).resolve_base_point()
    for entry in manifest.get("loops", []):
        path = os.path.join(base, entry["file"])
        if not os.path.exists(path):
            check(f"loop file {entry['file']}", False, "missing")
            continue
        with open(path) as f:
            curve = cv.curve_from_csv(f.read(), closed=True, based=True)
        length = curve.length(spec)
        check(f"{entry['file']} length", abs(length - entry["length"]) < 1e-6 * max(1, d),
              f"recomputed {length:.9f} vs {entry['length']:.9f}")
        loop, plen, res, ang = diskflow.polish_loop(spec, p, curve, h,
                                                    drift_tol=10 * h)
        check(f"{entry['file']} residual", res < 1e-6 * spec.length_scale() * 2,
              f"residual {res:.2e}")
        check(f"{entry['file']} within 14d",
              length <= 14 * d * (1 + cfg_slack), f"{length:.4f}")
    if "l0" in manifest:
        check("ratio l0", abs(manifest["ratio_l0_d"] - manifest["l0"] / d) < 1e-12)
        check("l0 bound", manifest["l0"] <= 8 * d * (1 + cfg_slack),
              f"l0={manifest['l0']:.4f} vs {8 * d * (1 + cfg_slack):.4f}")
        check("l1 bound", manifest["l1"] <= 14 * d * (1 + cfg_slack),
              f"l1={manifest['l1']:.4f}")
    return out


# ----------------------------------------------------------------------------
# argparse front end
# ----------------------------------------------------------------------------

def _load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as ex:
        raise ConfigError(f"cannot read config: {ex}") from ex
    return ExperimentConfig.from_json_obj(obj)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="geoloop",
        description="Two short simple geodesic loops on Riemannian 2-spheres")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("GEOLOOP_THREADS", "0")) or None,
                        help="cap worker threads (vectorized kernels)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--verbose", action="store_true")

    p_ver = sub.add_parser("verify", help="verify an emitted manifest")
    p_ver.add_argument("--manifest", required=True)

    p_cut = sub.add_parser("cutlocus", help="standalone cut locus export")
    p_cut.add_argument("--config", required=True)
    p_cut.add_argument("--out", required=True)

    p_flow = sub.add_parser("flow", help="flow a seed curve from CSV")
    p_flow.add_argument("--config", required=True)
    p_flow.add_argument("--seed-curve", required=True)
    p_flow.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))

    try:
        if args.cmd == "run":
            config = _load_config(args.config)
            if args.seed is not None:
                config.seed = args.seed
            manifest = run_pipeline(config, args.out, verbose=args.verbose)
            print(json.dumps({k: manifest.get(k) for k in
                              ("d", "l0", "l1", "ratio_l0_d", "ratio_l1_d",
                               "exit_code", "error")}, indent=1,
                             default=_json_default))
            return int(manifest["exit_code"])
        if args.cmd == "verify":
            result = verify_manifest(args.manifest)
            for c in result["checks"]:
                print(("PASS " if c["ok"] else "FAIL ") + c["name"] +
                      ("  " + c["detail"] if c["detail"] else ""))
            return 0 if result["pass"] else 1
        if args.cmd == "cutlocus":
            config = _load_config(args.config)
            os.makedirs(args.out, exist_ok=True)
            spec = config.metric
            p = config.resolve_base_point()
            d = surface.estimate_diameter(spec, n_samples=config.n_samples)
            tree = cutlocus.build_cut_locus(spec, p, fan_size=config.fan_size,
                                            h=d / config.h_frac)
            _json_dump(_tree_json(tree), os.path.join(args.out, "cutlocus.json"))
            print(f"vertices={len(tree.vertices)} edges={len(tree.edges)}")
            return 0
        if args.cmd == "flow":
            config = _load_config(args.config)
            os.makedirs(args.out, exist_ok=True)
            spec = config.metric
            p = config.resolve_base_point()
            with open(args.seed_curve) as f:
                seed = cv.curve_from_csv(f.read(), closed=True, based=True)
            d = surface.estimate_diameter(spec, n_samples=config.n_samples)
            cover = diskflow.build_cover(spec, p, h=d / config.h_frac)
            result = diskflow.flow_to_limit(spec, cover, seed,
                                            tol_stall=config.tol_stall)
            with open(os.path.join(args.out, "flow.jsonl"), "w") as f:
                for k, ln in enumerate(result.lengths):
                    f.write(json.dumps({"sweep": k, "length": float(ln)}) + "\n")
            _export_loop(args.out, "flow_limit",
                         result.limit if result.limit else result.iterates[-1])
            print(f"classification={result.classification} "
                  f"sweeps={result.sweeps}")
            return 0
    except ConfigError as ex:
        print(f"config error: {ex}", file=sys.stderr)
        return 1
    except GeoloopError as ex:
        print(f"error: {type(ex).__name__}: {ex}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
