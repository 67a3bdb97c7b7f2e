"""Min-max families over the slicing and the two-loop extraction.

The one-parameter cycle pairs slicing curves symmetrically about a base
slice (or anchors one side at the shortest slice for the tighter level
bound); the two-parameter cycle rotates the pairing.  Families are flowed
with the family disk flow, the critical nodes are flowed individually to
their limits, and the resulting loops feed the distinctness case analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import curves as cv
from . import diskflow, integrate, tensor
from .curves import DiscreteCurve
from .diskflow import BallCover, image_separation
from .slicing import SlicingFamily
from .surface import Polyline, SurfacePoint, default_step
from .tensor import MetricSpec


@dataclass
class CycleFamily:
    """Discretized cycle of based loops; boundary nodes are point curves."""

    dims: int
    params: np.ndarray            # (N,) for dims=1, (N,2) rows (t,s) for dims=2
    curves: list
    grid_shape: tuple = None      # (nt, ns) for dims=2

    def lengths(self, spec: MetricSpec) -> np.ndarray:
        return np.array([c.length(spec) for c in self.curves])


@dataclass
class MinMaxRun:
    """One min-max run: level trace and the critical loops."""

    level: float
    levels: np.ndarray
    critical: list                # (loop, is_prime, multiplicity, length, residual)
    point_only: bool
    sweeps: int


@dataclass
class MinMaxReport:
    l0: float
    l1: float
    d: float
    loops: list                   # dicts: length, multiplicity, residual
    distinct_pair: tuple = None   # (loop_a, loop_b, separation)
    degenerate_flag: bool = False
    early_exit: bool = False
    bound_8d: bool = False
    bound_14d: bool = False
    entries: list = field(default_factory=list)  # raw loop tuples for export

    def to_json_obj(self) -> dict:
        out = {
            "l0": self.l0, "l1": self.l1, "d": self.d,
            "ratio_l0_d": self.l0 / self.d if self.d else None,
            "ratio_l1_d": self.l1 / self.d if self.d else None,
            "bound_8d": self.bound_8d, "bound_14d": self.bound_14d,
            "degenerate_flag": self.degenerate_flag,
            "early_exit": self.early_exit,
            "loops": self.loops,
        }
        if self.distinct_pair is not None:
            out["pair_separation"] = self.distinct_pair[2]
            out["pair_lengths"] = [self.distinct_pair[0]["length"],
                                   self.distinct_pair[1]["length"]]
        return out


# ----------------------------------------------------------------------------
# cycle construction
# ----------------------------------------------------------------------------

def _pair_loop(spec: MetricSpec, fam: SlicingFamily, fa: float, fb: float,
               h: float) -> DiscreteCurve:
    """Based loop Gamma_fa * -Gamma_fb, resampled at h."""
    a = fam.curve_at_fraction(fa)
    b = fam.curve_at_fraction(fb)
    loop = cv.concatenate(spec, DiscreteCurve(a.line.copy(), closed=False,
                                              based=True),
                          DiscreteCurve(b.line.reversed(), closed=False),
                          based=True)
    loop = DiscreteCurve(diskflow._force_closed(loop.line), closed=True,
                         based=True)
    return cv.resample(spec, loop, h)


def _cap_frames(spec: MetricSpec, fam: SlicingFamily, fa: float, fb: float,
                sigmas, h: float):
    """Shrinking end caps: prefixes of the end pair bridged by a short hop."""
    from .surface import connect_in_ball
    a = fam.curve_at_fraction(fa)
    b = fam.curve_at_fraction(fb)
    ca = cv.arc_positions(spec, a)
    cb = cv.arc_positions(spec, b)
    out = []
    for sg in sigmas:
        if sg <= 1e-9:
            out.append(cv.point_curve(spec, fam.p))
            continue
        head = cv.subcurve(spec, a, 0.0, sg * ca[-1], h)
        tail = cv.subcurve(spec, b, 0.0, sg * cb[-1], h)
        x = head.line.point(len(head.line) - 1)
        y = tail.line.point(len(tail.line) - 1)
        gap = float(np.linalg.norm(x.xyz - y.xyz))
        parts = [head.line]
        if gap > 1e-10:
            bridge = connect_in_ball(spec, x, np.inf, x, y, step=h)
            parts.append(bridge.line)
        parts.append(tail.line.reversed())
        loop = Polyline.concatenate(parts)
        curve = DiscreteCurve(diskflow._force_closed(loop), closed=True,
                              based=True)
        out.append(cv.resample(spec, curve, h))
    return out


def build_cycle_u0(spec: MetricSpec, fam: SlicingFamily, n_nodes: int = 128,
                   eps_param: float = 0.08, h: float = None,
                   variant: str = "symmetric") -> CycleFamily:
    """One-parameter cycle over t in [-1, 1] with point-curve ends.

    variant "symmetric": Gamma_{theta} * -Gamma_{-theta} with theta sweeping a
    half period, so the family covers the sphere once.  variant "anchored":
    one side pinned at the shortest slice, the other sweeping a full period;
    its max length stays below len(shortest) + max slice length.
    """
    if h is None:
        h = default_step(spec)
    t_grid = np.linspace(-1.0, 1.0, n_nodes)
    lengths = [c.length(spec) for c in fam.curves]
    short_idx = int(np.argmin(lengths))
    f_short = short_idx / len(fam.curves)
    curves = []
    n_cap = max(3, int(eps_param * n_nodes / 2))
    for t in t_grid:
        if variant == "symmetric":
            theta = (t + 1.0) / 4.0
            fa, fb = theta, -theta
        else:
            fa = f_short
            fb = f_short + (t + 1.0) / 2.0
        inner = 1.0 - eps_param
        if abs(t) <= inner:
            curves.append(_pair_loop(spec, fam, fa, fb, h))
        else:
            # cap: shrink the end pair toward the point curve
            t_end = inner if t > 0 else -inner
            if variant == "symmetric":
                te = (t_end + 1.0) / 4.0
                fa_e, fb_e = te, -te
            else:
                fa_e, fb_e = f_short, f_short + (t_end + 1.0) / 2.0
            sigma = (1.0 - abs(t)) / eps_param
            curves.append(_cap_frames(spec, fam, fa_e, fb_e, [sigma], h)[0])
    curves[0] = cv.point_curve(spec, fam.p)
    curves[-1] = cv.point_curve(spec, fam.p)
    return CycleFamily(dims=1, params=t_grid, curves=curves)


def build_cycle_u1(spec: MetricSpec, fam: SlicingFamily, nt: int = 64,
                   ns: int = 32, eps_param: float = 0.08,
                   h: float = None) -> CycleFamily:
    """Two-parameter cycle u(t,s) = Gamma_{s/2+theta} * -Gamma_{s/2-theta}.

    Satisfies u(t,0) = reverse(u(-t,1)) exactly by the half-period identity
    of the slicing.
    """
    if h is None:
        h = default_step(spec)
    t_grid = np.linspace(-1.0, 1.0, nt)
    s_grid = np.linspace(0.0, 1.0, ns)
    curves = []
    params = []
    inner = 1.0 - eps_param
    # s-major layout: each contiguous block is a full t-sweep at fixed s,
    # which is the direction that carries the min-max topology
    for sv in s_grid:
        for t in t_grid:
            params.append((t, sv))
            theta = (t + 1.0) / 4.0
            if abs(t) <= inner:
                curves.append(_pair_loop(spec, fam, sv / 2.0 + theta,
                                         sv / 2.0 - theta, h))
            else:
                t_end = inner if t > 0 else -inner
                te = (t_end + 1.0) / 4.0
                sigma = (1.0 - abs(t)) / eps_param
                curves.append(_cap_frames(spec, fam, sv / 2.0 + te,
                                          sv / 2.0 - te, [sigma], h)[0])
    curves_arr = np.array(curves, dtype=object).reshape(ns, nt)
    for j in range(ns):
        curves_arr[j, 0] = cv.point_curve(spec, fam.p)
        curves_arr[j, -1] = cv.point_curve(spec, fam.p)
    return CycleFamily(dims=2, params=np.array(params),
                       curves=list(curves_arr.reshape(-1)),
                       grid_shape=(ns, nt))


def check_symmetry(spec: MetricSpec, cyc: CycleFamily, n_spots: int = 20,
                   seed: int = 0) -> float:
    """Max sup-distance violation of u(t,0) = reverse(u(-t,1))."""
    ns, nt = cyc.grid_shape
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_spots):
        i = int(rng.integers(0, nt))
        a = cyc.curves[0 * nt + i]
        b = cyc.curves[(ns - 1) * nt + (nt - 1 - i)]
        worst = max(worst, cv.sup_distance(spec, a, b.reversed()))
    return worst


# ----------------------------------------------------------------------------
# running the min-max
# ----------------------------------------------------------------------------

def _refine_peak(spec: MetricSpec, cover, row, h: float, n_ins: int = 3):
    """Subdivide the family parameter around the longest member.

    The discrete family slides off the min-max saddle at a rate set by the
    parameter spacing at the peak; inserting interpolants there tracks the
    pass adaptively and keeps the level estimate tight.
    """
    if len(row) < 3:
        return row
    lengths = [c.length(spec) for c in row]
    i = int(np.argmax(lengths))
    out = list(row)
    if i + 1 < len(row):
        out[i + 1:i + 1] = diskflow._bridge_curves(spec, cover, row[i],
                                                   row[i + 1], n_frames=n_ins)
    if i > 0:
        out[i:i] = diskflow._bridge_curves(spec, cover, row[i - 1], row[i],
                                           n_frames=n_ins)
    return out


def _dedupe_family(spec: MetricSpec, state, h: float, cap: int):
    """Drop members sup-close to their predecessor; enforce a size cap."""
    if len(state) <= 2:
        return state
    keep = [state[0]]
    for c in state[1:-1]:
        if cv.sup_distance(spec, keep[-1], c, n_probe=24) > 0.5 * h:
            keep.append(c)
    keep.append(state[-1])
    if len(keep) > cap:
        idx = np.linspace(0, len(keep) - 1, cap).astype(int)
        keep = [keep[i] for i in sorted(set(idx))]
    return keep


def _blend(spec: MetricSpec, cover, a: DiscreteCurve, b: DiscreteCurve,
           w: float) -> DiscreteCurve:
    ca = cv.arc_positions(spec, a)
    cb = cv.arc_positions(spec, b)
    n_pts = max(len(a.line), len(b.line))
    fr = np.linspace(0.0, 1.0, n_pts)
    pa = cv._interpolate_at(spec, a.line, ca, fr * ca[-1])
    pb = cv._interpolate_at(spec, b.line, cb, fr * cb[-1])
    mid = (1 - w) * pa.xyz + w * pb.xyz
    norms = np.linalg.norm(mid, axis=1)
    mid[norms < 1e-9] = pa.xyz[norms < 1e-9]
    chart, uv = tensor.xyz_to_chart(spec, mid)
    from .surface import Polyline as PL
    line = PL(uv, chart, tensor.embed_points(spec, uv, chart))
    line.uv[0] = cover.p.uv
    line.chart[0] = cover.p.chart
    line.xyz[0] = cover.p.xyz
    return DiscreteCurve(diskflow._force_closed(line), closed=True, based=True)


def _flow_depth(spec: MetricSpec, cover, seeds, depth: int):
    """Lengths of the seeds after `depth` sweeps (batched), plus the states."""
    state = list(seeds)
    traj = [[c.length(spec)] for c in state]
    snaps = [[c] for c in state]
    for _ in range(depth):
        state, _ = diskflow.flow_sweep_batch(spec, cover, state,
                                             family_mode=True)
        for i, c in enumerate(state):
            traj[i].append(c.length(spec))
            snaps[i].append(c)
    return traj, snaps


def _best_iterate(traj, snaps):
    """The slowest-decaying long iterate: nearest to the critical set.

    Near-dead curves also decay slowly, so only iterates retaining most of
    the trajectory's peak length compete.
    """
    arr = np.array(traj)
    if len(arr) < 2:
        return snaps[0]
    peak = arr.max()
    rel_drop = np.abs(np.diff(arr)) / np.maximum(arr[:-1], 1e-300)
    eligible = arr[:-1] >= 0.6 * peak
    if not eligible.any():
        return snaps[int(np.argmax(arr))]
    scores = np.where(eligible, rel_drop, np.inf)
    return snaps[int(np.argmin(scores)) + 1]


def run_minmax(spec: MetricSpec, cover: BallCover, family: CycleFamily,
               sweeps: int = 10, tol_stall: float = None,
               tol_level: float = None, refine_rounds: int = 9,
               verbose: bool = False) -> MinMaxRun:
    """Min-max by ridge bisection on the family parameter.

    Every node of a discrete cycle eventually slides off the mountain pass
    under the sequential disk flow, so the pass is located instead as the
    parameter ridge where flow survival is deepest: coarse-flow all nodes,
    then ternary-refine between the bracket neighbours using blended seeds,
    tracking the slowest-decaying iterate.  Those iterates polish into the
    realizing geodesic loops; the reported level is min(initial family max,
    realized loop level), an upper bound for the true min-max value.
    """
    h = cover.h
    scale = spec.length_scale()
    if tol_stall is None:
        tol_stall = 1e-7 * math.pi * scale
    state = list(family.curves)
    init_level = float(max(c.length(spec) for c in state))
    depth = sweeps
    traj, snaps = _flow_depth(spec, cover, state, depth)
    levels = [init_level]

    def score(tr):
        """(survival sweeps, length at the last alive sweep)."""
        arr = np.array(tr)
        alive = arr >= 4 * h
        n_alive = int(alive.sum())
        last_len = float(arr[alive][-1]) if n_alive else 0.0
        return (n_alive, last_len)

    scores = [score(t) for t in traj]
    order = sorted(range(len(scores)), key=lambda i: scores[i], reverse=True)
    ridge_seeds = [int(i) for i in order[:3]]

    critical = []
    seen = []
    primary_level = None
    drift_tol = 0.35 * scale
    for i0 in ridge_seeds[:3]:
        got = None
        best_curve = _best_iterate(traj[i0], snaps[i0])
        loop, length, residual, angle = diskflow.polish_loop(
            spec, cover.p, best_curve, h, drift_tol=drift_tol)
        if residual < 1e-5 * scale and length > 4 * h:
            got = (loop, length, residual)
        if got is None:
            # bisect toward the pass until an iterate polishes
            a = family.curves[max(i0 - 1, 0)]
            b = family.curves[min(i0 + 1, len(family.curves) - 1)]
            lo, hi = 0.0, 1.0
            best_score = scores[i0]
            cur_depth = depth
            for _ in range(refine_rounds):
                w1 = lo + (hi - lo) / 3.0
                w2 = hi - (hi - lo) / 3.0
                s1 = _blend(spec, cover, a, b, w1)
                s2 = _blend(spec, cover, a, b, w2)
                tr, sn = _flow_depth(spec, cover, [s1, s2], cur_depth)
                sc1, sc2 = score(tr[0]), score(tr[1])
                if sc1 >= sc2:
                    hi = w2
                    cand_traj, cand_snaps, cand_score = tr[0], sn[0], sc1
                else:
                    lo = w1
                    cand_traj, cand_snaps, cand_score = tr[1], sn[1], sc2
                if verbose:
                    print(f"  ridge {i0}: bracket ({lo:.4f},{hi:.4f}) "
                          f"scores {sc1} {sc2} depth {cur_depth}")
                cand = _best_iterate(cand_traj, cand_snaps)
                loop, length, residual, angle = diskflow.polish_loop(
                    spec, cover.p, cand, h, drift_tol=drift_tol)
                if residual < 1e-5 * scale and length > 4 * h:
                    got = (loop, length, residual)
                    break
                if max(sc1[0], sc2[0]) >= cur_depth + 1:
                    cur_depth += 4   # both ends survive: look deeper
        if got is not None:
            loop, length, residual = got
            if primary_level is None:
                primary_level = float(length)
            if not any(image_separation(loop, s) < 4.0 * h for s in seen):
                seen.append(loop)
                critical.append((loop, True, 1, length, residual))

    point_only = len(critical) == 0
    level = float(min(init_level, primary_level)) if primary_level is not None \
        else float(init_level)
    levels.append(level)
    return MinMaxRun(level=level, levels=np.array(levels), critical=critical,
                     point_only=point_only, sweeps=depth)


# ----------------------------------------------------------------------------
# two-loop extraction
# ----------------------------------------------------------------------------

def _loop_record(entry) -> dict:
    loop, prime, mult, length, residual = entry
    return {"length": float(length), "multiplicity": int(mult),
            "residual": float(residual), "prime": bool(prime)}


def extract_two_loops(spec: MetricSpec, run0: MinMaxRun, run1: MinMaxRun,
                      d: float, h: float = None,
                      early_loops: list = None) -> MinMaxReport:
    """Case analysis for two distinct simple geodesic loops.

    Distinctness is image Hausdorff separation above 10h, orientation blind.
    When every critical loop shares one image at one level, the degenerate
    (infinite family) flag is set and the single loop reported honestly.
    """
    if h is None:
        h = default_step(spec)
    if early_loops:
        loops = sorted(early_loops, key=lambda e: e[3])
        report = MinMaxReport(
            l0=float(loops[0][3]), l1=float(loops[-1][3]), d=d,
            loops=[_loop_record(e) for e in loops], early_exit=True,
            entries=loops)
        pair = _find_distinct_pair(loops, h)
        report.distinct_pair = pair
        report.bound_8d = report.l0 <= 8 * d * 1.05
        report.bound_14d = report.l1 <= 14 * d * 1.05
        return report

    l0 = run0.level
    l1 = run1.level
    all_loops = list(run0.critical) + list(run1.critical)
    all_loops.sort(key=lambda e: e[3])
    report = MinMaxReport(l0=float(l0), l1=float(l1), d=d,
                          loops=[_loop_record(e) for e in all_loops],
                          entries=all_loops)
    report.bound_8d = l0 <= 8 * d * 1.05
    report.bound_14d = l1 <= 14 * d * 1.05
    pair = _find_distinct_pair(all_loops, h)
    if pair is not None:
        report.distinct_pair = pair
    else:
        report.degenerate_flag = True
    return report


def _find_distinct_pair(loops, h: float):
    """Shortest pair of loops with image separation beyond 10h."""
    best = None
    for i in range(len(loops)):
        for j in range(i + 1, len(loops)):
            sep = image_separation(loops[i][0], loops[j][0])
            if sep > 10.0 * h:
                cand = (_loop_record(loops[i]), _loop_record(loops[j]),
                        float(sep))
                if best is None or \
                        cand[0]["length"] + cand[1]["length"] < \
                        best[0]["length"] + best[1]["length"]:
                    best = cand
    return best
