"""The modified disk flow: ball cover, arc replacement with the ray rule,
iteration to a limit, loop decomposition, and the family extension.

One sweep visits every ball once, B1 (centered at the base point p) first.
Inside B1 the arc through p is replaced by the two rays to its boundary
points; any other arc is replaced by a minimizing geodesic when the boundary
arc it subtends at p is at most pi, and by a ray pair through p otherwise.
Arcs in the remaining balls always get the minimizing geodesic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import curves as cv
from . import fanfield, integrate, tensor
from .curves import DiscreteCurve, point_curve
from .errors import (BvpFailureError, ClassificationInconsistencyError,
                     CoverFailureError, FamilyContinuityError)
from .surface import Polyline, SurfacePoint, TangentVector, default_step
from .tensor import MetricSpec

ANGLE_TOL = 1e-3        # rad; "vertex" detection threshold for flow limits
TURN_SKIP = 2e-4        # rad; arcs with smaller max turning are left alone


# ----------------------------------------------------------------------------
# cover
# ----------------------------------------------------------------------------

@dataclass
class Ball:
    """Metric ball with a quadratic normal-coordinate distance model.

    Membership uses dhat(x) = |delta + Gamma_c(delta,delta)/2|_{g_c}, accurate
    to a percent or two at the radii we use; every consumer of ball geometry
    uses the same predicate, so the flow is self-consistent.
    """

    center: SurfacePoint
    radius: float
    g_c: np.ndarray
    gamma_c: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    chord_cap: float

    def local_coords(self, uv: np.ndarray, chart: np.ndarray):
        """Corrected normal coordinates, distances and frame angles."""
        uv = np.atleast_2d(uv)
        chart = np.atleast_1d(chart)
        loc = uv.copy()
        differ = chart != self.center.chart
        if np.any(differ):
            loc[differ] = tensor.transition_uv(uv[differ])
        delta = loc - self.center.uv[None, :]
        corr = 0.5 * np.einsum("cab,na,nb->nc", self.gamma_c, delta, delta)
        v = delta + corr
        d_hat = np.sqrt(np.einsum("ab,na,nb->n", self.g_c, v, v))
        a = np.einsum("ab,na,b->n", self.g_c, v, self.e1)
        b = np.einsum("ab,na,b->n", self.g_c, v, self.e2)
        return d_hat, np.arctan2(b, a)

    def d_hat(self, line: Polyline) -> np.ndarray:
        """Membership distances with an ambient chord prefilter."""
        out = np.full(len(line), np.inf)
        close = np.linalg.norm(line.xyz - self.center.xyz[None, :], axis=1) < self.chord_cap
        if np.any(close):
            out[close] = self.local_coords(line.uv[close], line.chart[close])[0]
        return out


@dataclass
class BallCover:
    """Totally normal cover; ball 0 is B1 at p, no other ball contains p."""

    spec: MetricSpec
    p: SurfacePoint
    balls: list
    h: float

    @property
    def b1(self) -> Ball:
        return self.balls[0]


def _make_ball(spec: MetricSpec, center: SurfacePoint, radius: float) -> Ball:
    g, gamma = tensor.metric_at(spec, center)
    e1, e2, _, _ = integrate.frame_basis(spec, center.uv[None, :],
                                         np.array([center.chart]))
    probe = integrate.fan_shoot(spec, center.uv, center.chart,
                                np.linspace(0, 2 * math.pi, 16, endpoint=False),
                                np.full(16, radius), 12, record=False)
    chord = np.linalg.norm(probe.final_xyz(spec) - center.xyz[None, :], axis=1).max()
    return Ball(center=center, radius=float(radius), g_c=g, gamma_c=gamma,
                e1=e1[0], e2=e2[0], chord_cap=float(1.25 * chord))


def _quick_normal_radius(spec: MetricSpec, uv, chart, cap: float) -> float:
    fan = fanfield.cut_time_fan(spec, uv, chart, n_rays=48,
                                t_max=cap, strict=False,
                                merge_tol=0.02 * spec.length_scale(),
                                substep=0.01 * spec.length_scale())
    return 0.45 * float(fan.t_cut.min())


def build_cover(spec: MetricSpec, p: SurfacePoint, h: float = None,
                n_check: int = 4096, max_balls: int = 220) -> BallCover:
    """Greedy farthest-point cover whose half-radius balls already cover.

    Ball radii are conservative fractions of per-center first cut times, so
    each ball is totally normal with margin; radii near p shrink so that no
    ball but B1 contains p.
    """
    scale = spec.length_scale()
    if h is None:
        h = default_step(spec)
    cap = 0.75 * fanfield.length_cap(spec)
    # radii stay small enough that the quadratic membership model is accurate
    # (percent level) and one curve cannot thread a ball twice undetected
    r_cap = 0.28 * fanfield.length_cap(spec)
    r1 = min(_quick_normal_radius(spec, p.uv, p.chart, cap), r_cap)
    balls = [_make_ball(spec, p, r1)]

    n_dirs = tensor._fibonacci_sphere(n_check)
    chk_chart = tensor.preferred_chart(n_dirs)
    chk_uv = tensor.sphere_to_chart(n_dirs, chk_chart)
    check = Polyline(chk_uv, chk_chart, tensor.embed_points(spec, chk_uv, chk_chart))

    covered = balls[0].d_hat(check) < 0.5 * r1
    order_key = np.linalg.norm(check.xyz - p.xyz[None, :], axis=1)
    while not covered.all():
        if len(balls) >= max_balls:
            raise CoverFailureError(
                f"half-radius cover incomplete after {max_balls} balls; "
                "increase the check resolution or ball budget")
        rest = np.where(~covered)[0]
        pick = rest[int(np.argmax(order_key[rest]))]
        c = check.point(pick)
        r = min(_quick_normal_radius(spec, c.uv, c.chart, cap), r_cap)
        # keep p exclusive to B1
        d_to_p, _ = None, None
        dp = _make_ball(spec, c, r).local_coords(p.uv[None, :],
                                                 np.array([p.chart]))[0][0]
        r = min(r, 0.9 * dp)
        if r < 0.02 * scale:
            covered[pick] = True  # pathological candidate, skip it
            continue
        ball = _make_ball(spec, c, r)
        balls.append(ball)
        covered |= ball.d_hat(check) < 0.5 * r
    return BallCover(spec=spec, p=p, balls=balls, h=float(h))


def check_cover(cover: BallCover, n_check: int = 4096) -> dict:
    """Invariant audit: full and half-radius coverage, p exclusivity."""
    spec = cover.spec
    n_dirs = tensor._fibonacci_sphere(n_check)
    chart = tensor.preferred_chart(n_dirs)
    uv = tensor.sphere_to_chart(n_dirs, chart)
    check = Polyline(uv, chart, tensor.embed_points(spec, uv, chart))
    full = np.zeros(n_check, dtype=bool)
    half = np.zeros(n_check, dtype=bool)
    p_in = []
    for i, ball in enumerate(cover.balls):
        d = ball.d_hat(check)
        full |= d < ball.radius
        half |= d < 0.5 * ball.radius
        dp = ball.local_coords(cover.p.uv[None, :], np.array([cover.p.chart]))[0][0]
        if dp < ball.radius:
            p_in.append(i)
    return {
        "full_cover": bool(full.all()),
        "half_cover": bool(half.all()),
        "p_only_in_b1": p_in == [0],
        "n_balls": len(cover.balls),
    }


# ----------------------------------------------------------------------------
# arcs
# ----------------------------------------------------------------------------

@dataclass
class Arc:
    """One run of curve nodes inside a ball, with refined boundary points."""

    first: int                 # first inside node (cyclic index)
    last: int                  # last inside node (cyclic)
    entry_uv: np.ndarray = None
    entry_chart: int = 0
    exit_uv: np.ndarray = None
    exit_chart: int = 0
    interior: bool = False     # whole curve inside the ball
    tangent: bool = False
    is_base: bool = False
    entry_angle: float = 0.0   # frame angle at the ball center
    exit_angle: float = 0.0
    depth: float = 0.0         # max penetration past the boundary


def _refine_crossings(ball, uv_out: np.ndarray, uv_in: np.ndarray,
                      charts: np.ndarray, n_bisect: int = 14) -> np.ndarray:
    """Batched bisection for boundary points on chart chords (out -> in)."""
    lo = np.zeros(len(uv_out))
    hi = np.ones(len(uv_out))
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        uv_m = uv_out + mid[:, None] * (uv_in - uv_out)
        d, _ = ball.local_coords(uv_m, charts)
        inside = d < ball.radius
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    w = 0.5 * (lo + hi)
    return uv_out + w[:, None] * (uv_in - uv_out)


def split_arcs(spec: MetricSpec, curve: DiscreteCurve, ball: Ball,
               tol_tangent: float, base_is_here: bool = False):
    """Partition curve ∩ ball into boundary-to-boundary arcs.

    Returns (arcs, base_arc_index, d_hat).  Interior-only curves yield a
    single interior-flagged arc.  Arcs that graze the boundary shallower than
    tol_tangent are flagged tangent and left alone by single-curve flow.
    """
    line = curve.line
    n = len(line) - 1  # distinct nodes (closed curve repeats the first)
    d = ball.d_hat(line)[:n]
    inside = d < ball.radius
    if not inside.any():
        return [], None, d
    if inside.all():
        arc = Arc(first=0, last=n - 1, interior=True, is_base=base_is_here)
        return [arc], (0 if base_is_here else None), d

    arcs = []
    base_idx = None
    # cyclic runs of inside nodes: starts where inside & !inside[prev]
    prev = np.roll(inside, 1)
    starts = np.where(inside & ~prev)[0]
    runs = []
    for run0 in starts:
        k = int(run0)
        run_len = 1
        while inside[(k + 1) % n] and run_len < n:
            k += 1
            run_len += 1
        runs.append((int(run0), run_len))
    # any run longer than a ball crossing is two passes merged by model fuzz;
    # split it at its shallowest node
    xyz = line.xyz
    guard = 2.4 * ball.radius
    k_guard = 0
    while k_guard < len(runs):
        run0, run_len = runs[k_guard]
        idxs = [(run0 + t) % n for t in range(run_len)]
        chord = float(np.linalg.norm(np.diff(xyz[idxs], axis=0), axis=1).sum())
        if chord > guard and run_len >= 6:
            split_at = int(np.argmax(d[idxs][2:-2])) + 2
            runs[k_guard] = (run0, split_at - 1)
            runs.insert(k_guard + 1, ((run0 + split_at + 1) % n,
                                      run_len - split_at - 1))
        else:
            k_guard += 1
    for run0, run_len in runs:
        if run_len < 1:
            continue
        arcs.append(Arc(first=int(run0), last=int((run0 + run_len - 1) % n)))

    def node(i):
        return line.uv[i % n], int(line.chart[i % n])

    uv_in_all, uv_out_all, ch_all = [], [], []
    for arc in arcs:
        for inner_i, outer_i in ((arc.first, (arc.first - 1) % n),
                                 (arc.last, (arc.last + 1) % n)):
            uv_in, ch_in = node(inner_i)
            uv_out, ch_out = node(outer_i)
            if ch_out != ch_in:
                uv_out = tensor.transition_uv(uv_out[None, :])[0]
            uv_in_all.append(uv_in)
            uv_out_all.append(uv_out)
            ch_all.append(ch_in)
    ch_all = np.array(ch_all)
    bd = _refine_crossings(ball, np.stack(uv_out_all), np.stack(uv_in_all), ch_all)
    _, ang = ball.local_coords(bd, ch_all)
    for k, arc in enumerate(arcs):
        arc.entry_uv, arc.entry_chart = bd[2 * k], int(ch_all[2 * k])
        arc.exit_uv, arc.exit_chart = bd[2 * k + 1], int(ch_all[2 * k + 1])
        arc.entry_angle, arc.exit_angle = float(ang[2 * k]), float(ang[2 * k + 1])
        idxs = [(arc.first + t) % n for t in range(_arc_len(arc, n))]
        arc.depth = float((ball.radius - d[idxs]).max())
        arc.tangent = arc.depth < tol_tangent
        if base_is_here and _contains_node(arc, n, 0):
            arc.is_base = True
            base_idx = arcs.index(arc)
    return arcs, base_idx, d


def _arc_len(arc: Arc, n: int) -> int:
    return (arc.last - arc.first) % n + 1


def _contains_node(arc: Arc, n: int, node: int) -> bool:
    span = _arc_len(arc, n)
    return (node - arc.first) % n < span


def ray_decision(arc: Arc, base_arc: Arc, tie_tol: float = 1e-9) -> str:
    """Angle criterion in B1: geodesic iff the far boundary arc subtends <= pi.

    The boundary arc "between" the arc's endpoints that avoids the base arc's
    endpoints subtends theta at the center; ties at pi go to the geodesic
    (the ray pair at angle pi is itself minimizing).
    """
    if base_arc is None or base_arc.interior:
        raise ValueError("ray_decision requires a boundary-to-boundary base arc")
    two_pi = 2.0 * math.pi
    a, b = arc.entry_angle % two_pi, arc.exit_angle % two_pi
    base_pts = (base_arc.entry_angle % two_pi, base_arc.exit_angle % two_pi)

    width_ab = (b - a) % two_pi

    def in_arc(x, lo, width):
        return (x - lo) % two_pi < width

    base_in_ab = any(in_arc(x, a, width_ab) for x in base_pts)
    # the far arc B' is the side not containing the base endpoints
    theta = (two_pi - width_ab) if base_in_ab else width_ab
    return "geodesic" if theta <= math.pi + tie_tol else "rays"


# ----------------------------------------------------------------------------
# one sweep over a batch of curves
# ----------------------------------------------------------------------------

def _arc_turning_defect(spec: MetricSpec, line: Polyline, idxs: np.ndarray) -> float:
    """Max tangential (geodesic) turning angle along the node subset.

    The normal component of the chord turn is discretization of the surface's
    normal curvature, not a corner, so it is projected out.
    """
    if len(idxs) < 3:
        return 0.0
    x = line.xyz[idxs]
    v1 = x[1:-1] - x[:-2]
    v2 = x[2:] - x[1:-1]
    _, jac = tensor.emb_jacobian(spec, line.uv[idxs[1:-1]], line.chart[idxs[1:-1]])
    nrm = np.cross(jac[:, :, 0], jac[:, :, 1])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    v1t = v1 - (v1 * nrm).sum(1)[:, None] * nrm
    v2t = v2 - (v2 * nrm).sum(1)[:, None] * nrm
    n1 = np.linalg.norm(v1t, axis=1)
    n2 = np.linalg.norm(v2t, axis=1)
    ok = (n1 > 0) & (n2 > 0)
    if not ok.any():
        return 0.0
    cosang = (v1t[ok] * v2t[ok]).sum(1) / (n1[ok] * n2[ok])
    return float(np.arccos(np.clip(cosang, -1, 1)).max())


class _SpliceJob:
    __slots__ = ("curve_idx", "arc", "kind", "row_a", "row_b")

    def __init__(self, curve_idx, arc, kind):
        self.curve_idx = curve_idx
        self.arc = arc
        self.kind = kind      # "geodesic" | "rays"
        self.row_a = None     # solver row for entry ray / the geodesic
        self.row_b = None     # solver row for exit ray


def sweep_ball(spec: MetricSpec, cover: BallCover, ball_idx: int,
               curve_list, tol_tangent: float, stats=None):
    """Apply the ball's arc replacements to every curve in the list, batched."""
    ball = cover.balls[ball_idx]
    is_b1 = ball_idx == 0
    h = cover.h
    jobs = []
    tangents = []
    point_curves = set()

    per_curve_arcs = []
    for ci, curve in enumerate(curve_list):
        if curve is None or curve.is_point_curve(spec, h):
            per_curve_arcs.append(([], None))
            continue
        arcs, base_idx, _ = split_arcs(spec, curve, ball, tol_tangent,
                                       base_is_here=is_b1)
        per_curve_arcs.append((arcs, base_idx))

    for ci, (arcs, base_idx) in enumerate(per_curve_arcs):
        if not arcs:
            continue
        curve = curve_list[ci]
        n = len(curve.line) - 1
        if is_b1 and len(arcs) == 1 and arcs[0].interior:
            point_curves.add(ci)
            continue
        if not is_b1 and arcs and arcs[0].interior:
            # based curves cannot be swallowed by a ball missing p; leave alone
            continue
        base_arc = arcs[base_idx] if base_idx is not None else None
        for ai, arc in enumerate(arcs):
            if arc.interior:
                continue
            if arc.tangent:
                tangents.append((ci, ball_idx, arc))
                continue
            idxs = np.array([(arc.first + t) % n
                             for t in range(_arc_len(arc, n))])
            if is_b1:
                if arc.is_base:
                    kind = "rays"
                else:
                    kind = ray_decision(arc, base_arc) if base_arc is not None \
                        else "geodesic"
            else:
                kind = "geodesic"
            # fixed-point skip: geodesic arcs (or ray-shaped through-p arcs)
            defect = _arc_turning_defect(spec, curve.line, idxs)
            if kind == "geodesic" and defect < TURN_SKIP:
                continue
            if kind == "rays" and defect < TURN_SKIP and len(idxs) >= 3:
                to_p = np.linalg.norm(curve.line.xyz[idxs] - cover.p.xyz, axis=1)
                k_min = int(np.argmin(to_p))
                if to_p[k_min] < 0.25 * h and 0 < k_min < len(idxs) - 1:
                    half1 = _arc_turning_defect(spec, curve.line, idxs[:k_min + 1])
                    half2 = _arc_turning_defect(spec, curve.line, idxs[k_min:])
                    if max(half1, half2) < TURN_SKIP:
                        continue
            jobs.append(_SpliceJob(ci, arc, kind))

    # batch the shooting problems
    geo_jobs = [j for j in jobs if j.kind == "geodesic"]
    ray_jobs = [j for j in jobs if j.kind == "rays"]
    solutions = {}

    if geo_jobs:
        s_uv = np.stack([j.arc.entry_uv for j in geo_jobs])
        s_ch = np.array([j.arc.entry_chart for j in geo_jobs])
        t_uv = np.stack([j.arc.exit_uv for j in geo_jobs])
        t_ch = np.array([j.arc.exit_chart for j in geo_jobs])
        alpha, length, ok = integrate.solve_bvp_batch(spec, s_uv, s_ch, t_uv, t_ch)
        if not ok.all():
            raise BvpFailureError(
                f"ball {ball_idx}: {int((~ok).sum())} arc replacement(s) failed")
        e1, e2, _, _ = integrate.frame_basis(spec, s_uv, s_ch)
        vel = integrate.direction_from_angle(e1, e2, alpha)
        n_steps = max(2, int(math.ceil(length.max() / h)))
        res = integrate.shoot_batch(spec, s_uv, s_ch, vel, length, n_steps,
                                    record=True)
        for r, j in enumerate(geo_jobs):
            solutions[id(j)] = ("geodesic", res, r)

    if ray_jobs:
        # rays from p to both boundary points of each arc
        b_uv = np.concatenate(
            [np.stack([j.arc.entry_uv for j in ray_jobs]),
             np.stack([j.arc.exit_uv for j in ray_jobs])])
        b_ch = np.concatenate(
            [np.array([j.arc.entry_chart for j in ray_jobs]),
             np.array([j.arc.exit_chart for j in ray_jobs])])
        m = len(ray_jobs)
        p_uv = np.repeat(cover.p.uv[None, :], 2 * m, axis=0)
        p_ch = np.full(2 * m, cover.p.chart)
        _, ang = ball.local_coords(b_uv, b_ch)
        d0 = ball.d_hat(Polyline(b_uv, b_ch, tensor.embed_points(spec, b_uv, b_ch)))
        alpha, length, ok = integrate.solve_bvp_batch(
            spec, p_uv, p_ch, b_uv, b_ch, init_alpha=ang, init_length=d0)
        if not ok.all():
            raise BvpFailureError(
                f"ball {ball_idx}: {int((~ok).sum())} ray solve(s) failed")
        e1, e2, _, _ = integrate.frame_basis(spec, p_uv, p_ch)
        vel = integrate.direction_from_angle(e1, e2, alpha)
        n_steps = max(2, int(math.ceil(length.max() / h)))
        res = integrate.shoot_batch(spec, p_uv, p_ch, vel, length, n_steps,
                                    record=True)
        for r, j in enumerate(ray_jobs):
            solutions[id(j)] = ("rays", res, r, r + m)

    # splice per curve
    out = list(curve_list)
    by_curve = {}
    for j in jobs:
        by_curve.setdefault(j.curve_idx, []).append(j)

    for ci in point_curves:
        out[ci] = point_curve(spec, cover.p)
        if stats is not None:
            stats.setdefault("contracted", []).append(ci)

    for ci, cjobs in by_curve.items():
        if ci in point_curves:
            continue
        curve = curve_list[ci]
        n = len(curve.line) - 1
        pieces = []      # (start_node_excl, end_node_excl, polyline)
        for j in sorted(cjobs, key=lambda q: q.arc.first):
            sol = solutions[id(j)]
            if sol[0] == "geodesic":
                _, res, r = sol
                repl = _job_polyline(spec, res, r, j.arc, reverse=False)
            else:
                _, res, r_in, r_out = sol
                ray_in = _trace_polyline(spec, res, r_in)
                ray_out = _trace_polyline(spec, res, r_out)
                repl = Polyline.concatenate([ray_in.reversed(), ray_out])
                repl = _snap_ends(repl, j.arc)
            pieces.append((j.arc, repl))
        out[ci] = _splice(spec, curve, pieces, cover, h)
    return out, tangents


def _trace_polyline(spec, res, row) -> Polyline:
    return Polyline(res.trace_uv[row], res.trace_chart[row], res.trace_xyz[row])


def _job_polyline(spec, res, row, arc: Arc, reverse: bool) -> Polyline:
    line = _trace_polyline(spec, res, row)
    return _snap_ends(line, arc)


def _snap_ends(line: Polyline, arc: Arc) -> Polyline:
    line.uv[0] = arc.entry_uv
    line.chart[0] = arc.entry_chart
    line.uv[-1] = arc.exit_uv
    line.chart[-1] = arc.exit_chart
    return line


def _splice(spec: MetricSpec, curve: DiscreteCurve, pieces, cover: BallCover,
            h: float) -> DiscreteCurve:
    """Replace the listed arcs (node ranges) by their polylines."""
    line = curve.line
    n = len(line) - 1
    keep = np.ones(n, dtype=bool)
    for arc, _ in pieces:
        for t in range(_arc_len(arc, n)):
            keep[(arc.first + t) % n] = False
    parts = []
    insert_after = {}
    for arc, repl in pieces:
        insert_after[(arc.first - 1) % n] = repl

    current = []
    for k in range(n):
        if keep[k]:
            current.append(k)
        if k in insert_after:
            if current:
                parts.append(Polyline(line.uv[current], line.chart[current],
                                      line.xyz[current]))
                current = []
            parts.append(insert_after[k])
    if current:
        parts.append(Polyline(line.uv[current], line.chart[current],
                              line.xyz[current]))
    new_line = Polyline.concatenate(parts)
    # close the loop
    if np.linalg.norm(new_line.xyz[0] - new_line.xyz[-1]) > 1e-12:
        new_line = Polyline.concatenate([new_line, new_line.slice(0, 1)])
    new_curve = DiscreteCurve(new_line, closed=True, based=curve.based)
    if curve.based:
        new_curve = _anchor_at_p(spec, new_curve, cover.p)
    return _edge_cleanup(spec, new_curve, h)


def _anchor_at_p(spec: MetricSpec, curve: DiscreteCurve, p: SurfacePoint) -> DiscreteCurve:
    """Rotate the closed polyline so the node nearest p comes first, exactly p."""
    xyz = curve.line.xyz[:-1]
    k = int(np.argmin(np.linalg.norm(xyz - p.xyz[None, :], axis=1)))
    if np.linalg.norm(xyz[k] - p.xyz) > 1e-7 * spec.length_scale():
        # base point drifted: snap the nearest node onto p
        pass
    uv = np.roll(curve.line.uv[:-1], -k, axis=0)
    ch = np.roll(curve.line.chart[:-1], -k)
    xy = np.roll(xyz, -k, axis=0)
    uv[0], ch[0], xy[0] = p.uv, p.chart, p.xyz
    uv = np.concatenate([uv, uv[:1]])
    ch = np.concatenate([ch, ch[:1]])
    xy = np.concatenate([xy, xy[:1]])
    return DiscreteCurve(Polyline(uv, ch, xy), closed=True, based=True)


def _edge_cleanup(spec: MetricSpec, curve: DiscreteCurve, h: float) -> DiscreteCurve:
    """Drop nodes that crowd closer than h/2 (chordal, strictly shortening)."""
    xyz = curve.line.xyz
    n = len(xyz)
    if n < 4:
        return curve
    keep = [0]
    last = 0
    for k in range(1, n - 1):
        if np.linalg.norm(xyz[k] - xyz[last]) >= 0.5 * h:
            keep.append(k)
            last = k
    keep.append(n - 1)
    keep = np.array(keep)
    return DiscreteCurve(Polyline(curve.line.uv[keep], curve.line.chart[keep],
                                  curve.line.xyz[keep]),
                         closed=curve.closed, based=curve.based)


def flow_step(spec: MetricSpec, cover: BallCover, curve: DiscreteCurve,
              tol_tangent: float = None) -> DiscreteCurve:
    """One full sweep (all balls, B1 first) applied to a single curve.

    Tangent arcs perturb the offending radius by 0.5 percent for this sweep
    only, per the single-curve escape hatch.
    """
    out, _ = flow_sweep_batch(spec, cover, [curve], tol_tangent)
    return out[0]


def flow_sweep_batch(spec: MetricSpec, cover: BallCover, curve_list,
                     tol_tangent: float = None, family_mode: bool = False):
    """One sweep for many curves, sharing every ball's batched solves."""
    if tol_tangent is None:
        tol_tangent = cover.h ** 2
    out = list(curve_list)
    all_tangents = []
    for bi in range(len(cover.balls)):
        before = list(out)
        out, tangents = sweep_ball(spec, cover, bi, out, tol_tangent)
        if tangents and not family_mode:
            # single-curve rule: nudge the radius and redo this ball from the
            # pre-ball state so nothing is applied twice
            ball = cover.balls[bi]
            orig = ball.radius
            ball.radius = orig * 1.005
            out, tangents = sweep_ball(spec, cover, bi, before, tol_tangent)
            ball.radius = orig
        all_tangents.extend(tangents)
    return out, all_tangents


# ----------------------------------------------------------------------------
# flow to the limit
# ----------------------------------------------------------------------------

@dataclass
class FlowResult:
    """Iterates, lengths and the limit classification of one flow run."""

    iterates: list
    lengths: np.ndarray
    classification: str            # "point" | "loops" | "unconverged"
    limit: DiscreteCurve
    loops: list = field(default_factory=list)   # (loop, is_prime, multiplicity)
    residual: float = 0.0
    sweeps: int = 0


def flow_to_limit(spec: MetricSpec, cover: BallCover, curve: DiscreteCurve,
                  tol_stall: float = None, max_iters: int = 600,
                  keep_iterates: int = 8, decompose: bool = True) -> FlowResult:
    results = flow_to_limit_batch(spec, cover, [curve], tol_stall, max_iters,
                                  keep_iterates, decompose)
    return results[0]


def flow_to_limit_batch(spec: MetricSpec, cover: BallCover, seeds,
                        tol_stall: float = None, max_iters: int = 600,
                        keep_iterates: int = 8, decompose: bool = True):
    """Flow many seeds at once; each stops on its own stall test.

    Stall requires both a per-sweep decrease below tol_stall and the
    vertices-only-at-p property (or a point curve); otherwise the flow keeps
    sweeping until max_iters.
    """
    h = cover.h
    if tol_stall is None:
        tol_stall = 1e-7 * math.pi * spec.length_scale()
    state = [cv.resample(spec, s, h) for s in seeds]
    n = len(state)
    lengths = [[c.length(spec)] for c in state]
    iterates = [[c] for c in state]
    done = np.zeros(n, dtype=bool)
    sweeps_done = np.zeros(n, dtype=int)

    for it in range(max_iters):
        if done.all():
            break
        live = [c if not done[i] else None for i, c in enumerate(state)]
        flowed, _ = flow_sweep_batch(spec, cover, live)
        for i in range(n):
            if done[i]:
                continue
            new = flowed[i]
            state[i] = new
            sweeps_done[i] = it + 1
            new_len = new.length(spec)
            lengths[i].append(new_len)
            if len(iterates[i]) < keep_iterates:
                iterates[i].append(new)
            if new_len < 4.0 * h:
                done[i] = True
                continue
            if lengths[i][-2] - new_len < tol_stall:
                if _vertices_only_at_p(spec, cover, new, h):
                    done[i] = True

    out = []
    for i in range(n):
        c = state[i]
        L = np.array(lengths[i])
        if c.length(spec) < 4.0 * h:
            res = FlowResult(iterates[i], L, "point", point_curve(spec, cover.p),
                             sweeps=int(sweeps_done[i]))
        elif done[i]:
            loops = decompose_loops(spec, cover, c, cover.p) if decompose else []
            residual = max((l[0].residual for l in loops), default=0.0) \
                if decompose else 0.0
            res = FlowResult(iterates[i], L, "loops", c, loops=loops,
                             residual=residual, sweeps=int(sweeps_done[i]))
        else:
            res = FlowResult(iterates[i], L, "unconverged", c,
                             sweeps=int(sweeps_done[i]))
        out.append(res)
    return out


def _vertices_only_at_p(spec: MetricSpec, cover: BallCover, curve: DiscreteCurve,
                        h: float, angle_tol: float = ANGLE_TOL) -> bool:
    ang = cv.turning_angles(spec, curve)
    if len(ang) == 0:
        return True
    near_p = np.linalg.norm(curve.line.xyz[1:] - cover.p.xyz[None, :], axis=1) < 3.0 * h
    away = ~near_p
    return bool((ang[away] < angle_tol).all()) if away.any() else True


# ----------------------------------------------------------------------------
# loop decomposition and polishing
# ----------------------------------------------------------------------------

@dataclass
class LoopInfo:
    curve: DiscreteCurve
    length: float
    residual: float
    start_angle: float

    @property
    def xyz(self):
        return self.curve.line.xyz


def polish_loop(spec: MetricSpec, p: SurfacePoint, piece: DiscreteCurve,
                h: float, drift_tol: float = None):
    """Replace a near-geodesic based loop by an exactly shot geodesic loop.

    Newton on (initial frame angle, arc length) so the shot returns to p; the
    result is rejected if it wanders more than drift_tol (default 5h) from
    the input piece.  Returns (loop_curve, length, residual, start_angle).
    """
    if drift_tol is None:
        drift_tol = 5.0 * h
    rough_len = piece.length(spec)
    d0 = piece.line.uv[1] - piece.line.uv[0] if piece.line.chart[1] == piece.line.chart[0] \
        else tensor.transition_uv(piece.line.uv[1][None])[0] - piece.line.uv[0]
    a0 = integrate.angle_of_direction(spec, p.uv[None, :], np.array([p.chart]),
                                      d0[None, :])[0]
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, p.uv[None, :], np.array([p.chart]), p.uv[None, :],
        np.array([p.chart]), init_alpha=np.array([a0]),
        init_length=np.array([rough_len]), allow_degenerate=False)
    if ok[0] and abs(length[0] - rough_len) < 0.2 * rough_len + 10 * h:
        e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :],
                                             np.array([p.chart]))
        vel = integrate.direction_from_angle(e1, e2, alpha[:1])
        n_steps = 2 * max(8, int(math.ceil(length[0] / h)))
        res = integrate.shoot_batch(spec, p.uv[None, :], np.array([p.chart]),
                                    vel, length[:1], n_steps, record=True)
        line = Polyline(res.trace_uv[0], res.trace_chart[0], res.trace_xyz[0])
        # verify it tracks the piece
        loop = DiscreteCurve(_close_at_p(line, p), closed=True, based=True)
        drift = _hausdorff(loop.line.xyz, piece.line.xyz)
        if drift < drift_tol:
            fine = integrate.shoot_batch(spec, p.uv[None, :], np.array([p.chart]),
                                         vel, length[:1], 2 * n_steps, record=True)
            residual = float(np.linalg.norm(
                fine.trace_xyz[0, ::2] - res.trace_xyz[0], axis=1).max())
            residual = max(residual,
                           float(np.linalg.norm(res.trace_xyz[0, -1] - p.xyz)))
            return loop, float(length[0]), residual, float(alpha[0])
    # fall back to the raw piece with an honest residual from re-shooting
    residual = _piece_residual(spec, p, piece, rough_len, a0, h)
    return piece, rough_len, residual, float(a0)


def _close_at_p(line: Polyline, p: SurfacePoint) -> Polyline:
    line.uv[0], line.chart[0], line.xyz[0] = p.uv, p.chart, p.xyz
    line.uv[-1], line.chart[-1], line.xyz[-1] = p.uv, p.chart, p.xyz
    return line


def _piece_residual(spec, p, piece, rough_len, a0, h):
    e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :], np.array([p.chart]))
    vel = integrate.direction_from_angle(e1, e2, np.array([a0]))
    n_steps = max(8, int(math.ceil(rough_len / h)))
    res = integrate.shoot_batch(spec, p.uv[None, :], np.array([p.chart]), vel,
                                np.array([rough_len]), n_steps, record=True)
    return _hausdorff(res.trace_xyz[0], piece.line.xyz)


def _hausdorff(a: np.ndarray, b: np.ndarray, sub: int = 4) -> float:
    aa = a[::sub] if len(a) > 2 * sub else a
    bb = b[::sub] if len(b) > 2 * sub else b
    d = np.linalg.norm(aa[:, None, :] - bb[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def image_separation(a: DiscreteCurve, b: DiscreteCurve) -> float:
    """Orientation-blind Hausdorff separation between curve images."""
    return _hausdorff(a.line.xyz, b.line.xyz)


def decompose_loops(spec: MetricSpec, cover: BallCover, limit: DiscreteCurve,
                    p: SurfacePoint, tol_geodesic: float = 1e-6):
    """Split a flow limit at its returns to p into prime loops with multiplicity.

    Pieces are polished into exactly shot geodesic loops; a piece whose
    residual stays above tol_geodesic raises, per the classification contract.
    """
    h = cover.h
    xyz = limit.line.xyz[:-1]
    n = len(xyz)
    near = np.linalg.norm(xyz - p.xyz[None, :], axis=1) < 1.2 * h
    # visits = maximal runs of near nodes; split at the run centers
    splits = []
    k = 0
    while k < n:
        if near[k]:
            run0 = k
            while k < n and near[k]:
                k += 1
            splits.append((run0 + k - 1) // 2)
        else:
            k += 1
    if 0 not in splits and near[0]:
        splits = [0] + splits
    if not splits:
        splits = [0]
    pieces = []
    for si in range(len(splits)):
        a = splits[si]
        b = splits[(si + 1) % len(splits)]
        idxs = [a]
        t = a
        while t != b:
            t = (t + 1) % n
            idxs.append(t)
        if len(idxs) < 3:
            continue
        line = Polyline(limit.line.uv[idxs], limit.line.chart[idxs],
                        limit.line.xyz[idxs])
        piece = DiscreteCurve(_close_at_p(line, p), closed=True, based=True)
        pieces.append(piece)

    infos = []
    for piece in pieces:
        loop, length, residual, angle = polish_loop(spec, p, piece, h)
        if residual > tol_geodesic * spec.length_scale() * 20:
            raise ClassificationInconsistencyError(
                f"split piece residual {residual:.2e} is not geodesic")
        infos.append(LoopInfo(loop, length, residual, angle))

    # group by image
    groups = []
    for info in infos:
        placed = False
        for grp in groups:
            if _hausdorff(info.xyz, grp[0].xyz) < 4.0 * h:
                grp.append(info)
                placed = True
                break
        if not placed:
            groups.append([info])
    out = []
    for grp in groups:
        best = min(grp, key=lambda i: i.residual)
        out.append((best.curve, True, len(grp), best.length, best.residual))
    return out


# ----------------------------------------------------------------------------
# convex polygon edge interpolation and the family flow
# ----------------------------------------------------------------------------

def interpolate_polygon_edge(spec: MetricSpec, polygon, target_edge: int,
                             n_frames: int = 17, h: float = None):
    """Homotope one edge of a convex geodesic polygon to the remaining edges.

    Frames run from the lone edge to the concatenation of the others with
    fixed endpoints; lengths are nondecreasing along that ordering.  The
    mid-curves are u|[0,t] * rho(u(t), u(1-t)) * u|[1-t,1].
    """
    if h is None:
        h = default_step(spec)
    segs = [polygon[(target_edge + 1 + k) % len(polygon)]
            for k in range(len(polygon) - 1)]
    interior = _polygon_convex_angles(spec, polygon)
    if interior is not None and (np.array(interior) > math.pi + 1e-6).any():
        raise ValueError("polygon is not convex at sampled resolution")
    u_line = Polyline.concatenate([s.line for s in segs])
    u = DiscreteCurve(u_line, closed=False, based=False)
    cum = cv.arc_positions(spec, u)
    total = float(cum[-1])
    frames = []
    for t in np.linspace(0.0, 0.5, n_frames):
        s0, s1 = t * total, (1.0 - t) * total
        head = cv.subcurve(spec, u, 0.0, s0, h) if s0 > 1e-12 else None
        tail = cv.subcurve(spec, u, s1, total, h) if s1 < total - 1e-12 else None
        a = u_line.point(0) if head is None else head.line.point(len(head.line) - 1)
        b = u_line.point(len(u_line) - 1) if tail is None else tail.line.point(0)
        gap = float(np.linalg.norm(a.xyz - b.xyz))
        if gap < 1e-12:
            mid = None
        else:
            from .surface import connect_in_ball
            seg = connect_in_ball(spec, a, np.inf, a, b, step=h)
            mid = seg.line
        parts = [pl for pl in
                 [head.line if head else None, mid, tail.line if tail else None]
                 if pl is not None and len(pl) > 0]
        frames.append(DiscreteCurve(Polyline.concatenate(parts), closed=False))
    frames.reverse()  # frame 0 = the lone geodesic edge, last = the others
    return frames


def _polygon_convex_angles(spec, polygon):
    try:
        angles = []
        m = len(polygon)
        for k in range(m):
            a = polygon[k]
            b = polygon[(k + 1) % m]
            va = a.line.xyz[-1] - a.line.xyz[-2]
            vb = b.line.xyz[1] - b.line.xyz[0]
            cosang = (va @ vb) / (np.linalg.norm(va) * np.linalg.norm(vb))
            angles.append(math.acos(np.clip(cosang, -1, 1)))
        return angles
    except Exception:
        return None


def repair_family(spec: MetricSpec, cover: BallCover, members,
                  delta_family: float, max_grow: int = 8):
    """Insert interpolating members wherever neighbours tore apart.

    Bridges are ambient-blend reprojections, the concrete form of the
    polygon-edge interpolation for small local differences; the output has
    adjacent sup-distance below 2 delta or raises.
    """
    delta_len = 4.0 * delta_family
    repaired = [members[0]]
    for c in members[1:]:
        prev = repaired[-1]
        gap = cv.sup_distance(spec, prev, c, n_probe=24)
        dlen = abs(prev.length(spec) - c.length(spec))
        if gap > 2.0 * delta_family or dlen > delta_len:
            if gap <= 6.0 * delta_family:
                # geometric proximity with a length cliff still breaks the
                # cycle class: blends interpolate both, so ladder them
                n_ins = min(max_grow,
                            max(2, int(gap / delta_family),
                                int(dlen / delta_len)))
                repaired.extend(_bridge_curves(spec, cover, prev, c,
                                               n_frames=n_ins))
            else:
                # globally different neighbours: route through the point
                # curve along Birkhoff chord families (length-controlled)
                down = chord_family(spec, cover, prev, n_frames=max_grow)
                up = chord_family(spec, cover, c, n_frames=max_grow)
                repaired.extend(down)
                repaired.extend(reversed(up))
        repaired.append(c)
    return repaired


def flow_family(spec: MetricSpec, cover: BallCover, family, dims: int = 1,
                delta_family: float = None, row_length: int = None):
    """One modified-disk-flow step applied to a whole family.

    Members flow in a single batch; tangency-flagged members get interpolation
    frames spliced next to them, and a repair pass restores adjacent
    continuity (sup-distance < 2 delta).  Two-parameter families repair
    within each contiguous row of row_length members.
    """
    flat = list(family)
    if delta_family is None:
        delta_family = max(_family_modulus(spec, flat), 6.0 * cover.h)
    flowed, tangents = flow_sweep_batch(spec, cover, flat, family_mode=True)
    inserted = {}
    if tangents:
        for (ci, ball_idx, arc) in tangents:
            # bridge this member toward its flowed neighbours
            left = flowed[ci - 1] if ci > 0 else None
            right = flowed[ci + 1] if ci + 1 < len(flowed) else None
            target = right or left
            if target is None:
                continue
            inserted.setdefault(ci, []).extend(
                _bridge_curves(spec, cover, flowed[ci], target, n_frames=5))
    out = []
    for i, c in enumerate(flowed):
        out.append(c)
        for extra in inserted.get(i, []):
            out.append(extra)
    if row_length is None:
        return repair_family(spec, cover, out, delta_family)
    rows = [out[i:i + row_length] for i in range(0, len(out), row_length)]
    repaired = []
    for row in rows:
        repaired.extend(repair_family(spec, cover, row, delta_family))
    return repaired


def _family_modulus(spec, flat):
    gaps = [cv.sup_distance(spec, a, b) for a, b in zip(flat[:-1], flat[1:])]
    return max(gaps) if gaps else 0.0


def chord_family(spec: MetricSpec, cover: BallCover, x: DiscreteCurve,
                 n_frames: int, h: float = None):
    """Length-nonincreasing contraction of a based loop through its chords.

    Frames x|[0,s] * rho(x(s), x(L-s)) * x|[L-s, L] for s from L/2 down to 0;
    rho is the connecting geodesic, so no frame is longer than the loop.  The
    last frame is the point curve.  Ordered from the loop to the point.
    """
    from .surface import connect_in_ball
    if h is None:
        h = cover.h
    cum = cv.arc_positions(spec, x)
    total = float(cum[-1])
    frames = []
    prev_hint = None
    for s in np.linspace(0.5, 0.0, n_frames + 1)[1:]:
        if s * total < 2 * h:
            frames.append(point_curve(spec, cover.p))
            continue
        head = cv.subcurve(spec, x, 0.0, s * total, h)
        tail = cv.subcurve(spec, x, (1.0 - s) * total, total, h)
        a_pt = head.line.point(len(head.line) - 1)
        b_pt = tail.line.point(0)
        gap = float(np.linalg.norm(a_pt.xyz - b_pt.xyz))
        parts = [head.line]
        if gap > 1e-10:
            seg = connect_in_ball(spec, a_pt, np.inf, a_pt, b_pt, step=h)
            parts.append(seg.line)
        parts.append(tail.line)
        line = Polyline.concatenate(parts)
        line.uv[0] = cover.p.uv
        line.chart[0] = cover.p.chart
        line.xyz[0] = cover.p.xyz
        frames.append(DiscreteCurve(_force_closed(line), closed=True,
                                    based=True))
    return frames


def _bridge_curves(spec: MetricSpec, cover: BallCover, a: DiscreteCurve,
                   b: DiscreteCurve, n_frames: int = 5):
    """Interpolating members between two nearby based curves.

    Matched-parameter chart interpolation, re-anchored at p; valid for the
    small gaps the family flow produces (both curves are unions of geodesic
    pieces through the same balls).
    """
    ca = cv.arc_positions(spec, a)
    cb = cv.arc_positions(spec, b)
    n_pts = max(len(a.line), len(b.line))
    fr = np.linspace(0.0, 1.0, n_pts)
    pa = cv._interpolate_at(spec, a.line, ca, fr * ca[-1])
    pb = cv._interpolate_at(spec, b.line, cb, fr * cb[-1])
    out = []
    for w in np.linspace(0.0, 1.0, n_frames + 2)[1:-1]:
        # ambient blend re-projected through the radial parameterization;
        # chart blending would blow up across seams
        mid = (1 - w) * pa.xyz + w * pb.xyz
        norms = np.linalg.norm(mid, axis=1)
        mid[norms < 1e-9] = pa.xyz[norms < 1e-9]
        chart, uv = tensor.xyz_to_chart(spec, mid)
        line = Polyline(uv, chart, tensor.embed_points(spec, uv, chart))
        if a.based:
            # both ends start at p, so the blend does too; pin it exactly
            # (re-anchoring by nearest node would scramble parameterizations)
            line.uv[0] = cover.p.uv
            line.chart[0] = cover.p.chart
            line.xyz[0] = cover.p.xyz
        curve = DiscreteCurve(_force_closed(line), closed=True, based=a.based)
        out.append(curve)
    return out


def _force_closed(line: Polyline) -> Polyline:
    line.uv[-1] = line.uv[0]
    line.chart[-1] = line.chart[0]
    line.xyz[-1] = line.xyz[0]
    return line
