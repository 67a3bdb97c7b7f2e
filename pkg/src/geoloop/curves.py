"""Discrete closed curves, their intersection structure, and p-admissibility.

Curves are chart polylines whose first and last points coincide; based curves
keep the base point at index 0.  Intersection tests run on ambient chords
with a projection onto the local tangent plane, so chart seams never matter.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .surface import Polyline, SurfacePoint
from .tensor import MetricSpec


@dataclass
class DiscreteCurve:
    """Ordered polyline of surface points; closed curves repeat the first point."""

    line: Polyline
    closed: bool = True
    based: bool = False

    def __post_init__(self):
        if self.closed and len(self.line) >= 2:
            gap = np.linalg.norm(self.line.xyz[0] - self.line.xyz[-1])
            if gap > 1e-9:
                raise ValueError("closed curve endpoints disagree")

    @property
    def base_point(self) -> SurfacePoint:
        return self.line.point(0)

    def is_point_curve(self, spec: MetricSpec, h: float) -> bool:
        return self.length(spec) < 4.0 * h

    def length(self, spec: MetricSpec) -> float:
        return self.line.length(spec)

    def reversed(self) -> "DiscreteCurve":
        return DiscreteCurve(self.line.reversed(), self.closed, self.based)

    def copy(self) -> "DiscreteCurve":
        return DiscreteCurve(self.line.copy(), self.closed, self.based)


def point_curve(spec: MetricSpec, p: SurfacePoint) -> DiscreteCurve:
    line = Polyline(np.stack([p.uv, p.uv]), np.array([p.chart, p.chart]),
                    np.stack([p.xyz, p.xyz]))
    return DiscreteCurve(line, closed=True, based=True)


def from_based_loop(spec: MetricSpec, line: Polyline) -> DiscreteCurve:
    return DiscreteCurve(line, closed=True, based=True)


def concatenate(spec: MetricSpec, a: DiscreteCurve, b: DiscreteCurve,
                based: bool = None) -> DiscreteCurve:
    """a followed by b; endpoints must agree."""
    if np.linalg.norm(a.line.xyz[-1] - b.line.xyz[0]) > 1e-7 * spec.length_scale():
        raise ValueError("concatenation endpoints disagree")
    line = Polyline.concatenate([a.line, b.line])
    closed = bool(np.linalg.norm(line.xyz[0] - line.xyz[-1]) < 1e-9)
    return DiscreteCurve(line, closed=closed,
                         based=a.based if based is None else based)


def length(spec: MetricSpec, curve: DiscreteCurve) -> float:
    return curve.length(spec)


def arc_positions(spec: MetricSpec, curve: DiscreteCurve) -> np.ndarray:
    """Cumulative Riemannian arc length at each polyline node."""
    el = curve.line.edge_lengths(spec)
    return np.concatenate([[0.0], np.cumsum(el)])


def _interpolate_at(spec, line: Polyline, cum: np.ndarray, s: np.ndarray) -> Polyline:
    """Points at arc positions s (sorted), interpolated within edges."""
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
    seg_len = cum[idx + 1] - cum[idx]
    w = np.where(seg_len > 0, (s - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    a_uv, b_uv, chart = line.edge_segments_common_chart()
    uv = a_uv[idx] + w[:, None] * (b_uv[idx] - a_uv[idx])
    new_chart = chart[idx]
    # normalize chart codes for points that drifted past the switch radius
    far = np.einsum("ij,ij->i", uv, uv) > tensor.SWITCH_S
    if np.any(far):
        uv[far] = tensor.transition_uv(uv[far])
        new_chart = new_chart.copy()
        new_chart[far] = 1 - new_chart[far]
    return Polyline(uv, new_chart, tensor.embed_points(spec, uv, new_chart))


def resample(spec: MetricSpec, curve: DiscreteCurve, h: float) -> DiscreteCurve:
    """Arc-length uniform resampling with edge lengths in (h/2, h].

    The first (and for closed curves, last) point is preserved exactly, so
    based curves keep their base point bit-for-bit.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    cum = arc_positions(spec, curve)
    total = float(cum[-1])
    if total < 1e-12 * spec.length_scale():
        return point_curve(spec, curve.base_point) if curve.based else DiscreteCurve(
            Polyline(curve.line.uv[[0, -1]], curve.line.chart[[0, -1]],
                     curve.line.xyz[[0, -1]]), curve.closed, curve.based)
    n = max(4 if curve.closed else 1, int(math.ceil(total / h)))
    s = np.arange(1, n) * (total / n)
    mid = _interpolate_at(spec, curve.line, cum, s)
    first = curve.line.slice(0, 1)
    last = curve.line.slice(len(curve.line) - 1, len(curve.line)) if curve.closed \
        else curve.line.slice(len(curve.line) - 1, len(curve.line))
    line = Polyline(
        np.concatenate([first.uv, mid.uv, last.uv]),
        np.concatenate([first.chart, mid.chart, last.chart]),
        np.concatenate([first.xyz, mid.xyz, last.xyz]),
    )
    return DiscreteCurve(line, curve.closed, curve.based)


def subcurve(spec: MetricSpec, curve: DiscreteCurve, s0: float, s1: float,
             h: float) -> DiscreteCurve:
    """Open sub-arc between arc positions s0 <= s1, resampled at step h."""
    cum = arc_positions(spec, curve)
    s0 = float(np.clip(s0, 0.0, cum[-1]))
    s1 = float(np.clip(s1, 0.0, cum[-1]))
    n = max(1, int(math.ceil((s1 - s0) / h)))
    s = np.linspace(s0, s1, n + 1)
    line = _interpolate_at(spec, curve.line, cum, s)
    return DiscreteCurve(line, closed=False, based=False)


def sup_distance(spec: MetricSpec, a: DiscreteCurve, b: DiscreteCurve,
                 n_probe: int = 128) -> float:
    """Symmetric Hausdorff distance between the curves (arc-uniform samples).

    Parameterization-free on purpose: family continuity guards against
    geometric tearing, and matched-fraction comparison would inflate whenever
    two members merely redistribute speed.
    """
    ca = arc_positions(spec, a)
    cb = arc_positions(spec, b)
    fr = np.linspace(0.0, 1.0, n_probe)
    pa = _interpolate_at(spec, a.line, ca, fr * ca[-1]).xyz
    pb = _interpolate_at(spec, b.line, cb, fr * cb[-1]).xyz
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def turning_angles(spec: MetricSpec, curve: DiscreteCurve) -> np.ndarray:
    """Riemannian angle between consecutive edges at each interior node.

    For closed curves the wrap vertex (the base point) is reported last.
    """
    line = curve.line
    n = len(line)
    if n < 3:
        return np.zeros(0)
    a_uv, b_uv, chart = line.edge_segments_common_chart()
    d = b_uv - a_uv  # edge vectors in the chart of their first endpoint
    # incoming edge at node k is edge k-1 expressed in node k's chart
    inc_uv = d[:-1].copy()
    differ = chart[:-1] != chart[1:]
    if np.any(differ):
        # push the incoming vector through the transition at the shared node
        inc_uv[differ] = tensor.transition_velocity(b_uv[:-1][differ], d[:-1][differ])
    out_uv = d[1:]
    g = tensor.metric_g(spec, a_uv[1:], chart[1:])
    num = np.einsum("nab,na,nb->n", g, inc_uv, out_uv)
    na = np.sqrt(np.einsum("nab,na,nb->n", g, inc_uv, inc_uv))
    nb = np.sqrt(np.einsum("nab,na,nb->n", g, out_uv, out_uv))
    denom = np.where(na * nb > 0, na * nb, 1.0)
    ang = np.arccos(np.clip(num / denom, -1.0, 1.0))
    if curve.closed:
        # wrap angle between the last and first edges, at node 0
        last_uv = d[-1].copy()
        if chart[-1] != chart[0]:
            last_uv = tensor.transition_velocity(b_uv[-1][None, :], d[-1][None, :])[0]
        g0 = tensor.metric_g(spec, a_uv[:1], chart[:1])[0]
        v1, v2 = last_uv, d[0]
        num0 = v1 @ g0 @ v2
        den0 = math.sqrt((v1 @ g0 @ v1) * (v2 @ g0 @ v2))
        ang = np.concatenate([ang, [math.acos(np.clip(num0 / max(den0, 1e-300), -1, 1))]])
    return ang


# ----------------------------------------------------------------------------
# intersections
# ----------------------------------------------------------------------------

@dataclass
class IntersectionReport:
    """Self-intersection taxonomy of a based closed curve."""

    transverse: list = field(default_factory=list)          # ((i, j), xyz)
    nontransverse_at_p: int = 0
    other_nontransverse: list = field(default_factory=list)  # ((i, j), xyz)

    @property
    def clean(self) -> bool:
        return not self.transverse and not self.other_nontransverse


def _segment_gap(a0, a1, b0, b1):
    """Closest approach of two 3D segments: gap, params s, t in [0,1]."""
    u = a1 - a0
    v = b1 - b0
    w = a0 - b0
    aa = (u * u).sum(-1)
    bb = (v * v).sum(-1)
    ab = (u * v).sum(-1)
    aw = (u * w).sum(-1)
    bw = (v * w).sum(-1)
    det = aa * bb - ab * ab
    s = np.where(det > 1e-30, (ab * bw - bb * aw) / np.where(det > 1e-30, det, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    t = np.where(bb > 1e-30, (ab * s + bw) / np.where(bb > 1e-30, bb, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    s = np.where(aa > 1e-30, (ab * t - aw) / np.where(aa > 1e-30, aa, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    pa = a0 + s[..., None] * u
    pb = b0 + t[..., None] * v
    return np.linalg.norm(pa - pb, axis=-1), s, t, 0.5 * (pa + pb)


def _candidate_pairs(xyz: np.ndarray, cell: float):
    """Candidate edge pairs (i < j) within contact range, excluding neighbours."""
    n_edge = len(xyz) - 1
    mids = 0.5 * (xyz[:-1] + xyz[1:])
    reach = 1.75 * cell
    pairs = []
    chunk = max(1, int(4e6 // max(n_edge, 1)))
    for lo in range(0, n_edge, chunk):
        hi = min(lo + chunk, n_edge)
        d2 = ((mids[lo:hi, None, :] - mids[None, :, :]) ** 2).sum(-1)
        ii, jj = np.nonzero(d2 < reach * reach)
        ii = ii + lo
        keep = (jj > ii + 1) & ~((ii == 0) & (jj == n_edge - 1))
        pairs.append(np.stack([ii[keep], jj[keep]], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=int)
    return np.concatenate(pairs)


def intersections(spec: MetricSpec, curve: DiscreteCurve, p: SurfacePoint,
                  h: float) -> IntersectionReport:
    """Classify self-contacts of the curve.

    Chords closer than tol_cross = h^2 are contacts; a contact is transverse
    when the chord projections onto the tangent plane at the contact properly
    cross.  Contacts within 4h of p where both strands pass through p are the
    allowed based-point tangencies.
    """
    xyz = curve.line.xyz
    n_edge = len(xyz) - 1
    report = IntersectionReport()
    if n_edge < 3:
        return report
    tol_cross = h * h
    edge_len = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
    cell = max(float(edge_len.max()), 2.0 * tol_cross, 1e-12)
    pairs = _candidate_pairs(xyz, cell)
    if len(pairs) == 0:
        return report
    i, j = pairs[:, 0], pairs[:, 1]
    gap, s, t, mid = _segment_gap(xyz[i], xyz[i + 1], xyz[j], xyz[j + 1])
    near = gap < 1.1 * tol_cross
    if not near.any():
        return report

    # distance of each node run to p, for the through-p test
    node_to_p = np.linalg.norm(xyz - p.xyz, axis=1)
    for k in np.where(near)[0]:
        ei, ej = int(i[k]), int(j[k])
        g = float(gap[k])
        contact = mid[k]
        # tangent-plane projection at the contact
        chart_c, uv_c = tensor.xyz_to_chart(spec, contact[None, :])
        _, jac = tensor.emb_jacobian(spec, uv_c, chart_c)
        b1 = jac[0, :, 0] / np.linalg.norm(jac[0, :, 0])
        b2raw = jac[0, :, 1] - (jac[0, :, 1] @ b1) * b1
        b2 = b2raw / np.linalg.norm(b2raw)
        proj = lambda q: np.array([(q - contact) @ b1, (q - contact) @ b2])
        a0, a1 = proj(xyz[ei]), proj(xyz[ei + 1])
        c0, c1 = proj(xyz[ej]), proj(xyz[ej + 1])

        def side(q0, q1, r):
            return (q1[0] - q0[0]) * (r[1] - q0[1]) - (q1[1] - q0[1]) * (r[0] - q0[0])

        s1 = side(a0, a1, c0) * side(a0, a1, c1)
        s2 = side(c0, c1, a0) * side(c0, c1, a1)
        crossing = (s1 < 0) and (s2 < 0) and g < 0.9 * tol_cross
        near_p = np.linalg.norm(contact - p.xyz) < 4.0 * h
        if near_p:
            wi = node_to_p[max(ei - 2, 0): ei + 4].min()
            wj = node_to_p[max(ej - 2, 0): ej + 4].min()
            both_through_p = wi < 1.5 * h and wj < 1.5 * h
        else:
            both_through_p = False
        if both_through_p:
            report.nontransverse_at_p += 1
        elif crossing:
            report.transverse.append(((ei, ej), contact))
        else:
            report.other_nontransverse.append(((ei, ej), contact))
    return report


def cross_intersections(spec: MetricSpec, a: Polyline, b: Polyline, tol: float,
                        max_hits: int = 64, require_crossing: bool = False):
    """Contacts between two different polylines (chord test).

    With require_crossing=True only proper crossings count: the chords must
    straddle each other in the tangent-plane projection at the contact.
    """
    hits = []
    xa, xb = a.xyz, b.xyz
    if len(xa) < 2 or len(xb) < 2:
        return hits
    ea = np.linalg.norm(np.diff(xa, axis=0), axis=1)
    eb = np.linalg.norm(np.diff(xb, axis=0), axis=1)
    cell = max(float(ea.max(initial=0.0)), float(eb.max(initial=0.0)), tol, 1e-12)
    mids_b = 0.5 * (xb[:-1] + xb[1:])
    keys_b = np.floor(mids_b / cell).astype(np.int64)
    buckets = {}
    for e in range(len(mids_b)):
        buckets.setdefault(tuple(keys_b[e]), []).append(e)
    mids_a = 0.5 * (xa[:-1] + xa[1:])
    keys_a = np.floor(mids_a / cell).astype(np.int64)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    cluster = 2.5 * cell
    for e in range(len(mids_a)):
        k = keys_a[e]
        for off in offsets:
            for f in buckets.get((k[0] + off[0], k[1] + off[1], k[2] + off[2]), ()):
                gap, s, t, mid = _segment_gap(xa[e], xa[e + 1], xb[f], xb[f + 1])
                if gap < tol:
                    if require_crossing and not _chords_straddle(
                            spec, xa[e], xa[e + 1], xb[f], xb[f + 1], mid):
                        continue
                    if any(np.linalg.norm(mid - old[1]) < cluster for old in hits):
                        continue
                    hits.append(((e, f), mid, float(gap)))
                    if len(hits) >= max_hits:
                        return hits
    return hits


def _chords_straddle(spec, a0, a1, b0, b1, contact):
    """Proper-crossing test of two chords in the tangent plane at the contact."""
    chart_c, uv_c = tensor.xyz_to_chart(spec, contact[None, :])
    _, jac = tensor.emb_jacobian(spec, uv_c, chart_c)
    e1 = jac[0, :, 0] / np.linalg.norm(jac[0, :, 0])
    raw = jac[0, :, 1] - (jac[0, :, 1] @ e1) * e1
    e2 = raw / np.linalg.norm(raw)

    def proj(q):
        return np.array([(q - contact) @ e1, (q - contact) @ e2])

    pa0, pa1, pb0, pb1 = proj(a0), proj(a1), proj(b0), proj(b1)

    def side(q0, q1, r):
        return (q1[0] - q0[0]) * (r[1] - q0[1]) - (q1[1] - q0[1]) * (r[0] - q0[0])

    return (side(pa0, pa1, pb0) * side(pa0, pa1, pb1) < 0 and
            side(pb0, pb1, pa0) * side(pb0, pb1, pa1) < 0)


# ----------------------------------------------------------------------------
# p-admissibility
# ----------------------------------------------------------------------------

def _disk_visits(xyz: np.ndarray, p_xyz: np.ndarray, radius: float):
    """Maximal index runs of a closed polyline inside the disk around p."""
    inside = np.linalg.norm(xyz - p_xyz, axis=1) < radius
    n = len(xyz)
    visits = []
    k = 0
    while k < n:
        if inside[k]:
            start = k
            while k < n and inside[k]:
                k += 1
            visits.append((start, k - 1))
        else:
            k += 1
    return visits, inside


def _chords_cross(a, b):
    """Interleaving test for chords on a circle, angles in [0, 2pi)."""
    (a0, a1), (b0, b1) = a, b

    def inside(x, lo, hi):
        if lo <= hi:
            return lo < x < hi
        return x > lo or x < hi

    c0 = inside(b0, a0, a1)
    c1 = inside(b1, a0, a1)
    return c0 != c1


def is_p_admissible(spec: MetricSpec, curve: DiscreteCurve, p: SurfacePoint,
                    h: float):
    """Decide admissibility; returns (ok, witness_or_None).

    A curve passes when it has no transverse self-crossings, every contact
    away from p belongs to a parallel overlap that reaches the base disk (the
    doubled-curve configuration), and the strand diagram in the 4h disk at p
    is a non-crossing chord diagram, so an arbitrarily thin pushoff exists.
    """
    if not curve.based:
        raise ValueError("admissibility is defined for based curves")
    if curve.length(spec) < 4.0 * h:
        return True, None
    report = intersections(spec, curve, p, h)
    if report.transverse:
        return False, report.transverse[0]

    xyz = curve.line.xyz
    n_edge = len(xyz) - 1
    if report.other_nontransverse:
        # overlap runs must reach the base disk to be a doubled-curve artifact
        marked = np.zeros(n_edge, dtype=bool)
        for (ei, ej), _ in report.other_nontransverse:
            marked[ei] = True
            marked[ej] = True
        node_near_p = np.linalg.norm(xyz - p.xyz, axis=1) < 4.0 * h
        if not marked.all():
            for (pair, contact) in report.other_nontransverse:
                for e in pair:
                    lo = e
                    while marked[(lo - 1) % n_edge]:
                        lo = (lo - 1) % n_edge
                        if lo == e:
                            break
                    hi = e
                    while marked[(hi + 1) % n_edge]:
                        hi = (hi + 1) % n_edge
                        if hi == e:
                            break
                    if not (node_near_p[lo] or node_near_p[min(hi + 1, n_edge)]):
                        return False, (pair, contact)

    # strand diagram in the 4h disk at p
    visits, inside = _disk_visits(xyz, p.xyz, 4.0 * h)
    if not visits:
        return True, None
    # merge the wrap-around visit (closed curve: first and last nodes are p)
    if len(visits) >= 2 and visits[0][0] == 0 and visits[-1][1] == len(xyz) - 1:
        head = visits.pop(0)
        tail = visits.pop(-1)
    else:
        head = visits.pop(0) if visits and visits[0][0] == 0 else None
        tail = None

    def boundary_angle(idx_in, idx_out):
        """Angle of the disk-boundary crossing between two node indices."""
        q = xyz[np.clip(idx_out, 0, len(xyz) - 1)]
        v = q - p.xyz
        # project onto the tangent plane frame at p
        return math.atan2(v @ _frame2, v @ _frame1) % (2 * math.pi)

    chart_p = np.array([p.chart])
    _, jac = tensor.emb_jacobian(spec, p.uv[None, :], chart_p)
    _frame1 = jac[0, :, 0] / np.linalg.norm(jac[0, :, 0])
    _f2 = jac[0, :, 1] - (jac[0, :, 1] @ _frame1) * _frame1
    _frame2 = _f2 / np.linalg.norm(_f2)

    chords = []
    for (s, e) in visits:
        a_in = boundary_angle(s, max(s - 1, 0))
        a_out = boundary_angle(e, min(e + 1, len(xyz) - 1))
        chords.append((a_in, a_out))
    base_in = boundary_angle(0, tail[0] - 1) if tail else None
    base_out = boundary_angle(0, head[1] + 1) if head else None
    if base_in is not None and base_out is not None:
        chords.append((base_in, base_out))
    for ii in range(len(chords)):
        for jj in range(ii + 1, len(chords)):
            if _chords_cross(chords[ii], chords[jj]):
                return False, (("strand-diagram", ii, jj), p.xyz)
    return True, None


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

def curve_to_csv(curve: DiscreteCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["chart", "u", "v", "x", "y", "z"])
    for k in range(len(curve.line)):
        w.writerow([int(curve.line.chart[k]),
                    repr(float(curve.line.uv[k, 0])), repr(float(curve.line.uv[k, 1])),
                    repr(float(curve.line.xyz[k, 0])), repr(float(curve.line.xyz[k, 1])),
                    repr(float(curve.line.xyz[k, 2]))])
    return buf.getvalue()


def curve_from_csv(text: str, closed: bool = True, based: bool = False) -> DiscreteCurve:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    chart = np.array([int(r[0]) for r in rows], dtype=np.int8)
    uv = np.array([[float(r[1]), float(r[2])] for r in rows])
    xyz = np.array([[float(r[3]), float(r[4]), float(r[5])] for r in rows])
    return DiscreteCurve(Polyline(uv, chart, xyz), closed=closed, based=based)


def curve_to_json_obj(curve: DiscreteCurve) -> dict:
    return {
        "closed": curve.closed,
        "based": curve.based,
        "chart": [int(c) for c in curve.line.chart],
        "uv": [[float(a), float(b)] for a, b in curve.line.uv],
        "xyz": [[float(a), float(b), float(c)] for a, b, c in curve.line.xyz],
    }


def curve_from_json_obj(obj: dict) -> DiscreteCurve:
    return DiscreteCurve(
        Polyline(np.array(obj["uv"], dtype=float),
                 np.array(obj["chart"], dtype=np.int8),
                 np.array(obj["xyz"], dtype=float)),
        closed=bool(obj["closed"]), based=bool(obj["based"]),
    )
