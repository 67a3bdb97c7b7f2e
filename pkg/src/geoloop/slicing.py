"""Short monotone meridional slicings built from the cut-locus structure.

Pipeline: pick the Berger point q (local max of distance from p), take the
minimizing geodesics from q to p as the meridional skeleton, contract each
digon between consecutive minimizers by sliding its vertex down the enclosed
cut edge (collapsing at the conjugate leaf), and assemble a family of p-to-q
curves: a truncated p-minimizer followed by a minimizing connector back to q,
with a tapered standoff from the cut so distinct curves never cross.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import curves as cv
from . import diskflow, fanfield, integrate, tensor
from .curves import DiscreteCurve
from .cutlocus import CONJ, CutLocusTree
from .errors import DigonContractionError, MonotonicityError
from .surface import GeodesicSegment, Polyline, SurfacePoint, default_step
from .tensor import MetricSpec


@dataclass
class Digon:
    """Region between two minimizing geodesics from p to a common vertex."""

    edge1: GeodesicSegment          # p -> second vertex
    edge2: GeodesicSegment          # p -> second vertex
    second_vertex: SurfacePoint
    angle_at_second_vertex: float
    p_angle_lo: float               # departure-angle interval at p (ccw from lo)
    p_angle_hi: float

    def contains_angle(self, ang: float) -> bool:
        two_pi = 2.0 * math.pi
        return (ang - self.p_angle_lo) % two_pi <= \
            (self.p_angle_hi - self.p_angle_lo) % two_pi


@dataclass
class Homotopy:
    """Family of based loops indexed from the digon boundary down to p."""

    frames: list
    max_length: float
    monotone_flag: bool
    phases: list = field(default_factory=list)


@dataclass
class LoopsFound:
    """Early exit: the flow ran into simple geodesic loops instead."""

    loops: list    # (curve, is_prime, multiplicity, length, residual)


@dataclass
class SlicingFamily:
    """Monotone meridional family of p-to-q curves, periodic in t."""

    p: SurfacePoint
    q: SurfacePoint
    t: np.ndarray
    curves: list
    max_length: float
    degree: int
    degenerate: bool = False

    def curve_at_fraction(self, frac: float) -> DiscreteCurve:
        i = int(round((frac % 1.0) * len(self.curves))) % len(self.curves)
        return self.curves[i]


# ----------------------------------------------------------------------------
# Berger point
# ----------------------------------------------------------------------------

def _polar_distance_fn(spec: MetricSpec, fan):
    def dist(xyz):
        t, ray, gap = fanfield.polar_distance(fan, spec, xyz[None, :])
        return float(t[0] + gap[0])
    return dist


def find_berger_point(spec: MetricSpec, p: SurfacePoint, n_starts: int = 8,
                      fan=None, tol: float = None, tree: CutLocusTree = None):
    """Local maximum of x -> d(p, x) by multi-start pattern climbing.

    Returns (q, berger_ok); berger_ok is the sampled direction-covering check
    at q (some minimizer to p leaves q with nonnegative inner product against
    each probed direction).  With a tree supplied, the result snaps to the
    tree node of maximal distance near the climbed point, since every local
    maximum lies on the cut locus.
    """
    if n_starts < 8:
        raise ValueError("n_starts must be at least 8")
    scale = spec.length_scale()
    if tol is None:
        tol = 1e-4 * scale
    if fan is None:
        fan = fanfield.cut_time_fan(spec, p.uv, p.chart, n_rays=256,
                                    merge_tol=0.015 * scale)
    dist = _polar_distance_fn(spec, fan)

    starts = [fan.cut_xyz[int(np.argmax(fan.t_cut))]]
    dirs = tensor._fibonacci_sphere(max(n_starts, 8))
    chart = tensor.preferred_chart(dirs)
    uv = tensor.sphere_to_chart(dirs, chart)
    starts += list(tensor.embed_points(spec, uv, chart))

    best_xyz, best_val = None, -np.inf
    for s_xyz in starts:
        here_chart, here_uv = tensor.xyz_to_chart(spec, s_xyz[None, :])
        here_uv, here_chart = here_uv[0], int(here_chart[0])
        val = dist(tensor.embed_points(spec, here_uv[None, :],
                                       np.array([here_chart]))[0])
        step = 0.15 * scale
        while step > tol:
            e1, e2, xyz0, _ = integrate.frame_basis(spec, here_uv[None, :],
                                                    np.array([here_chart]))
            moved = False
            for a in range(6):
                ang = a * math.pi / 3.0
                vel = math.cos(ang) * e1[0] + math.sin(ang) * e2[0]
                res = integrate.shoot_batch(spec, here_uv[None, :],
                                            np.array([here_chart]),
                                            vel[None, :], np.array([step]), 6)
                cand = res.final_xyz(spec)[0]
                v = dist(cand)
                if v > val + 1e-12:
                    val = v
                    here_uv, here_chart = res.uv[0].copy(), int(res.chart[0])
                    moved = True
                    break
            if not moved:
                step *= 0.5
        if val > best_val:
            best_val = val
            best_xyz = tensor.embed_points(spec, here_uv[None, :],
                                           np.array([here_chart]))[0]
    if tree is not None and not tree.is_single_point:
        # snap onto the tree: all local maxima of distance live on the cut
        # locus, and each tree node's distance is its generating cut time
        cand = []
        for e in tree.edges:
            for k in range(len(e.line)):
                ray = int(e.ray_pairs[k][0])
                cand.append((float(tree.fan.t_cut[ray]), e.line.xyz[k]))
        for v in tree.vertices:
            if v.minimizers:
                cand.append((float(v.minimizers[0].arc_length), v.position.xyz))
        ds = np.array([c[0] for c in cand])
        pts = np.stack([c[1] for c in cand])
        near = np.linalg.norm(pts - best_xyz[None, :], axis=1)
        local = near < 0.25 * spec.length_scale()
        pick = int(np.argmax(np.where(local, ds, -np.inf))) if local.any() \
            else int(np.argmax(ds))
        best_xyz = pts[pick]
    elif tree is not None and tree.is_single_point:
        best_xyz = tree.vertices[0].position.xyz
    q = SurfacePoint.from_xyz(spec, best_xyz)

    # Berger spot check: arrival directions of minimizers at q versus probes
    arrive = _arrival_directions(spec, fan, q, tol_pos=6.0 * fan.dt)
    ok = True
    if len(arrive) > 0:
        e1, e2, _, frame = integrate.frame_basis(spec, q.uv[None, :],
                                                 np.array([q.chart]))
        probes = np.stack([math.cos(a) * frame[0, :, 0] + math.sin(a) * frame[0, :, 1]
                           for a in np.linspace(0, 2 * math.pi, 64, endpoint=False)])
        # minimizers from q to p START opposite to the arrivals of p-rays
        depart = -arrive
        ok = bool((depart @ probes.T).max(axis=0).min() > -5e-2)
    return q, ok


def _arrival_directions(spec, fan, q: SurfacePoint, tol_pos: float):
    """Unit arrival directions (ambient) of fan rays whose cut point is q."""
    close = np.linalg.norm(fan.cut_xyz - q.xyz[None, :], axis=1) < tol_pos
    rows = np.where(close)[0]
    out = []
    for i in rows:
        k = int(np.clip(fan.t_cut[i] / fan.dt, 1, fan.trace.trace_xyz.shape[1] - 2))
        v = fan.trace.trace_xyz[i, k + 1] - fan.trace.trace_xyz[i, k - 1]
        nv = np.linalg.norm(v)
        if nv > 0:
            out.append(v / nv)
    return np.asarray(out) if out else np.zeros((0, 3))


# ----------------------------------------------------------------------------
# tau geodesics and digons
# ----------------------------------------------------------------------------

def _shoot_segment(spec, p, angle, length, h) -> GeodesicSegment:
    e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :], np.array([p.chart]))
    vel = integrate.direction_from_angle(e1, e2, np.array([angle]))
    n_steps = max(4, int(math.ceil(length / h)))
    res = integrate.shoot_batch(spec, p.uv[None, :], np.array([p.chart]), vel,
                                np.array([length]), n_steps, record=True)
    line = Polyline(res.trace_uv[0], res.trace_chart[0], res.trace_xyz[0])
    return GeodesicSegment(line, float(length), 0.0)


def _polish_to(spec, p, target: SurfacePoint, init_angle, init_len, h):
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, p.uv[None, :], np.array([p.chart]), target.uv[None, :],
        np.array([target.chart]), init_alpha=np.array([init_angle]),
        init_length=np.array([init_len]))
    seg = _shoot_segment(spec, p, float(alpha[0]), float(length[0]), h)
    # pin the far endpoint
    seg.line.uv[-1] = target.uv_in_chart(int(seg.line.chart[-1]))
    seg.line.xyz[-1] = target.xyz
    return seg, float(alpha[0]), float(length[0])


def select_tau_geodesics(spec: MetricSpec, p: SurfacePoint, q: SurfacePoint,
                         tree: CutLocusTree, h: float = None):
    """Minimizing geodesics p -> q bounding the meridional digons.

    Returns (segments, departure_angles_at_p, degenerate).  For a conjugate
    single-point cut locus (round-sphere case) two antipodal representatives
    of the infinite family are returned with the degenerate flag set.
    """
    if h is None:
        h = default_step(spec)
    where = tree.locate(q.xyz, tol=8.0 * tree.merge_tol)
    if where is None:
        raise ValueError("Berger point is not on the cut locus at tolerance")
    fan = tree.fan
    if tree.is_single_point and tree.infinite_family:
        segs, angles = [], []
        for a0 in (0.0, math.pi):
            seg, al, _ = _polish_to(spec, p, q, a0, float(fan.t_cut[0]), h)
            segs.append(seg)
            angles.append(al)
        return segs, np.array(angles), True

    if where[0] == "vertex":
        v = tree.vertices[where[1]]
        rays = []
        mem_groups = []
        # reconstruct departure angles from the stored minimizers
        for seg in v.minimizers:
            d0 = seg.line.uv[1] - seg.line.uv[0]
            ang = integrate.angle_of_direction(
                spec, p.uv[None, :], np.array([p.chart]), d0[None, :])[0]
            rays.append(float(ang))
        angles = np.array(rays)
        segs = []
        for a in angles:
            seg, al, _ = _polish_to(spec, p, q, a, v.minimizers[0].arc_length, h)
            segs.append(seg)
    else:
        _, ei, k = where
        i, j = tree.edges[ei].ray_pairs[k]
        angles = []
        segs = []
        for ray in (int(i), int(j)):
            if ray == CONJ:
                continue
            seg, al, _ = _polish_to(spec, p, q, float(fan.angles[ray]),
                                    float(fan.t_cut[ray]), h)
            segs.append(seg)
            angles.append(al)
        angles = np.array(angles)

    if len(segs) > 3:
        # most-balanced three by departure angle
        order = np.argsort(angles)
        segs = [segs[o] for o in order]
        angles = angles[order]
        best = None
        m = len(segs)
        for combo in _three_combos(m):
            a = angles[list(combo)]
            gaps = np.diff(np.concatenate([a, [a[0] + 2 * math.pi]]))
            score = gaps.max() - gaps.min()
            if best is None or score < best[0]:
                best = (score, combo)
        combo = list(best[1])
        segs = [segs[c] for c in combo]
        angles = angles[combo]

    order = np.argsort(angles % (2 * math.pi))
    segs = [segs[o] for o in order]
    angles = np.sort(angles % (2 * math.pi))
    return segs, angles, False


def _three_combos(m):
    for a in range(m):
        for b in range(a + 1, m):
            for c in range(b + 1, m):
                yield (a, b, c)


def make_digons(spec: MetricSpec, p: SurfacePoint, q: SurfacePoint, segs,
                angles) -> list:
    """Digons between consecutive minimizers, ordered by departure angle at p."""
    digons = []
    m = len(segs)
    for k in range(m):
        e1 = segs[k]
        e2 = segs[(k + 1) % m]
        lo = float(angles[k])
        hi = float(angles[(k + 1) % m]) if k + 1 < m else float(angles[0]) + 2 * math.pi
        v1 = e1.line.xyz[-1] - e1.line.xyz[-2]
        v2 = e2.line.xyz[-1] - e2.line.xyz[-2]
        cosang = (v1 @ v2) / (np.linalg.norm(v1) * np.linalg.norm(v2))
        digons.append(Digon(edge1=e1, edge2=e2, second_vertex=q,
                            angle_at_second_vertex=float(
                                math.acos(np.clip(cosang, -1, 1))),
                            p_angle_lo=lo, p_angle_hi=hi))
    return digons


# ----------------------------------------------------------------------------
# sliding contraction
# ----------------------------------------------------------------------------

def _edge_walk_into(spec: MetricSpec, tree: CutLocusTree, q: SurfacePoint,
                    digon: Digon):
    """Chain nodes of the cut edge inside the digon, walked from q outward.

    Returns (node_xyz list, ray pair list, end_kind, end_vertex_id) where
    end_kind is "leaf" (conjugate tip) or "vertex" (branch: unsupported for
    sliding).  Membership is decided by the departure angle at p.
    """
    fan = tree.fan
    where = tree.locate(q.xyz, tol=8.0 * tree.merge_tol)
    adj = tree.adjacency()

    def angle_of(xyz):
        t, ray, gap = fanfield.polar_distance(fan, spec, xyz[None, :])
        return float(fan.angles[int(ray[0])])

    candidates = []
    if where[0] == "edge":
        _, ei, k = where
        e = tree.edges[ei]
        # two directions along this edge
        for direction in (1, -1):
            nxt = k + direction
            if 0 <= nxt < len(e.line):
                candidates.append((ei, k, direction))
    else:
        vi = where[1]
        for (nb, ei) in adj[vi]:
            e = tree.edges[ei]
            if e.v0 == vi:
                candidates.append((ei, 0, 1))
            else:
                candidates.append((ei, len(e.line) - 1, -1))

    inside = []
    for (ei, k, direction) in candidates:
        e = tree.edges[ei]
        probe = min(max(k + 2 * direction, 0), len(e.line) - 1)
        if digon.contains_angle(angle_of(e.line.xyz[probe])):
            inside.append((ei, k, direction))
    if len(inside) == 0:
        return [], [], "none", None
    if len(inside) > 1:
        return [], [], "branch", None
    ei, k, direction = inside[0]
    e = tree.edges[ei]
    idxs = list(range(k, len(e.line)) if direction == 1 else range(k, -1, -1))
    nodes = [e.line.xyz[i] for i in idxs]
    pairs = [tuple(int(x) for x in e.ray_pairs[i]) for i in idxs]
    far_vid = e.v1 if direction == 1 else e.v0
    far = tree.vertices[far_vid]
    end_kind = "leaf" if far.degree == 1 else "vertex"
    nodes.append(far.position.xyz)
    pairs.append(pairs[-1])
    return nodes, pairs, end_kind, far_vid


def slide_frames(spec: MetricSpec, p: SurfacePoint, tree: CutLocusTree,
                 nodes, pairs, h: float, n_collapse: int = 12,
                 lo_angle: float = None):
    """Loops min_l * -min_r through the moving cut point, then the collapse.

    Returns (frames, slide_data) where slide_data carries, per frame, the
    polished (angle, length) of both minimizers for the slicing assembly.
    With lo_angle given, the "l" side is the flank nearer that departure
    angle, so band orientation is deterministic.
    """
    fan = tree.fan
    frames = []
    data = []
    n_nodes = len(nodes)
    xyz_arr = np.stack(nodes)
    t_chart, t_uv = tensor.xyz_to_chart(spec, xyz_arr)
    ray_a = np.array([ri if ri != CONJ else rj for (ri, rj) in pairs])
    ray_b = np.array([rj if rj != CONJ else ri for (ri, rj) in pairs])
    init_a = np.concatenate([fan.angles[ray_a], fan.angles[ray_b]])
    init_l = np.concatenate([fan.t_cut[ray_a], fan.t_cut[ray_b]])
    start_uv = np.repeat(p.uv[None, :], 2 * n_nodes, 0)
    start_ch = np.full(2 * n_nodes, p.chart)
    tgt_uv = np.concatenate([t_uv, t_uv])
    tgt_ch = np.concatenate([t_chart, t_chart])
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, start_uv, start_ch, tgt_uv, tgt_ch,
        init_alpha=init_a, init_length=init_l)
    e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :], np.array([p.chart]))
    vel = integrate.direction_from_angle(
        np.repeat(e1, 2 * n_nodes, 0), np.repeat(e2, 2 * n_nodes, 0), alpha)
    n_steps = max(4, int(math.ceil(length.max() / h)))
    shots = integrate.shoot_batch(spec, start_uv, start_ch, vel, length,
                                  n_steps, record=True)
    two_pi = 2.0 * math.pi
    for k in range(n_nodes):
        ka, kb = k, k + n_nodes
        if lo_angle is not None and \
                (alpha[ka] - lo_angle) % two_pi > (alpha[kb] - lo_angle) % two_pi:
            ka, kb = kb, ka
        line_l = Polyline(shots.trace_uv[ka], shots.trace_chart[ka],
                          shots.trace_xyz[ka])
        line_r = Polyline(shots.trace_uv[kb], shots.trace_chart[kb],
                          shots.trace_xyz[kb])
        line_l.xyz[-1] = xyz_arr[k]
        line_r.xyz[-1] = xyz_arr[k]
        loop = cv.concatenate(spec, DiscreteCurve(line_l, closed=False, based=True),
                              DiscreteCurve(line_r.reversed(), closed=False),
                              based=True)
        loop = DiscreteCurve(diskflow._force_closed(loop.line), closed=True,
                             based=True)
        frames.append(loop)
        data.append({"xyz": xyz_arr[k],
                     "l": (float(alpha[ka]), float(length[ka])),
                     "r": (float(alpha[kb]), float(length[kb]))})
    # collapse the doubled leaf minimizer onto p
    al, ln = data[-1]["l"]
    for sigma in np.linspace(1.0, 0.0, n_collapse + 1)[1:]:
        if sigma * ln < 2 * h:
            frames.append(cv.point_curve(spec, p))
            break
        seg = _shoot_segment(spec, p, al, sigma * ln, h)
        out = DiscreteCurve(seg.line, closed=False, based=True)
        back = DiscreteCurve(seg.line.reversed(), closed=False)
        loop = cv.concatenate(spec, out, back, based=True)
        frames.append(DiscreteCurve(diskflow._force_closed(loop.line),
                                    closed=True, based=True))
    if frames and frames[-1].length(spec) > 4 * h:
        frames.append(cv.point_curve(spec, p))
    return frames, data


def contract_digon(spec: MetricSpec, cover, tree: CutLocusTree, digon: Digon,
                   d: float, h: float = None, max_depth: int = None):
    """Contract the digon boundary to p through based loops of length <= 6d.

    Follows the cut structure: slide along a lone enclosed edge to its leaf
    and collapse; with no enclosed edge, push off the vertex and run the disk
    flow (loops found there are returned as LoopsFound); a branch vertex
    peels the outermost sub-digon by flow and glues with the Maeda homotopy.
    """
    if h is None:
        h = cover.h
    if max_depth is None:
        max_depth = len(tree.vertices) + 2
    if max_depth < 0:
        raise DigonContractionError("digon recursion exceeded the vertex count")
    if digon.angle_at_second_vertex > math.pi + 5e-2:
        raise ValueError("digon angle at the far vertex must be at most pi")
    q = digon.second_vertex
    nodes, pairs, end_kind, far_vid = _edge_walk_into(spec, tree, q, digon)

    if end_kind == "none":
        return _contract_by_flow(spec, cover, digon, d, h)
    if end_kind == "branch":
        return _contract_split(spec, cover, tree, digon, d, h, max_depth)

    frames, data = slide_frames(spec, p=cover.p, tree=tree, nodes=nodes,
                                pairs=pairs, h=h, lo_angle=digon.p_angle_lo)
    lengths = [f.length(spec) for f in frames]
    hom = Homotopy(frames=frames, max_length=float(max(lengths)),
                   monotone_flag=True,
                   phases=[("slide", data), ("collapse", data[-1])])
    if hom.max_length > 6.0 * d * 1.05:
        raise DigonContractionError(
            f"slide contraction exceeded 6d: {hom.max_length:.3f} > {6 * d:.3f}")
    return hom


def _boundary_loop(spec, digon: Digon) -> DiscreteCurve:
    fwd = DiscreteCurve(digon.edge1.line, closed=False, based=True)
    back = DiscreteCurve(digon.edge2.line.reversed(), closed=False)
    loop = cv.concatenate(spec, fwd, back, based=True)
    return DiscreteCurve(diskflow._force_closed(loop.line), closed=True, based=True)


def _pushoff(spec, digon: Digon, h: float) -> DiscreteCurve:
    """Round the corner at the far vertex so the loop leaves the cut locus."""
    from .surface import connect_in_ball
    e1, e2 = digon.edge1, digon.edge2
    c1 = cv.arc_positions(spec, DiscreteCurve(e1.line, closed=False))
    c2 = cv.arc_positions(spec, DiscreteCurve(e2.line, closed=False))
    back = 6.0 * h
    s1 = max(c1[-1] - back, 0.6 * c1[-1])
    s2 = max(c2[-1] - back, 0.6 * c2[-1])
    head = cv.subcurve(spec, DiscreteCurve(e1.line, closed=False), 0.0, s1, h)
    tail = cv.subcurve(spec, DiscreteCurve(e2.line, closed=False), 0.0, s2, h)
    a = head.line.point(len(head.line) - 1)
    b = tail.line.point(len(tail.line) - 1)
    bridge = connect_in_ball(spec, a, np.inf, a, b, step=h)
    loop = Polyline.concatenate([head.line, bridge.line, tail.line.reversed()])
    return DiscreteCurve(diskflow._force_closed(loop), closed=True, based=True)


def _contract_by_flow(spec, cover, digon: Digon, d: float, h: float):
    seed = _pushoff(spec, digon, h)
    result = diskflow.flow_to_limit(spec, cover, seed, keep_iterates=64)
    if result.classification == "point":
        frames = [_boundary_loop(spec, digon)] + list(result.iterates) + \
            [cv.point_curve(spec, cover.p)]
        lengths = [f.length(spec) for f in frames]
        hom = Homotopy(frames=frames, max_length=float(max(lengths)),
                       monotone_flag=False, phases=[("flow", None)])
        if hom.max_length > 6.0 * d * 1.05:
            raise DigonContractionError(
                f"flow contraction exceeded 6d: {hom.max_length:.3f}")
        return hom
    if result.classification == "loops":
        return LoopsFound(loops=result.loops)
    raise DigonContractionError("digon flow did not converge")


def _contract_split(spec, cover, tree, digon: Digon, d: float, h: float,
                    depth: int):
    """Branch at the far vertex: peel the outermost sub-digon, Maeda-glue."""
    q = digon.second_vertex
    where = tree.locate(q.xyz, tol=8.0 * tree.merge_tol)
    if where is None or where[0] != "vertex":
        raise DigonContractionError("split case expects a branch vertex")
    v = tree.vertices[where[1]]
    # minimizers strictly inside the digon, ordered by departure angle at p
    inner = []
    for seg in v.minimizers:
        d0 = seg.line.uv[1] - seg.line.uv[0]
        ang = float(integrate.angle_of_direction(
            spec, cover.p.uv[None, :], np.array([cover.p.chart]), d0[None, :])[0])
        if digon.contains_angle(ang) and \
                abs((ang - digon.p_angle_lo) % (2 * math.pi)) > 1e-9 and \
                abs((digon.p_angle_hi - ang) % (2 * math.pi)) > 1e-9:
            inner.append((ang, seg))
    if not inner:
        return _contract_by_flow(spec, cover, digon, d, h)
    inner.sort(key=lambda t: (t[0] - digon.p_angle_lo) % (2 * math.pi))
    mid_angle, mid_seg = inner[0]
    sub = Digon(edge1=digon.edge1, edge2=mid_seg, second_vertex=q,
                angle_at_second_vertex=digon.angle_at_second_vertex * 0.5,
                p_angle_lo=digon.p_angle_lo, p_angle_hi=mid_angle)
    got = contract_digon(spec, cover, tree, sub, d, h, max_depth=depth - 1)
    if isinstance(got, LoopsFound):
        return got
    g1 = DiscreteCurve(digon.edge1.line, closed=False, based=True)
    g2 = DiscreteCurve(mid_seg.line, closed=False, based=True)
    glue = maeda_convert(spec, g1, g2, got, h=h)
    rest = Digon(edge1=mid_seg, edge2=digon.edge2, second_vertex=q,
                 angle_at_second_vertex=digon.angle_at_second_vertex * 0.5,
                 p_angle_lo=mid_angle, p_angle_hi=digon.p_angle_hi)
    tail = contract_digon(spec, cover, tree, rest, d, h, max_depth=depth - 1)
    if isinstance(tail, LoopsFound):
        return tail
    frames = []
    back2 = DiscreteCurve(digon.edge2.line.reversed(), closed=False)
    for fr in glue.frames:
        loop = cv.concatenate(spec, fr, back2, based=True)
        frames.append(DiscreteCurve(diskflow._force_closed(loop.line),
                                    closed=True, based=True))
    frames.extend(tail.frames)
    lengths = [f.length(spec) for f in frames]
    hom = Homotopy(frames=frames, max_length=float(max(lengths)),
                   monotone_flag=False,
                   phases=[("split", None)] + tail.phases)
    if hom.max_length > 6.0 * d * 1.05:
        raise DigonContractionError(
            f"split contraction exceeded 6d: {hom.max_length:.3f}")
    return hom


# ----------------------------------------------------------------------------
# Maeda conversion
# ----------------------------------------------------------------------------

def maeda_convert(spec: MetricSpec, gamma1: DiscreteCurve, gamma2: DiscreteCurve,
                  contraction: Homotopy, h: float = None,
                  n_frames: int = 24) -> Homotopy:
    """Fixed-endpoint homotopy gamma1 -> gamma2 from a based contraction.

    The contraction takes gamma1 * -gamma2 to the base point through loops of
    length at most L; the output frames are reversed-contraction loops with a
    gamma1 tail, followed by the shrinking backtrack
    gamma2 * -gamma1|[0,s] * gamma1|[0,s], staying under L(gamma1) + L.
    """
    if h is None:
        h = default_step(spec)
    if np.linalg.norm(gamma1.line.xyz[0] - gamma2.line.xyz[0]) > 1e-6 or \
            np.linalg.norm(gamma1.line.xyz[-1] - gamma2.line.xyz[-1]) > 1e-6:
        raise ValueError("maeda_convert needs shared endpoints")
    frames = []
    # phase A: t descending; frame = reverse(contraction frame) * gamma1
    idx = np.linspace(len(contraction.frames) - 1, 0,
                      min(n_frames, len(contraction.frames))).astype(int)
    for k in idx:
        loop = contraction.frames[k]
        rev = DiscreteCurve(loop.line.reversed(), closed=False)
        fr = cv.concatenate(spec, rev, DiscreteCurve(gamma1.line, closed=False))
        frames.append(fr)
    # phase B: gamma2 * -gamma1|[0,s] * gamma1|[0,s] with s shrinking to 0
    cum1 = cv.arc_positions(spec, gamma1)
    total1 = float(cum1[-1])
    for s in np.linspace(1.0, 0.0, n_frames):
        if s * total1 < 2 * h:
            frames.append(DiscreteCurve(gamma2.line.copy(), closed=False))
            continue
        head = cv.subcurve(spec, gamma1, 0.0, s * total1, h)
        fr = cv.concatenate(spec, DiscreteCurve(gamma2.line.copy(), closed=False),
                            DiscreteCurve(head.line.reversed(), closed=False))
        fr = cv.concatenate(spec, fr, head)
        frames.append(fr)
    lengths = [f.length(spec) for f in frames]
    return Homotopy(frames=frames, max_length=float(max(lengths)),
                    monotone_flag=False, phases=[("maeda", None)])


# ----------------------------------------------------------------------------
# the slicing itself
# ----------------------------------------------------------------------------

def _band_curves(spec, p, q, slide_data, side: str, n_slices: int,
                 w0: float, h: float):
    """p->q curves along one flank of a slid digon.

    Each curve runs down the flank minimizer to a standoff point at constant
    clearance w0 short of the cut, then returns to q along the minimizing
    connector.  Constant clearance keeps every connector strictly deeper than
    the head ends it passes, so curves of one band never cross.
    """
    m = len(slide_data)
    take = np.linspace(0, m - 1, n_slices).astype(int)
    angs = np.array([slide_data[k][side][0] for k in take])
    lens = np.array([slide_data[k][side][1] for k in take])
    depth = np.maximum(lens - w0, 0.5 * lens)
    e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :], np.array([p.chart]))
    vel = integrate.direction_from_angle(np.repeat(e1, n_slices, 0),
                                         np.repeat(e2, n_slices, 0), angs)
    n_steps = max(4, int(math.ceil(depth.max() / h)))
    heads = integrate.shoot_batch(spec, np.repeat(p.uv[None, :], n_slices, 0),
                                  np.full(n_slices, p.chart), vel, depth,
                                  n_steps, record=True)
    # connectors from q: batched solve, then a continuity repair pass that
    # re-solves any branch-jumped rows warm-started from their neighbour
    t_uv, t_chart = heads.uv, heads.chart
    q_uv = np.repeat(q.uv[None, :], n_slices, 0)
    q_ch = np.full(n_slices, q.chart)
    al, ln, okk = integrate.solve_bvp_batch(spec, q_uv, q_ch, t_uv, t_chart)
    con_alpha, con_len = al.copy(), ln.copy()
    for k in range(1, n_slices):
        if abs(con_len[k] - con_len[k - 1]) > 0.15 * spec.length_scale():
            a2, l2, _ = integrate.solve_bvp_batch(
                spec, q.uv[None, :], np.array([q.chart]), t_uv[k][None, :],
                np.array([t_chart[k]]),
                init_alpha=np.array([con_alpha[k - 1]]),
                init_length=np.array([con_len[k - 1]]))
            con_alpha[k], con_len[k] = float(a2[0]), float(l2[0])
    eq1, eq2, _, _ = integrate.frame_basis(spec, q.uv[None, :], np.array([q.chart]))
    cvel = integrate.direction_from_angle(np.repeat(eq1, n_slices, 0),
                                          np.repeat(eq2, n_slices, 0), con_alpha)
    c_steps = max(4, int(math.ceil(con_len.max() / h)))
    cons = integrate.shoot_batch(spec, np.repeat(q.uv[None, :], n_slices, 0),
                                 np.full(n_slices, q.chart), cvel, con_len,
                                 c_steps, record=True)
    out = []
    for k in range(n_slices):
        head = Polyline(heads.trace_uv[k], heads.trace_chart[k],
                        heads.trace_xyz[k])
        con = Polyline(cons.trace_uv[k], cons.trace_chart[k], cons.trace_xyz[k])
        # snap the junction
        con.uv[-1] = head.uv[-1]
        con.chart[-1] = head.chart[-1]
        con.xyz[-1] = head.xyz[-1]
        line = Polyline.concatenate([head, con.reversed()])
        out.append(DiscreteCurve(line, closed=False, based=False))
    return out


def build_slicing(spec: MetricSpec, cover, tree: CutLocusTree, p: SurfacePoint,
                  q: SurfacePoint, taus, eps: float = None,
                  n_slices: int = 128, h: float = None, d: float = None,
                  contractions: dict = None) -> SlicingFamily:
    """Monotone meridional slicing through curves of length <= 7d + eps.

    For the conjugate-degenerate case the family is the polished minimizer
    fan from p directly.  Otherwise each digon contributes two tapered bands
    (left flank, right flank) meeting at the conjugate leaf, with the taus as
    the transition curves.
    """
    if h is None:
        h = cover.h
    segs, angles, degenerate = taus
    if d is None:
        d = max(s.arc_length for s in segs)
    if eps is None:
        from .surface import normal_ball_radius
        eps = min(0.25 * normal_ball_radius(spec, p), d / 100.0)

    curves = []
    if degenerate:
        fan_angles = np.linspace(0, 2 * math.pi, n_slices, endpoint=False)
        base_len = segs[0].arc_length
        prev_len = base_len
        for a in fan_angles:
            seg, al, ln = _polish_to(spec, p, q, float(a), prev_len, h)
            prev_len = ln
            curves.append(DiscreteCurve(seg.line, closed=False, based=False))
        fam = SlicingFamily(p=p, q=q,
                            t=np.arange(n_slices) / n_slices, curves=curves,
                            max_length=float(max(c.length(spec) for c in curves)),
                            degree=0, degenerate=True)
        fam.degree = slicing_degree(spec, fam)
        return fam

    m = len(segs)
    digons = make_digons(spec, p, q, segs, angles)
    per = max(8, n_slices // (2 * m))
    w0 = max(2.0 * tree.merge_tol, 6.0 * h)
    tip_guard = 4.0 * tree.merge_tol
    for attempt in range(3):
        curves = []
        for k, digon in enumerate(digons):
            nodes, pairs, end_kind, far = _edge_walk_into(spec, tree, q, digon)
            if end_kind != "leaf":
                raise MonotonicityError(
                    "slicing supports digons enclosing a single cut edge to a "
                    f"conjugate leaf; found '{end_kind}'")
            # stop short of the under-resolved conjugate tip
            leaf_xyz = nodes[-1]
            keep = [i for i, x in enumerate(nodes)
                    if np.linalg.norm(x - leaf_xyz) > tip_guard]
            if len(keep) < 4:
                keep = list(range(max(len(nodes) - 3, 1)))
            nodes_t = [nodes[i] for i in keep]
            pairs_t = [pairs[i] for i in keep]
            _, slide_data = slide_frames(spec, p, tree, nodes_t, pairs_t, h,
                                         lo_angle=digon.p_angle_lo,
                                         n_collapse=0)
            # tau at the band start
            curves.append(DiscreteCurve(segs[k].line.copy(), closed=False))
            left = _band_curves(spec, p, q, slide_data, "l", per, w0, h)
            curves.extend(left[1:])
            right = _band_curves(spec, p, q, slide_data, "r", per, w0, h)
            curves.extend(list(reversed(right))[:-1])
        fam = SlicingFamily(p=p, q=q, t=np.arange(len(curves)) / len(curves),
                            curves=curves,
                            max_length=float(max(c.length(spec) for c in curves)),
                            degree=0)
        bad = slicing_pairwise_clean(spec, fam, n_pairs=150, h=h)
        if not bad:
            break
        tip_guard *= 1.8
    else:
        raise MonotonicityError(
            f"slicing pairwise crossings persist at {len(bad)} sampled pairs")
    if fam.max_length > 7.0 * d + eps + 6.0 * d * 0.05:
        raise MonotonicityError(
            f"slicing curve length {fam.max_length:.3f} exceeds 7d+eps")
    fam.degree = slicing_degree(spec, fam)
    return fam


def slicing_degree(spec: MetricSpec, fam: SlicingFamily, n_sub: int = 64) -> int:
    """Degree of the induced sphere map by signed-area summation."""
    pts = []
    for c in fam.curves:
        cum = cv.arc_positions(spec, c)
        fr = np.linspace(0.0, 1.0, n_sub)
        pl = cv._interpolate_at(spec, c.line, cum, fr * cum[-1])
        n = pl.xyz if spec.kind != "ellipsoid" else pl.xyz / np.asarray(spec.axes)
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        pts.append(n)
    pts.append(pts[0])
    grid = np.stack(pts)  # (T+1, S, 3)
    a = grid[:-1, :-1]
    b = grid[1:, :-1]
    c_ = grid[1:, 1:]
    d_ = grid[:-1, 1:]

    def tri_area(u, v, w):
        num = np.einsum("...i,...i->...", u, np.cross(v, w))
        den = 1.0 + np.einsum("...i,...i->...", u, v) + \
            np.einsum("...i,...i->...", v, w) + np.einsum("...i,...i->...", u, w)
        return 2.0 * np.arctan2(num, den)

    total = tri_area(a, b, c_).sum() + tri_area(a, c_, d_).sum()
    return int(round(total / (4.0 * math.pi)))


def slicing_pairwise_clean(spec: MetricSpec, fam: SlicingFamily,
                           n_pairs: int = 200, h: float = None,
                           seed: int = 0) -> list:
    """Sampled monotonicity audit: crossings away from p and q are violations."""
    if h is None:
        h = default_step(spec)
    rng = np.random.default_rng(seed)
    n = len(fam.curves)
    bad = []
    for _ in range(n_pairs):
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        if i == j:
            continue
        hits = cv.cross_intersections(spec, fam.curves[i].line,
                                      fam.curves[j].line, tol=h * h,
                                      require_crossing=True)
        for (pair, mid, gap) in hits:
            if np.linalg.norm(mid - fam.p.xyz) > 3 * h and \
                    np.linalg.norm(mid - fam.q.xyz) > 3 * h:
                bad.append(((i, j), mid))
    return bad
