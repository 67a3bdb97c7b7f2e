"""Approximate cut locus of the base point as a finite embedded tree.

The ridge points of a dense geodesic fan (equal-length meets plus conjugate
caps) are clustered into nodes; consecutive fan angles link the nodes into a
graph which, for the metrics in scope, collapses into a tree whose vertex
degrees equal the number of arriving minimizing geodesics.  A conjugate-only
cluster is the single-point case with its infinite family of minimizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fanfield, integrate, tensor
from .curves import DiscreteCurve, cross_intersections
from .errors import AmbiguousCountError, CutLocusResolutionError
from .fanfield import CONJ, FanField
from .surface import GeodesicSegment, Polyline, SurfacePoint, default_step
from .tensor import MetricSpec


@dataclass
class TreeVertex:
    position: SurfacePoint
    degree: int
    minimizers: list
    conjugate: bool = False     # reached at (numerically) conjugate time


@dataclass
class TreeEdge:
    v0: int
    v1: int
    line: Polyline
    ray_pairs: np.ndarray       # (n,2) generating fan rays per polyline node


@dataclass
class CutLocusTree:
    p: SurfacePoint
    vertices: list
    edges: list
    is_single_point: bool
    infinite_family: bool       # single conjugate point (round-sphere case)
    fan: FanField
    fan_size: int
    merge_tol: float

    def adjacency(self):
        adj = {i: [] for i in range(len(self.vertices))}
        for ei, e in enumerate(self.edges):
            adj[e.v0].append((e.v1, ei))
            adj[e.v1].append((e.v0, ei))
        return adj

    def all_points(self) -> np.ndarray:
        pts = [v.position.xyz[None, :] for v in self.vertices]
        pts += [e.line.xyz for e in self.edges]
        return np.concatenate(pts) if pts else np.zeros((0, 3))

    def locate(self, xyz: np.ndarray, tol: float):
        """Nearest tree element: ('vertex', id) or ('edge', id, node) or None."""
        best = (None, np.inf)
        for vi, v in enumerate(self.vertices):
            d = float(np.linalg.norm(v.position.xyz - xyz))
            if d < best[1]:
                best = (("vertex", vi), d)
        for ei, e in enumerate(self.edges):
            d = np.linalg.norm(e.line.xyz - xyz[None, :], axis=1)
            k = int(np.argmin(d))
            if d[k] < best[1]:
                best = (("edge", ei, k), float(d[k]))
        return best[0] if best[1] < tol else None


def _union_find(n):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    return find, union


def _polish_minimizer(spec: MetricSpec, p: SurfacePoint, target_xyz: np.ndarray,
                      init_angle: float, init_len: float, h: float) -> GeodesicSegment:
    t_chart, t_uv = tensor.xyz_to_chart(spec, target_xyz[None, :])
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, p.uv[None, :], np.array([p.chart]), t_uv, t_chart,
        init_alpha=np.array([init_angle]), init_length=np.array([init_len]))
    e1, e2, _, _ = integrate.frame_basis(spec, p.uv[None, :], np.array([p.chart]))
    vel = integrate.direction_from_angle(e1, e2, alpha[:1])
    n_steps = max(4, int(math.ceil(length[0] / h)))
    res = integrate.shoot_batch(spec, p.uv[None, :], np.array([p.chart]), vel,
                                length[:1], n_steps, record=True)
    line = Polyline(res.trace_uv[0], res.trace_chart[0], res.trace_xyz[0])
    gap = float(np.linalg.norm(line.xyz[-1] - target_xyz))
    return GeodesicSegment(line, float(length[0]), gap if ok[0] else np.inf)


def build_cut_locus(spec: MetricSpec, p: SurfacePoint, fan_size: int = 512,
                    h: float = None, merge_tol: float = None) -> CutLocusTree:
    """Assemble the cut-locus tree of p from a dense fan.

    fan_size below 256 is refused; a cycle in the clustered graph raises
    CutLocusResolutionError (raise fan_size to fix).
    """
    if fan_size < 256:
        raise ValueError("fan_size must be at least 256")
    if h is None:
        h = default_step(spec)
    if merge_tol is None:
        merge_tol = 3.0 * h
    fan = fanfield.cut_time_fan(spec, p.uv, p.chart, n_rays=fan_size,
                                merge_tol=merge_tol, substep=0.75 * merge_tol)
    ridge = fan.cut_xyz
    n = fan_size

    # single point: every ridge point in one tight cluster
    centroid = ridge.mean(axis=0)
    spread = np.linalg.norm(ridge - centroid, axis=1).max()
    if spread < 5.0 * merge_tol:
        conj_frac = float((fan.partner == CONJ).mean())
        pos = SurfacePoint.from_xyz(spec, centroid)
        seg = _polish_minimizer(spec, p, pos.xyz, float(fan.angles[0]),
                                float(fan.t_cut[0]), h)
        vertex = TreeVertex(position=pos, degree=1, minimizers=[seg],
                            conjugate=conj_frac > 0.5)
        return CutLocusTree(p=p, vertices=[vertex], edges=[],
                            is_single_point=True,
                            infinite_family=conj_frac > 0.5,
                            fan=fan, fan_size=fan_size, merge_tol=merge_tol)

    # Identify ridge points that sample the same tree point.  The fan trace
    # walks each edge once per flank; fold pairs arrive transversally from
    # opposite flanks, while successive points along one flank arrive nearly
    # parallel and must never unite (that would collapse the edge into a
    # blob).  Conjugate tips arrive parallel too, so those short bands fold
    # positionally instead.
    find, union = _union_find(n)
    d2 = ((ridge[:, None, :] - ridge[None, :, :]) ** 2).sum(-1)
    dt_ok = np.abs(fan.t_cut[:, None] - fan.t_cut[None, :]) < 6.0 * merge_tol
    fold_tol = 1.3 * merge_tol
    is_conj = fan.partner == CONJ
    both_conj = is_conj[:, None] & is_conj[None, :]
    k_cut = np.clip((fan.t_cut / fan.dt).astype(int), 1,
                    fan.trace.trace_xyz.shape[1] - 2)
    rows = np.arange(n)
    dirs = fan.trace.trace_xyz[rows, k_cut + 1] - fan.trace.trace_xyz[rows, k_cut - 1]
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    transversal = (dirs @ dirs.T) < math.cos(0.25)
    fold = (d2 < fold_tol * fold_tol) & dt_ok & transversal
    # mutual nearest matching: each ray folds to at most one opposite-flank
    # ray, so overlapping fold windows cannot chain along an edge
    masked = np.where(fold, d2, np.inf)
    best = masked.argmin(axis=1)
    has = np.isfinite(masked[np.arange(n), best])
    for i in range(n):
        if not has[i]:
            continue
        j = int(best[i])
        if has[j] and abs(int(best[j]) - i) <= 1:
            union(i, j)
    # conjugate tips: short bands blob together positionally
    conj_fold = (d2 < fold_tol * fold_tol) & dt_ok & both_conj
    ii, jj = np.nonzero(conj_fold)
    for a, b in zip(ii, jj):
        if a < b:
            union(int(a), int(b))

    labels = np.array([find(i) for i in range(n)])
    uniq, cluster_id = np.unique(labels, return_inverse=True)
    m = len(uniq)
    positions = np.stack([ridge[cluster_id == c].mean(axis=0) for c in range(m)])

    # candidate links from consecutive fan angles, resolved into a spanning
    # tree (shortest links win); a long rejected link would mean a genuine
    # cycle at this resolution
    candidates = set()
    for i in range(n):
        a, b = int(cluster_id[i]), int(cluster_id[(i + 1) % n])
        if a != b:
            candidates.add((min(a, b), max(a, b)))
    weighted = sorted(
        (float(np.linalg.norm(positions[a] - positions[b])), a, b)
        for (a, b) in candidates)
    find_t, union_t = _union_find(m)
    adjacency = {c: set() for c in range(m)}
    kept = 0
    for w, a, b in weighted:
        if find_t(a) != find_t(b):
            union_t(a, b)
            adjacency[a].add(b)
            adjacency[b].add(a)
            kept += 1
        elif w > 5.0 * merge_tol:
            raise CutLocusResolutionError(
                f"cycle of extent {w:.3f} in the cut graph; raise fan_size")
    roots = {find_t(c) for c in range(m)}
    if len(roots) != 1:
        raise CutLocusResolutionError(
            f"cut locus graph disconnected ({len(roots)} components); "
            "raise fan_size")

    # prune spurs: the tip transition zones fray into short stubs of extent
    # a few merge tolerances; contract leaf nodes whose hop to the rest is
    # shorter than the prune length, absorbing their ray members
    members_of = {c: list(np.where(cluster_id == c)[0]) for c in range(m)}
    prune_len = 5.0 * merge_tol
    alive = set(range(m))
    debt = {c: 0.0 for c in range(m)}   # pruned stub length carried inward
    changed = True
    while changed and len(alive) > 1:
        changed = False
        for c in list(alive):
            if c not in alive:
                continue
            nbs = [x for x in adjacency[c] if x in alive]
            if len(nbs) != 1:
                continue
            hop = float(np.linalg.norm(positions[c] - positions[nbs[0]]))
            if debt[c] + hop < prune_len:
                members_of[nbs[0]].extend(members_of[c])
                adjacency[nbs[0]].discard(c)
                alive.discard(c)
                debt[nbs[0]] = max(debt[nbs[0]], debt[c] + hop)
                changed = True

    deg = {c: len([x for x in adjacency[c] if x in alive]) for c in alive}
    vertex_clusters = [c for c in alive if deg[c] != 2]
    if not vertex_clusters:
        raise CutLocusResolutionError("degenerate quotient graph (all degree 2)")
    vidx = {c: k for k, c in enumerate(vertex_clusters)}

    def nbrs(c):
        return [x for x in adjacency[c] if x in alive]

    # walk chains between vertices
    edges = []
    visited = set()
    for c in vertex_clusters:
        for nb in nbrs(c):
            if (c, nb) in visited:
                continue
            chain = [c, nb]
            visited.add((c, nb))
            while deg[chain[-1]] == 2:
                nxt = [x for x in nbrs(chain[-1]) if x != chain[-2]][0]
                chain.append(nxt)
            visited.add((chain[-1], chain[-2]))
            line_xyz = positions[chain]
            t_chart, t_uv = tensor.xyz_to_chart(spec, line_xyz)
            pairs = []
            for cc in chain:
                mem = np.asarray(members_of[cc])
                met = mem[fan.partner[mem] >= 0]
                if len(met):
                    pairs.append((int(met[0]), int(fan.partner[met[0]])))
                else:
                    pairs.append((int(mem[0]), CONJ))
            edges.append(TreeEdge(
                v0=vidx[c], v1=vidx[chain[-1]],
                line=Polyline(t_uv, t_chart, line_xyz),
                ray_pairs=np.array(pairs)))

    # dedupe reversed duplicates
    seen_e = set()
    uniq_edges = []
    for e in edges:
        key = (min(e.v0, e.v1), max(e.v0, e.v1), len(e.line))
        if key in seen_e:
            continue
        seen_e.add(key)
        uniq_edges.append(e)
    edges = uniq_edges

    if not edges and len(vertex_clusters) == 1:
        # the whole locus pruned into one blob: a single (non-conjugate) point
        c = vertex_clusters[0]
        mem = np.asarray(members_of[c])
        pos = SurfacePoint.from_xyz(spec, ridge[mem].mean(axis=0))
        groups = _angle_groups(mem, n)
        minimizers = [
            _polish_minimizer(
                spec, p, pos.xyz,
                float(fan.angles[g[len(g) // 2]]), float(fan.t_cut[g[len(g) // 2]]), h)
            for g in groups]
        conj = bool((fan.partner[mem] == CONJ).mean() > 0.5)
        vertex = TreeVertex(position=pos, degree=len(groups),
                            minimizers=minimizers, conjugate=conj)
        return CutLocusTree(p=p, vertices=[vertex], edges=[],
                            is_single_point=True, infinite_family=conj,
                            fan=fan, fan_size=fan_size, merge_tol=merge_tol)

    vertices = []
    for c in vertex_clusters:
        mem = np.asarray(members_of[c])
        groups = _angle_groups(mem, n)
        pos = SurfacePoint.from_xyz(spec, positions[c])
        minimizers = []
        for grp in groups:
            pick = grp[int(np.argmin(
                np.linalg.norm(ridge[grp] - positions[c][None, :], axis=1)))]
            seg = _polish_minimizer(spec, p, pos.xyz, float(fan.angles[pick]),
                                    float(fan.t_cut[pick]), h)
            minimizers.append(seg)
        conj = bool((fan.partner[mem] == CONJ).mean() > 0.5)
        vertices.append(TreeVertex(position=pos, degree=len(groups),
                                   minimizers=minimizers, conjugate=conj))

    tree = CutLocusTree(p=p, vertices=vertices, edges=edges,
                        is_single_point=False, infinite_family=False,
                        fan=fan, fan_size=fan_size, merge_tol=merge_tol)
    _audit_tree(tree)
    return tree


def _angle_groups(members: np.ndarray, n: int, gap: int = 3):
    """Split fan-ray indices into circularly contiguous groups."""
    if len(members) == 0:
        return []
    ms = np.sort(members)
    breaks = np.where(np.diff(ms) > gap)[0]
    groups = np.split(ms, breaks + 1)
    # merge across the wrap
    if len(groups) > 1 and (ms[0] + n) - ms[-1] <= gap:
        groups[0] = np.concatenate([groups[-1], groups[0]])
        groups.pop()
    return groups


def _audit_tree(tree: CutLocusTree):
    nv, ne = len(tree.vertices), len(tree.edges)
    if nv - ne != 1:
        raise CutLocusResolutionError(
            f"assembled graph is not a tree: |V|={nv}, |E|={ne}")


@dataclass
class MinimizerQuery:
    segments: list
    infinite_family: bool = False


def minimizing_geodesics_to(spec: MetricSpec, p: SurfacePoint, y: SurfacePoint,
                            tree: CutLocusTree, h: float = None) -> MinimizerQuery:
    """All minimizing geodesics from p to a point on the tree.

    Edge-interior points return exactly two; vertices return their stored
    degree-many; the conjugate single point reports the infinite family.
    """
    if h is None:
        h = default_step(spec)
    where = tree.locate(y.xyz, tol=6.0 * tree.merge_tol)
    if where is None:
        raise ValueError("query point is not on the cut locus tree")
    if tree.is_single_point:
        return MinimizerQuery(segments=list(tree.vertices[0].minimizers),
                              infinite_family=tree.infinite_family)
    if where[0] == "vertex":
        v = tree.vertices[where[1]]
        return MinimizerQuery(segments=list(v.minimizers),
                              infinite_family=False)
    _, ei, k = where
    edge = tree.edges[ei]
    i, j = edge.ray_pairs[k]
    fan = tree.fan
    segs = []
    for ray in (int(i), int(j)):
        if ray == CONJ:
            continue
        segs.append(_polish_minimizer(spec, p, y.xyz, float(fan.angles[ray]),
                                      float(fan.t_cut[ray]), h))
    return MinimizerQuery(segments=segs, infinite_family=False)


def _sphere_arc(n0: np.ndarray, n1: np.ndarray, step: float = 0.02) -> np.ndarray:
    """Unit-sphere great-circle arc between two unit vectors."""
    dot = float(np.clip(n0 @ n1, -1.0, 1.0))
    ang = math.acos(dot)
    if ang < 1e-9:
        return np.stack([n0, n1])
    k = max(2, int(math.ceil(ang / step)))
    ts = np.linspace(0.0, 1.0, k + 1)
    sa = math.sin(ang)
    pts = (np.sin((1 - ts) * ang)[:, None] * n0 + np.sin(ts * ang)[:, None] * n1) / sa
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _param_sphere(xyz: np.ndarray, spec: MetricSpec) -> np.ndarray:
    if spec.kind == "ellipsoid":
        n = xyz / np.asarray(spec.axes)[None, :]
    else:
        n = xyz.copy()
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def crossing_parity(spec: MetricSpec, boundary: DiscreteCurve, x_xyz: np.ndarray,
                    ref_xyz: np.ndarray, guard: float) -> int:
    """Parity of transverse crossings of an x->ref arc with the boundary.

    Works on the parameter sphere so only topology matters.  Points of the
    boundary closer than guard to x make the query ambiguous.
    """
    bn = _param_sphere(boundary.line.xyz, spec)
    xn = _param_sphere(x_xyz[None, :], spec)[0]
    rn = _param_sphere(ref_xyz[None, :], spec)[0]
    if np.linalg.norm(bn - xn[None, :], axis=1).min() < guard:
        raise AmbiguousCountError("boundary passes through the query point")
    arc = _sphere_arc(xn, rn)
    arc_line = Polyline(np.zeros((len(arc), 2)), np.zeros(len(arc), dtype=np.int8), arc)
    bnd_line = Polyline(np.zeros((len(bn), 2)), np.zeros(len(bn), dtype=np.int8), bn)
    hits = cross_intersections(spec, arc_line, bnd_line, tol=1e-4, max_hits=1000)
    return len(hits) % 2


def vertex_count_inside(spec: MetricSpec, boundary: DiscreteCurve,
                        tree: CutLocusTree, ref_outside: SurfacePoint,
                        h: float = None) -> int:
    """Number of tree vertices strictly inside the region bounded by the curve.

    Inside = crossing parity differs from the (outside) reference point.
    """
    if h is None:
        h = default_step(spec)
    count = 0
    for v in tree.vertices:
        parity = crossing_parity(spec, boundary, v.position.xyz,
                                 ref_outside.xyz, guard=3.0 * h)
        if parity == 1:
            count += 1
    return count


def tree_hausdorff(a: CutLocusTree, b: CutLocusTree) -> float:
    """Symmetric Hausdorff distance between the point sets of two trees."""
    pa, pb = a.all_points(), b.all_points()
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
