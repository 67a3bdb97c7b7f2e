"""Surface points, tangent vectors, geodesic segments, and global metric queries.

This is the user-facing layer over the tensor/integrate kernels: everything
here validates its inputs and returns immutable value objects that are safe
to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fanfield, integrate, tensor
from .errors import BvpFailureError, IntegrationAccuracyError
from .tensor import MetricSpec, NORTH, SOUTH

TOL_SURFACE = 1e-9
TOL_GEODESIC = 1e-6
TOL_DIST = 1e-4


def default_step(spec: MetricSpec, diameter: float = None) -> float:
    """Default polyline step: diameter / 512."""
    d = diameter if diameter is not None else math.pi * spec.length_scale()
    return d / 512.0


# ----------------------------------------------------------------------------
# value types
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfacePoint:
    """A point carried in chart coordinates and in the ambient embedding."""

    chart: int
    uv: np.ndarray
    xyz: np.ndarray

    @staticmethod
    def make(spec: MetricSpec, chart: int, uv) -> "SurfacePoint":
        uv = np.asarray(uv, dtype=float).reshape(2)
        xyz = tensor.embed_points(spec, uv[None, :], np.array([chart]))[0]
        return SurfacePoint(chart=int(chart), uv=uv, xyz=xyz)

    @staticmethod
    def from_xyz(spec: MetricSpec, xyz) -> "SurfacePoint":
        xyz = np.asarray(xyz, dtype=float).reshape(3)
        chart, uv = tensor.xyz_to_chart(spec, xyz[None, :])
        return SurfacePoint.make(spec, int(chart[0]), uv[0])

    @staticmethod
    def pole(spec: MetricSpec, which: str = "north") -> "SurfacePoint":
        chart = NORTH if which == "north" else SOUTH
        return SurfacePoint.make(spec, chart, (0.0, 0.0))

    def validate(self, spec: MetricSpec, tol: float = TOL_SURFACE):
        back = tensor.embed_points(spec, self.uv[None, :], np.array([self.chart]))[0]
        gap = float(np.linalg.norm(back - self.xyz))
        if gap > tol * spec.length_scale():
            raise ValueError(f"chart/xyz mismatch {gap:.2e} exceeds tol_surface")
        return self

    def uv_in_chart(self, chart: int) -> np.ndarray:
        if chart == self.chart:
            return self.uv.copy()
        return tensor.transition_uv(self.uv[None, :])[0]


@dataclass(frozen=True)
class TangentVector:
    """Chart-coordinate tangent vector at a surface point."""

    base: SurfacePoint
    components: np.ndarray

    def norm(self, spec: MetricSpec) -> float:
        g = tensor.metric_g(spec, self.base.uv[None, :], np.array([self.base.chart]))[0]
        return float(math.sqrt(self.components @ g @ self.components))

    def normalized(self, spec: MetricSpec) -> "TangentVector":
        n = self.norm(spec)
        if n == 0:
            raise ValueError("cannot normalize the zero vector")
        return TangentVector(self.base, self.components / n)

    @staticmethod
    def from_frame_angle(spec: MetricSpec, base: SurfacePoint, angle: float) -> "TangentVector":
        e1, e2, _, _ = integrate.frame_basis(spec, base.uv[None, :], np.array([base.chart]))
        comp = math.cos(angle) * e1[0] + math.sin(angle) * e2[0]
        return TangentVector(base, comp)


class Polyline:
    """Compact array-of-points carrier shared by curves and segments."""

    __slots__ = ("uv", "chart", "xyz")

    def __init__(self, uv: np.ndarray, chart: np.ndarray, xyz: np.ndarray):
        self.uv = np.atleast_2d(np.asarray(uv, dtype=float))
        self.chart = np.atleast_1d(np.asarray(chart)).astype(np.int8)
        self.xyz = np.atleast_2d(np.asarray(xyz, dtype=float))

    @staticmethod
    def from_uv(spec: MetricSpec, uv, chart) -> "Polyline":
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        chart = np.broadcast_to(np.asarray(chart), (uv.shape[0],))
        return Polyline(uv, chart, tensor.embed_points(spec, uv, chart))

    @staticmethod
    def from_points(points) -> "Polyline":
        return Polyline(
            np.stack([p.uv for p in points]),
            np.array([p.chart for p in points]),
            np.stack([p.xyz for p in points]),
        )

    def __len__(self):
        return self.uv.shape[0]

    def point(self, i: int) -> SurfacePoint:
        return SurfacePoint(int(self.chart[i]), self.uv[i].copy(), self.xyz[i].copy())

    def reversed(self) -> "Polyline":
        return Polyline(self.uv[::-1].copy(), self.chart[::-1].copy(), self.xyz[::-1].copy())

    def slice(self, i0: int, i1: int) -> "Polyline":
        return Polyline(self.uv[i0:i1].copy(), self.chart[i0:i1].copy(), self.xyz[i0:i1].copy())

    def copy(self) -> "Polyline":
        return Polyline(self.uv.copy(), self.chart.copy(), self.xyz.copy())

    @staticmethod
    def concatenate(parts) -> "Polyline":
        """Join parts, dropping duplicated junction points."""
        uvs, charts, xyzs = [], [], []
        for k, part in enumerate(parts):
            if len(part) == 0:
                continue
            s = 0
            if uvs and np.linalg.norm(xyzs[-1][-1] - part.xyz[0]) < 1e-12:
                s = 1
            if s < len(part):
                uvs.append(part.uv[s:])
                charts.append(part.chart[s:])
                xyzs.append(part.xyz[s:])
        return Polyline(np.concatenate(uvs), np.concatenate(charts), np.concatenate(xyzs))

    def edge_segments_common_chart(self):
        """Per-edge (uv_a, uv_b, chart) with both ends in the first end's chart."""
        a_uv = self.uv[:-1]
        a_chart = self.chart[:-1]
        b_uv = self.uv[1:].copy()
        differ = self.chart[1:] != a_chart
        if np.any(differ):
            b_uv[differ] = tensor.transition_uv(self.uv[1:][differ])
        return a_uv, b_uv, a_chart

    def edge_lengths(self, spec: MetricSpec) -> np.ndarray:
        """Riemannian edge lengths by two-point Gauss quadrature on chart chords."""
        if len(self) < 2:
            return np.zeros(0)
        a_uv, b_uv, chart = self.edge_segments_common_chart()
        delta = b_uv - a_uv
        t1 = 0.5 - 0.5 / math.sqrt(3.0)
        t2 = 0.5 + 0.5 / math.sqrt(3.0)
        q = np.concatenate([a_uv + t1 * delta, a_uv + t2 * delta])
        ch = np.concatenate([chart, chart])
        g = tensor.metric_g(spec, q, ch)
        dd = np.concatenate([delta, delta])
        sp = np.sqrt(np.einsum("nab,na,nb->n", g, dd, dd))
        m = len(delta)
        return 0.5 * (sp[:m] + sp[m:])

    def length(self, spec: MetricSpec) -> float:
        return float(self.edge_lengths(spec).sum())


@dataclass(frozen=True)
class GeodesicSegment:
    """Discrete geodesic with its arc length and integration defect."""

    line: Polyline
    arc_length: float
    residual: float

    @property
    def start(self) -> SurfacePoint:
        return self.line.point(0)

    @property
    def end(self) -> SurfacePoint:
        return self.line.point(len(self.line) - 1)

    def reversed(self) -> "GeodesicSegment":
        return GeodesicSegment(self.line.reversed(), self.arc_length, self.residual)


# ----------------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------------

def metric_at(spec: MetricSpec, x: SurfacePoint):
    """Metric tensor and Christoffel symbols at x (chart-coordinate indices)."""
    return tensor.metric_at(spec, x)


def _record_to_polyline(spec: MetricSpec, res: integrate.ShootResult, row: int) -> Polyline:
    return Polyline(res.trace_uv[row], res.trace_chart[row], res.trace_xyz[row])


def shoot_geodesic(spec: MetricSpec, start: TangentVector, arc_length: float,
                   step: float = None, check: bool = True) -> GeodesicSegment:
    """Exponential map along a unit tangent, recorded as a polyline.

    The residual is a Richardson estimate: the sup distance to a half-step
    re-integration.  A residual above TOL_GEODESIC raises.
    """
    if step is None:
        step = default_step(spec)
    if arc_length == 0.0:
        line = Polyline(start.base.uv[None, :], np.array([start.base.chart]),
                        start.base.xyz[None, :])
        return GeodesicSegment(line, 0.0, 0.0)
    if arc_length < 0 or step <= 0:
        raise ValueError("arc_length and step must be positive")
    n_steps = max(2, int(math.ceil(arc_length / step)))
    uv0 = start.base.uv[None, :]
    ch0 = np.array([start.base.chart])
    vel0 = start.components[None, :]
    res = integrate.shoot_batch(spec, uv0, ch0, vel0, np.array([arc_length]),
                                n_steps, record=True)
    line = _record_to_polyline(spec, res, 0)
    residual = 0.0
    if check:
        fine = integrate.shoot_batch(spec, uv0, ch0, vel0, np.array([arc_length]),
                                     2 * n_steps, record=True)
        residual = float(
            np.linalg.norm(fine.trace_xyz[0, ::2] - res.trace_xyz[0], axis=1).max()
        )
        if residual > TOL_GEODESIC * spec.length_scale():
            raise IntegrationAccuracyError(
                f"residual {residual:.2e} above tol_geodesic; reduce step"
            )
    return GeodesicSegment(line, float(arc_length), residual)


def connect_in_ball(spec: MetricSpec, center: SurfacePoint, radius: float,
                    x: SurfacePoint, y: SurfacePoint, step: float = None) -> GeodesicSegment:
    """Unique minimizing geodesic between two points of a totally normal ball."""
    if step is None:
        step = default_step(spec)
    gap = float(np.linalg.norm(x.xyz - y.xyz))
    if gap < 1e-13 * spec.length_scale():
        line = Polyline(x.uv[None, :], np.array([x.chart]), x.xyz[None, :])
        return GeodesicSegment(line, 0.0, 0.0)
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, x.uv[None, :], np.array([x.chart]), y.uv[None, :], np.array([y.chart])
    )
    if not ok[0]:
        raise BvpFailureError("connect_in_ball shooting failed; shrink the ball radius")
    if length[0] > 2.0 * radius * (1.0 + 0.35):
        raise BvpFailureError(
            f"connecting geodesic of length {length[0]:.3f} is not a plausible "
            f"in-ball minimizer for radius {radius:.3f}"
        )
    e1, e2, _, _ = integrate.frame_basis(spec, x.uv[None, :], np.array([x.chart]))
    vel0 = integrate.direction_from_angle(e1, e2, alpha[:1])
    n_steps = max(2, int(math.ceil(length[0] / step)))
    res = integrate.shoot_batch(spec, x.uv[None, :], np.array([x.chart]), vel0,
                                length[:1], n_steps, record=True)
    line = _record_to_polyline(spec, res, 0)
    # snap the far endpoint onto y (closes the shooting tolerance)
    line.uv[-1] = y.uv_in_chart(int(line.chart[-1]))
    line.xyz[-1] = y.xyz
    residual = float(np.linalg.norm(line.xyz[-1] - res.trace_xyz[0, -1]))
    return GeodesicSegment(line, float(length[0]), residual)


def distance(spec: MetricSpec, x: SurfacePoint, y: SurfacePoint,
             n_fan: int = 64) -> float:
    """Global Riemannian distance via a coarse fan and a polished shot."""
    gap = float(np.linalg.norm(x.xyz - y.xyz))
    if gap < 1e-13 * spec.length_scale():
        return 0.0
    cap = fanfield.length_cap(spec)
    sub = 0.01 * spec.length_scale() * math.pi
    n_steps = int(math.ceil(cap / sub))
    angles = np.arange(n_fan) * (2.0 * math.pi / n_fan)
    res = integrate.fan_shoot(spec, x.uv, x.chart, angles, np.full(n_fan, cap),
                              n_steps, record=True, method="rk2")
    gaps = np.linalg.norm(res.trace_xyz - y.xyz[None, None, :], axis=2)
    i, k = np.unravel_index(np.argmin(gaps), gaps.shape)
    t_best = k * cap / n_steps
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, x.uv[None, :], np.array([x.chart]), y.uv[None, :], np.array([y.chart]),
        init_alpha=np.array([angles[i]]), init_length=np.array([max(t_best, 1e-6)]),
    )
    if not ok[0]:
        # fall back to the fan estimate plus the residual chord
        return float(t_best + gaps[i, k])
    return float(length[0])


def _halton(i: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(len(i), dtype=float)
    f = 1.0
    ii = i.copy() + 1
    while np.any(ii > 0):
        f /= base
        out += f * (ii % base)
        ii //= base
    return out


def diameter_sources(n: int) -> np.ndarray:
    """Prefix-nested quasi-uniform unit vectors (Halton on the sphere)."""
    i = np.arange(n)
    z = 1.0 - 2.0 * _halton(i, 2)
    phi = 2.0 * math.pi * _halton(i, 3)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def estimate_diameter(spec: MetricSpec, n_samples: int = 64, n_rays: int = 96) -> float:
    """Max eccentricity over a nested quasi-uniform source set, plus a hill climb.

    The climb always starts from the best of the first 64 sources, so reruns
    with nested samples are monotone nondecreasing by construction.
    """
    if n_samples < 64:
        raise ValueError("n_samples must be at least 64")
    dirs = diameter_sources(n_samples)
    chart = tensor.preferred_chart(dirs)
    uv = tensor.sphere_to_chart(dirs, chart)
    eccs = np.array([
        fanfield.eccentricity(spec, uv[i], chart[i], n_rays=n_rays)
        for i in range(n_samples)
    ])
    best64 = int(np.argmax(eccs[:64]))
    best = float(eccs.max())
    # deterministic pattern climb from the fixed best-of-64 start
    here_uv, here_chart = uv[best64].copy(), int(chart[best64])
    here = float(eccs[best64])
    step = 0.15 * spec.length_scale()
    e1, e2, _, _ = integrate.frame_basis(spec, here_uv[None, :], np.array([here_chart]))
    stale = 0
    for _ in range(14):
        if step < 4e-3 * spec.length_scale() or stale >= 4:
            break
        probes = []
        for a in range(6):
            ang = a * math.pi / 3.0
            vel = math.cos(ang) * e1[0] + math.sin(ang) * e2[0]
            res = integrate.shoot_batch(spec, here_uv[None, :], np.array([here_chart]),
                                        vel[None, :], np.array([step]), 8)
            probes.append((res.uv[0], int(res.chart[0])))
        vals = [fanfield.eccentricity(spec, puv, pch, n_rays=64) for puv, pch in probes]
        j = int(np.argmax(vals))
        if vals[j] > here:
            here = vals[j]
            here_uv, here_chart = probes[j][0].copy(), probes[j][1]
            e1, e2, _, _ = integrate.frame_basis(spec, here_uv[None, :],
                                                 np.array([here_chart]))
            stale = 0
        else:
            step *= 0.5
            stale += 1
    return float(max(best, here))


def normal_ball_radius(spec: MetricSpec, x: SurfacePoint, n_rays: int = 64) -> float:
    """Conservative totally-normal radius at x.

    0.45 times the first cut/conjugate time of a fan from x, verified by
    re-fanning from six perimeter points; shrinks by 0.8 until the doubled
    radius stays clear of every perimeter fan's cut time.
    """
    cap = fanfield.length_cap(spec)
    fan = fanfield.cut_time_fan(spec, x.uv, x.chart, n_rays=n_rays,
                                t_max=0.75 * cap, strict=False)
    r = 0.45 * float(fan.t_cut.min())
    for _ in range(3):
        ok = True
        for a in range(6):
            tv = TangentVector.from_frame_angle(spec, x, a * math.pi / 3.0)
            res = integrate.shoot_batch(spec, x.uv[None, :], np.array([x.chart]),
                                        tv.components[None, :], np.array([r]), 12)
            sub = fanfield.cut_time_fan(spec, res.uv[0], int(res.chart[0]),
                                        n_rays=32, t_max=min(2.6 * r, 0.9 * cap),
                                        strict=False)
            if float(sub.t_cut.min()) < 2.0 * r:
                ok = False
                break
        if ok:
            return float(r)
        r *= 0.8
    return float(r)
