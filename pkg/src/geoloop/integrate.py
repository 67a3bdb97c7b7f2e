"""Batched geodesic integration: shooting, Jacobi fields, and boundary value solving.

The integrator advances many geodesics at once with a classical RK4 scheme on
the first-order system (uv, vel).  Velocity is renormalized to unit Riemannian
speed at the start of every step using the geometry evaluation that the first
RK4 stage needs anyway, so arc length equals integration time at no extra
cost.  Rows switch stereographic charts whenever |uv| grows past the switch
threshold; a single step never comes close to the hard seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import BvpFailureError
from .tensor import MetricSpec, SWITCH_S, metric_norm


@dataclass
class ShootResult:
    """Final states (and optional trace) of a batch of unit-speed geodesics."""

    uv: np.ndarray            # (N,2) final chart coordinates
    chart: np.ndarray         # (N,)
    vel: np.ndarray           # (N,2) final chart velocity (unit speed)
    lengths: np.ndarray       # (N,) arc lengths actually integrated
    trace_uv: np.ndarray = None      # (N,T,2) when recorded
    trace_chart: np.ndarray = None   # (N,T)
    trace_xyz: np.ndarray = None     # (N,T,3)
    t_conj: np.ndarray = None        # (N,) first conjugate arc length (nan if none)
    jacobi: np.ndarray = None        # (N,T) Jacobi field trace when recorded

    def final_xyz(self, spec: MetricSpec) -> np.ndarray:
        return tensor.embed_points(spec, self.uv, self.chart)


def _switch_charts(uv, chart, vel):
    s = np.einsum("ij,ij->i", uv, uv)
    mask = s > SWITCH_S
    if np.any(mask):
        vel[mask] = tensor.transition_velocity(uv[mask], vel[mask])
        uv[mask] = tensor.transition_uv(uv[mask])
        chart[mask] = 1 - chart[mask]
    return uv, chart, vel


def shoot_batch(
    spec: MetricSpec,
    uv0: np.ndarray,
    chart0: np.ndarray,
    vel0: np.ndarray,
    lengths: np.ndarray,
    n_steps: int,
    record: bool = False,
    jacobi: bool = False,
    method: str = "rk4",
) -> ShootResult:
    """Integrate unit-speed geodesics for the requested arc lengths.

    vel0 need not be normalized; it is rescaled to unit Riemannian speed in
    place of trusting the caller.  With jacobi=True the scalar Jacobi equation
    J'' + K J = 0 with J(0)=0, J'(0)=1 rides along and the first sign change
    is reported as t_conj.

    method "rk2" (midpoint, curvature frozen per step for the Jacobi ride) is
    accurate to a few 1e-4 at fan step sizes and roughly halves the cost; the
    cut-locus and eccentricity fans use it.  Everything feeding curve
    replacements stays on "rk4".
    """
    uv = np.atleast_2d(np.asarray(uv0, dtype=float)).copy()
    n = uv.shape[0]
    chart = np.broadcast_to(np.asarray(chart0), (n,)).astype(np.int8).copy()
    vel = np.atleast_2d(np.asarray(vel0, dtype=float)).copy()
    lengths = np.broadcast_to(np.asarray(lengths, dtype=float), (n,)).copy()
    dt = lengths / n_steps

    jf = np.zeros(n)
    jp = np.ones(n)
    t_conj = np.full(n, np.nan)

    if record:
        trace_uv = np.empty((n, n_steps + 1, 2))
        trace_chart = np.empty((n, n_steps + 1), dtype=np.int8)
        trace_uv[:, 0] = uv
        trace_chart[:, 0] = chart
        trace_j = np.zeros((n, n_steps + 1)) if jacobi else None
    else:
        trace_uv = trace_chart = trace_j = None

    want_k = jacobi
    accel = tensor.geodesic_accel

    if method == "rk2":
        for k in range(n_steps):
            d1v, g1, k1 = accel(spec, uv, chart, vel, want_g=True, want_curvature=want_k)
            speed = metric_norm(g1, vel)
            speed = np.where(speed > 0, speed, 1.0)
            vel = vel / speed[:, None]
            d1v = d1v / (speed * speed)[:, None]
            h = dt[:, None]
            v2 = vel + 0.5 * h * d1v
            d2v, _, _ = accel(spec, uv + 0.5 * h * vel, chart, v2)
            uv = uv + h * v2
            vel = vel + h * d2v
            if want_k:
                # midpoint rule with curvature frozen at the step start
                jm = jf + 0.5 * dt * jp
                jpm = jp - 0.5 * dt * k1 * jf
                jf_new = jf + dt * jpm
                jp = jp - dt * k1 * jm
                crossed = (jf > 1e-14) & (jf_new <= 0.0) & np.isnan(t_conj) & (k > 0)
                if np.any(crossed):
                    frac = jf[crossed] / (jf[crossed] - jf_new[crossed])
                    t_conj[crossed] = (k + frac) * dt[crossed]
                jf = jf_new
            uv, chart, vel = _switch_charts(uv, chart, vel)
            if record:
                trace_uv[:, k + 1] = uv
                trace_chart[:, k + 1] = chart
                if jacobi:
                    trace_j[:, k + 1] = jf
        out = ShootResult(uv=uv, chart=chart, vel=vel, lengths=lengths, t_conj=t_conj)
        if record:
            out.trace_uv = trace_uv
            out.trace_chart = trace_chart
            flat_xyz = tensor.embed_points(
                spec, trace_uv.reshape(-1, 2), trace_chart.reshape(-1)
            )
            out.trace_xyz = flat_xyz.reshape(n, n_steps + 1, 3)
            out.jacobi = trace_j
        return out

    for k in range(n_steps):
        d1v, g1, k1 = accel(spec, uv, chart, vel, want_g=True, want_curvature=want_k)
        speed = metric_norm(g1, vel)
        speed = np.where(speed > 0, speed, 1.0)
        vel = vel / speed[:, None]
        d1v = d1v / (speed * speed)[:, None]  # acceleration is quadratic in velocity

        h = dt[:, None]
        v2 = vel + 0.5 * h * d1v
        d2v, _, k2 = accel(spec, uv + 0.5 * h * vel, chart, v2, want_curvature=want_k)
        v3 = vel + 0.5 * h * d2v
        d3v, _, k3 = accel(spec, uv + 0.5 * h * v2, chart, v3, want_curvature=want_k)
        v4 = vel + h * d3v
        d4v, _, k4 = accel(spec, uv + h * v3, chart, v4, want_curvature=want_k)

        uv = uv + h / 6.0 * (vel + 2.0 * v2 + 2.0 * v3 + v4)
        if want_k:
            # Jacobi RK4 sharing the curvature stage values
            d1j, d1jp = jp, -k1 * jf
            j2, jp2 = jf + 0.5 * dt * d1j, jp + 0.5 * dt * d1jp
            d2j, d2jp = jp2, -k2 * j2
            j3, jp3 = jf + 0.5 * dt * d2j, jp + 0.5 * dt * d2jp
            d3j, d3jp = jp3, -k3 * j3
            j4, jp4 = jf + dt * d3j, jp + dt * d3jp
            d4j, d4jp = jp4, -k4 * j4
            jf_new = jf + dt / 6.0 * (d1j + 2.0 * d2j + 2.0 * d3j + d4j)
            jp = jp + dt / 6.0 * (d1jp + 2.0 * d2jp + 2.0 * d3jp + d4jp)
            crossed = (jf > 1e-14) & (jf_new <= 0.0) & np.isnan(t_conj) & (k > 0)
            if np.any(crossed):
                frac = jf[crossed] / (jf[crossed] - jf_new[crossed])
                t_conj[crossed] = (k + frac) * dt[crossed]
            jf = jf_new
        vel = vel + h / 6.0 * (d1v + 2.0 * d2v + 2.0 * d3v + d4v)

        uv, chart, vel = _switch_charts(uv, chart, vel)

        if record:
            trace_uv[:, k + 1] = uv
            trace_chart[:, k + 1] = chart
            if jacobi:
                trace_j[:, k + 1] = jf

    out = ShootResult(uv=uv, chart=chart, vel=vel, lengths=lengths, t_conj=t_conj)
    if record:
        out.trace_uv = trace_uv
        out.trace_chart = trace_chart
        flat_xyz = tensor.embed_points(
            spec, trace_uv.reshape(-1, 2), trace_chart.reshape(-1)
        )
        out.trace_xyz = flat_xyz.reshape(n, n_steps + 1, 3)
        out.jacobi = trace_j
    return out


# ----------------------------------------------------------------------------
# orthonormal frames and angle fans
# ----------------------------------------------------------------------------

def frame_basis(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray):
    """g-orthonormal chart basis (e1, e2) at each point, plus ambient 3x2 frame.

    e1 points along the first chart axis; e2 completes it counterclockwise in
    the chart orientation.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    chart = np.atleast_1d(np.asarray(chart))
    xyz, jac = tensor.emb_jacobian(spec, uv, chart)
    g = np.einsum("nia,nib->nab", jac, jac)
    e1 = np.zeros_like(uv)
    e1[:, 0] = 1.0 / np.sqrt(g[:, 0, 0])
    raw = np.stack([-g[:, 0, 1], g[:, 0, 0]], axis=1)
    e2 = raw / metric_norm(g, raw)[:, None]
    amb1 = np.einsum("nia,na->ni", jac, e1)
    amb2 = np.einsum("nia,na->ni", jac, e2)
    return e1, e2, xyz, np.stack([amb1, amb2], axis=2)


def direction_from_angle(e1: np.ndarray, e2: np.ndarray, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return np.cos(alpha)[:, None] * e1 + np.sin(alpha)[:, None] * e2


def angle_of_direction(spec: MetricSpec, uv, chart, vec) -> np.ndarray:
    """Frame angle of chart vectors at their base points."""
    uv = np.atleast_2d(uv)
    g = tensor.metric_g(spec, uv, np.atleast_1d(chart))
    e1 = np.zeros_like(uv)
    e1[:, 0] = 1.0 / np.sqrt(g[:, 0, 0])
    raw = np.stack([-g[:, 0, 1], g[:, 0, 0]], axis=1)
    e2 = raw / metric_norm(g, raw)[:, None]
    vec = np.atleast_2d(vec)
    a = np.einsum("nab,na,nb->n", g, vec, e1)
    b = np.einsum("nab,na,nb->n", g, vec, e2)
    return np.arctan2(b, a)


def fan_shoot(
    spec: MetricSpec,
    base_uv,
    base_chart,
    angles: np.ndarray,
    lengths,
    n_steps: int,
    record: bool = True,
    jacobi: bool = False,
    method: str = "rk4",
) -> ShootResult:
    """Shoot one geodesic per frame angle from a common base point."""
    angles = np.asarray(angles, dtype=float)
    n = len(angles)
    uv0 = np.broadcast_to(np.asarray(base_uv, dtype=float), (n, 2))
    chart0 = np.broadcast_to(np.asarray(base_chart), (n,))
    e1, e2, _, _ = frame_basis(spec, uv0[:1], chart0[:1])
    e1 = np.broadcast_to(e1, (n, 2))
    e2 = np.broadcast_to(e2, (n, 2))
    vel0 = direction_from_angle(e1, e2, angles)
    return shoot_batch(spec, uv0, chart0, vel0, lengths, n_steps,
                       record=record, jacobi=jacobi, method=method)


# ----------------------------------------------------------------------------
# boundary value problems by shooting
# ----------------------------------------------------------------------------

def _target_frames(spec, target_uv, target_chart):
    _, _, xyz, amb = frame_basis(spec, target_uv, target_chart)
    return xyz, amb


def _bvp_steps(max_len: float, scale: float, coarse: bool) -> int:
    per = 0.08 if coarse else 0.02
    return int(np.clip(np.ceil(max_len / (per * scale)), 8, 160))


def solve_bvp_batch(
    spec: MetricSpec,
    start_uv,
    start_chart,
    target_uv,
    target_chart,
    init_alpha=None,
    init_length=None,
    newton_iters: int = 7,
    tol: float = None,
    fallback: bool = True,
    allow_degenerate: bool = True,
):
    """Find (frame angle, arc length) so geodesics from starts hit targets.

    Returns (alpha, length, ok); rows that fail even after the scan fallback
    report ok=False.  Misses are measured in the ambient tangent plane at the
    target, which keeps the iteration chart-free.
    """
    start_uv = np.atleast_2d(np.asarray(start_uv, dtype=float))
    n = start_uv.shape[0]
    start_chart = np.broadcast_to(np.asarray(start_chart), (n,)).astype(np.int8)
    target_uv = np.atleast_2d(np.asarray(target_uv, dtype=float))
    target_chart = np.broadcast_to(np.asarray(target_chart), (n,)).astype(np.int8)
    scale = spec.length_scale()
    if tol is None:
        tol = 1e-8 * scale

    e1, e2, start_xyz, _ = frame_basis(spec, start_uv, start_chart)
    target_xyz, target_frame = _target_frames(spec, target_uv, target_chart)

    if init_alpha is None or init_length is None:
        # chord initialization in the start chart
        tuv = target_uv.copy()
        differ = target_chart != start_chart
        if np.any(differ):
            tuv[differ] = tensor.transition_uv(target_uv[differ])
        delta = tuv - start_uv
        g = tensor.metric_g(spec, start_uv, start_chart)
        a = np.einsum("nab,na,nb->n", g, delta, e1)
        b = np.einsum("nab,na,nb->n", g, delta, e2)
        alpha = np.arctan2(b, a) if init_alpha is None else np.asarray(init_alpha, float).copy()
        length = (
            np.linalg.norm(target_xyz - start_xyz, axis=1)
            if init_length is None
            else np.asarray(init_length, float).copy()
        )
    else:
        alpha = np.asarray(init_alpha, dtype=float).copy()
        length = np.asarray(init_length, dtype=float).copy()
    length = np.maximum(length, 1e-9 * scale)

    ok = np.zeros(n, dtype=bool)
    if allow_degenerate:
        point_rows = np.linalg.norm(target_xyz - start_xyz, axis=1) < 1e-13 * scale
        ok |= point_rows
        length[point_rows] = 0.0

    def miss(rows, al, ln, coarse, with_slope=True):
        n_steps = _bvp_steps(float(ln.max(initial=0.0)) + 1e-9, scale, coarse)
        vel = direction_from_angle(e1[rows], e2[rows], al)
        res = shoot_batch(spec, start_uv[rows], start_chart[rows], vel, ln, n_steps)
        end_xyz, end_jac = tensor.emb_jacobian(spec, res.uv, res.chart)
        gap = end_xyz - target_xyz[rows]
        f = np.einsum("nik,ni->nk", target_frame[rows], gap)
        if not with_slope:
            return f, None, np.linalg.norm(gap, axis=1)
        amb_vel = np.einsum("nia,na->ni", end_jac, res.vel)
        fl = np.einsum("nik,ni->nk", target_frame[rows], amb_vel)
        return f, fl, np.linalg.norm(gap, axis=1)

    def newton_pass(rows_mask, iters, coarse, clip_a, clip_l):
        d_alpha = 1e-6
        for it in range(iters):
            rows = np.where(rows_mask)[0]
            if len(rows) == 0:
                return
            f0, f_l, gap = miss(rows, alpha[rows], length[rows], coarse)
            if not coarse:
                done = gap < tol
                ok[rows[done]] = True
                rows_mask[rows[done]] = False
                rows = rows[~done]
                if len(rows) == 0:
                    return
                f0, f_l = f0[~done], f_l[~done]
            f1, _, _ = miss(rows, alpha[rows] + d_alpha, length[rows], coarse,
                            with_slope=False)
            f_a = (f1 - f0) / d_alpha
            det = f_a[:, 0] * f_l[:, 1] - f_a[:, 1] * f_l[:, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            da = np.clip((-f0[:, 0] * f_l[:, 1] + f0[:, 1] * f_l[:, 0]) / det,
                         -clip_a, clip_a)
            dl = (-f_a[:, 0] * f0[:, 1] + f_a[:, 1] * f0[:, 0]) / det
            dl = np.clip(dl, -clip_l * length[rows], clip_l * length[rows] + 0.1 * scale)
            alpha[rows] += da
            length[rows] = np.maximum(length[rows] + dl, 1e-9 * scale)

    active = ~ok
    coarse_iters = min(3, newton_iters)
    newton_pass(active, coarse_iters, True, 0.6, 0.5)
    newton_pass(active, newton_iters - coarse_iters, False, 0.4, 0.4)
    if np.any(active):
        rows = np.where(active)[0]
        _, _, gap = miss(rows, alpha[rows], length[rows], False, with_slope=False)
        newly = gap < tol
        ok[rows[newly]] = True
        active[rows[newly]] = False

    if fallback and np.any(active):
        rows = np.where(active)[0]
        offsets = np.linspace(-np.pi, np.pi, 73)
        best_alpha = alpha[rows].copy()
        best_gap = np.full(len(rows), np.inf)
        for off in offsets:
            _, _, gap = miss(rows, alpha[rows] + off, length[rows], True,
                             with_slope=False)
            better = gap < best_gap
            best_gap[better] = gap[better]
            best_alpha[better] = alpha[rows[better]] + off
        alpha[rows] = best_alpha
        newton_pass(active, 3, True, 0.3, 0.4)
        newton_pass(active, 6, False, 0.3, 0.4)
        if np.any(active):
            rows = np.where(active)[0]
            _, _, gap = miss(rows, alpha[rows], length[rows], False, with_slope=False)
            newly = gap < tol
            ok[rows[newly]] = True
            active[rows[newly]] = False

    return alpha, length, ok


def require_bvp(alpha, length, ok, context: str):
    if not np.all(ok):
        bad = int(np.count_nonzero(~ok))
        raise BvpFailureError(f"{context}: shooting failed to converge for {bad} row(s)")
    return alpha, length
