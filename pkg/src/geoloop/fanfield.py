"""Dense geodesic fans with cut-time detection.

A fan from a base point carries, per ray, the first conjugate time (Jacobi
sign change) and the first equal-length meeting with another ray.  The
minimum of the two is the cut time; the meeting points are the raw material
for the cut-locus tree, for eccentricity (max cut time = distance to the
farthest point), and for the diameter estimate.
"""

from __future__ import annotations

import math

from dataclasses import dataclass

import numpy as np

from . import integrate, tensor
from .errors import CutLocusResolutionError
from .tensor import MetricSpec

CONJ = -1  # partner code for conjugate-capped rays


@dataclass
class FanField:
    """Cut-time data for a fan of geodesics from one base point."""

    base_uv: np.ndarray
    base_chart: int
    angles: np.ndarray        # (N,) frame angles
    t_cut: np.ndarray         # (N,) cut time per ray
    partner: np.ndarray       # (N,) index of the meeting ray, CONJ for conjugate caps
    t_conj: np.ndarray        # (N,) first conjugate time (nan if none seen)
    cut_xyz: np.ndarray       # (N,3) cut point positions
    trace: integrate.ShootResult
    dt: float                 # recording step along each ray

    def ray_polyline(self, i: int, t_stop: float = None):
        """Recorded polyline of ray i up to t_stop (defaults to its cut time)."""
        if t_stop is None:
            t_stop = self.t_cut[i]
        k = int(np.clip(np.floor(t_stop / self.dt), 1, self.trace.trace_uv.shape[1] - 1))
        return (
            self.trace.trace_uv[i, : k + 1].copy(),
            self.trace.trace_chart[i, : k + 1].copy(),
            self.trace.trace_xyz[i, : k + 1].copy(),
        )


def _max_stretch(spec: MetricSpec) -> float:
    """Largest singular value of the parameterization over a dense sample."""
    n_vec = tensor._fibonacci_sphere(512)
    chart = tensor.preferred_chart(n_vec)
    uv = tensor.sphere_to_chart(n_vec, chart)
    _, jac = tensor.emb_jacobian(spec, uv, chart)
    # orthonormalize w.r.t. the round parameter sphere: conformal factor (1+s)/2
    s = np.einsum("ij,ij->i", uv, uv)
    cols = jac * ((1.0 + s) / 2.0)[:, None, None]
    sv = np.linalg.svd(cols, compute_uv=False)
    return float(sv.max())


_STRETCH_CACHE: dict = {}


def length_cap(spec: MetricSpec) -> float:
    """Upper bound for any point-to-point distance on the surface."""
    key = spec
    if key not in _STRETCH_CACHE:
        _STRETCH_CACHE[key] = _max_stretch(spec)
    return float(np.pi * _STRETCH_CACHE[key] * 1.02)


def cut_time_fan(
    spec: MetricSpec,
    base_uv,
    base_chart,
    n_rays: int = 256,
    merge_tol: float = None,
    substep: float = None,
    t_max: float = None,
    strict: bool = True,
) -> FanField:
    """Shoot a fan and find each ray's cut time.

    Meets are tested slice-by-slice on the recorded trajectories; a pair is
    eligible only if its flat-space baseline 2 t sin(theta/2) exceeds four
    merge tolerances, which filters the trivial proximity of nearby rays while
    keeping genuine focusing events (those are conjugate-capped anyway).
    """
    scale = spec.length_scale()
    if merge_tol is None:
        merge_tol = 0.015 * scale
    if t_max is None:
        t_max = length_cap(spec) * 1.05
    if substep is None:
        substep = merge_tol / 2.0
    n_steps = int(np.ceil(t_max / substep))
    angles = np.arange(n_rays) * (2.0 * np.pi / n_rays)
    res = integrate.fan_shoot(
        spec, base_uv, base_chart, angles, np.full(n_rays, t_max), n_steps,
        record=True, jacobi=True, method="rk2",
    )
    dt = t_max / n_steps
    xyz = res.trace_xyz
    t_conj = res.t_conj

    idx = np.arange(n_rays)
    didx = np.abs(idx[:, None] - idx[None, :])
    didx = np.minimum(didx, n_rays - didx)
    base_factor = 2.0 * np.sin(np.pi * didx / n_rays)
    np.fill_diagonal(base_factor, 0.0)

    t_cut = np.where(np.isnan(t_conj), np.inf, t_conj)
    partner = np.full(n_rays, CONJ, dtype=int)
    stride = 2

    cos_min = np.cos(0.25)  # arrival directions closer than this are focusing, not cut
    # meets inside this band before a ray's conjugate time are curvature
    # focusing at tolerance scale, which the conjugate cap already covers
    conj_safe = np.where(np.isnan(t_conj), np.inf, t_conj) - 5.0 * merge_tol
    # meets are point events with closing speed up to 2; capture with a radius
    # wide enough that no minimum can hop over a scan step, then accept on
    # the refined minimum gap
    capture = max(merge_tol, 2.4 * stride * dt)

    def refine(i, j, k):
        # quadratic fit on the SQUARED gap: exact for a transversal crossing,
        # where the gap itself is V-shaped and a direct parabola fit fails.
        # Only a minimum bracketed inside the sample window counts; a minimum
        # beyond it is a still-closing focusing pair, not a crossing.
        ks = np.clip([k - stride, k, k + stride], 0, n_steps)
        q0, q1, q2 = ((xyz[i, ks] - xyz[j, ks]) ** 2).sum(-1)
        denom = q0 - 2 * q1 + q2
        if denom <= 1e-300:
            return None
        shift = stride * 0.5 * (q0 - q2) / denom
        if abs(shift) > 1.01 * stride:
            return None
        qmin = q1 - 0.125 * (q2 - q0) ** 2 / denom
        return (k + shift) * dt, math.sqrt(max(float(qmin), 0.0))

    for k in range(2, n_steps + 1, stride):
        t_k = k * dt
        alive = t_k <= t_cut + stride * dt
        if not np.any(alive):
            break
        rows = np.where(alive)[0]
        p_k = xyz[rows, k]
        gap2 = ((p_k[:, None, :] - p_k[None, :, :]) ** 2).sum(-1)
        eligible = (base_factor[np.ix_(rows, rows)] * t_k) > 4.0 * merge_tol
        before_conj = t_k < conj_safe[rows]
        eligible &= before_conj[:, None] & before_conj[None, :]
        hit = (gap2 < capture * capture) & eligible
        if not hit.any():
            continue
        # transversality: nearly parallel arrivals are curvature focusing and
        # belong to the conjugate cap, not to an equal-length cut meeting
        km = max(k - 1, 0)
        kp = min(k + 1, n_steps)
        dirs = xyz[rows, kp] - xyz[rows, km]
        dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
        dots = dirs @ dirs.T
        hit &= dots < cos_min
        if not hit.any():
            continue
        for a_loc, b_loc in zip(*np.nonzero(hit)):
            a, b = int(rows[a_loc]), int(rows[b_loc])
            if t_k >= t_cut[a] + stride * dt:
                continue
            ref = refine(a, b, k)
            if ref is None:
                continue
            t_star, g_min = ref
            if g_min < merge_tol and t_star < t_cut[a]:
                t_cut[a] = t_star
                partner[a] = b
    # conjugate-capped rays keep t_conj as their cut time
    unresolved = ~np.isfinite(t_cut)
    if np.any(unresolved):
        if strict:
            raise CutLocusResolutionError(
                f"{int(unresolved.sum())} ray(s) reached t_max without cut or conjugate point"
            )
        t_cut[unresolved] = t_max

    # cut positions: meeting midpoints, or the conjugate point on the ray
    frac = np.clip(t_cut / dt, 0, n_steps - 1)
    k0 = frac.astype(int)
    w = (frac - k0)[:, None]
    own = xyz[idx, k0] * (1 - w) + xyz[idx, np.minimum(k0 + 1, n_steps)] * w
    other = xyz[partner, k0] * (1 - w) + xyz[partner, np.minimum(k0 + 1, n_steps)] * w
    cut_xyz = np.where((partner == CONJ)[:, None], own, 0.5 * (own + other))

    return FanField(
        base_uv=np.asarray(base_uv, dtype=float),
        base_chart=int(np.asarray(base_chart).item() if np.ndim(base_chart) else base_chart),
        angles=angles,
        t_cut=t_cut,
        partner=partner,
        t_conj=t_conj,
        cut_xyz=cut_xyz,
        trace=res,
        dt=dt,
    )


def eccentricity(spec: MetricSpec, uv, chart, n_rays: int = 128,
                 merge_tol: float = None, return_farthest: bool = False,
                 polish: bool = True):
    """Distance to the farthest point: the maximum cut time over the fan.

    With polish=True the top candidates are re-solved as boundary value
    problems to their cut points, removing the O(merge_tol) bias of the slice
    scan.  Unpolished values underestimate by at most that bias, which is fine
    for coarse sweeps.
    """
    if merge_tol is None:
        merge_tol = 0.02 * spec.length_scale()
    fan = cut_time_fan(spec, uv, chart, n_rays=n_rays, merge_tol=merge_tol,
                       substep=0.5 * merge_tol)
    if not polish:
        i = int(np.argmax(fan.t_cut))
        if return_farthest:
            return float(fan.t_cut[i]), fan.cut_xyz[i]
        return float(fan.t_cut[i])
    order = np.argsort(fan.t_cut)[::-1][:3]
    cand_xyz = fan.cut_xyz[order]
    t_chart, t_uv = tensor.xyz_to_chart(spec, cand_xyz)
    base_uv = np.repeat(np.asarray(fan.base_uv, float)[None, :], len(order), axis=0)
    base_chart = np.full(len(order), fan.base_chart, dtype=np.int8)
    alpha, length, ok = integrate.solve_bvp_batch(
        spec, base_uv, base_chart, t_uv, t_chart,
        init_alpha=fan.angles[order], init_length=fan.t_cut[order],
    )
    polished = np.where(ok, length, fan.t_cut[order])
    best = int(np.argmax(polished))
    ecc = float(polished.max())
    if return_farthest:
        return ecc, cand_xyz[best]
    return ecc


def polar_distance(fan: FanField, spec: MetricSpec, xyz_query: np.ndarray):
    """Distances base->query via the fan's polar grid.

    Each ray participates only up to its cut time (beyond it the ray is no
    longer minimizing).  Good to O(fan spacing); callers polish with a
    shooting solve when they need better.  Returns (arc position, ray, gap).
    """
    q = np.atleast_2d(xyz_query)
    best = np.full(len(q), np.inf)
    best_ray = np.zeros(len(q), dtype=int)
    best_t = np.zeros(len(q))
    xyz = fan.trace.trace_xyz
    n_rays, n_slices = xyz.shape[0], xyz.shape[1]
    k_cut = np.minimum((fan.t_cut / fan.dt).astype(int) + 1, n_slices - 1)
    slice_idx = np.arange(n_slices)
    chunk = max(1, int(4e6 / (n_slices * max(len(q), 1))))
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        gap = np.linalg.norm(xyz[lo:hi, None, :, :] - q[None, :, None, :], axis=-1)
        masked = slice_idx[None, None, :] > k_cut[lo:hi, None, None]
        gap = np.where(masked, np.inf, gap)
        ray_best_k = gap.argmin(axis=2)
        ray_best = np.take_along_axis(gap, ray_best_k[:, :, None], axis=2)[:, :, 0]
        for r in range(hi - lo):
            upd = ray_best[r] < best
            best[upd] = ray_best[r][upd]
            best_ray[upd] = lo + r
            best_t[upd] = ray_best_k[r][upd] * fan.dt
    return best_t, best_ray, best
