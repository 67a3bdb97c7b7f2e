"""Metric kernel: chart maps, embeddings, metric tensors and Christoffel symbols.

Every surface handled here is a radial-type embedded 2-sphere parameterized by
the unit sphere.  Points live in one of two stereographic charts (NORTH covers
the upper region, SOUTH the lower; the seam overlap is generous) and all
derivatives are obtained by pushing second-order jets through the chart map
and the embedding, so the Christoffel symbols are exact to machine precision.

All heavy entry points are batched over a leading axis: they accept (N,2)
chart coordinates and return stacked tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ChartSeamError

NORTH = 0
SOUTH = 1

# chart switch threshold |uv|^2 and the hard seam limit
SWITCH_S = 1.5 ** 2
SEAM_S = 3.0 ** 2


# ----------------------------------------------------------------------------
# metric specification
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSpec:
    """Concrete Riemannian 2-sphere: round, ellipsoid, or radially bumpy sphere.

    kind is one of "round", "ellipsoid", "bumpy".  For "bumpy" the radial
    function is radius * (1 + sum(amp * Y_lm)) with real orthonormal
    spherical harmonics; amplitudes must keep it strictly positive.
    """

    kind: str
    radius: float = 1.0
    axes: tuple = (1.0, 1.0, 1.0)
    harmonics: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("round", "ellipsoid", "bumpy"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind in ("round", "bumpy") and not self.radius > 0:
            raise ValueError("radius must be strictly positive")
        if self.kind == "ellipsoid":
            if len(self.axes) != 3 or not all(a > 0 for a in self.axes):
                raise ValueError("ellipsoid needs three strictly positive semi-axes")
        if self.kind == "bumpy":
            for (ell, m, amp) in self.harmonics:
                if not (1 <= int(ell) <= 8 and abs(int(m)) <= int(ell)):
                    raise ValueError(f"harmonic degree/order ({ell},{m}) out of range")
                if not np.isfinite(amp):
                    raise ValueError("harmonic amplitude must be finite")
            r = _bumpy_radial_values(self, _fibonacci_sphere(4096))
            if r.min() <= 0.05 * self.radius:
                raise ValueError("bumpy perturbation too large: radial function near zero")

    # -- constructors ---------------------------------------------------------

    @staticmethod
    def round(radius: float = 1.0) -> "MetricSpec":
        return MetricSpec(kind="round", radius=float(radius))

    @staticmethod
    def ellipsoid(a: float, b: float, c: float) -> "MetricSpec":
        return MetricSpec(kind="ellipsoid", axes=(float(a), float(b), float(c)))

    @staticmethod
    def bumpy(radius: float, harmonics) -> "MetricSpec":
        return MetricSpec(
            kind="bumpy",
            radius=float(radius),
            harmonics=tuple((int(l), int(m), float(a)) for (l, m, a) in harmonics),
        )

    def length_scale(self) -> float:
        """Characteristic length, used to scale tolerances."""
        if self.kind == "ellipsoid":
            return float(max(self.axes))
        return float(self.radius)

    def to_config(self) -> dict:
        if self.kind == "round":
            return {"kind": "round", "radius": self.radius}
        if self.kind == "ellipsoid":
            return {"kind": "ellipsoid", "axes": list(self.axes)}
        return {
            "kind": "bumpy",
            "radius": self.radius,
            "harmonics": [list(h) for h in self.harmonics],
        }

    @staticmethod
    def from_config(cfg: dict) -> "MetricSpec":
        kind = cfg.get("kind")
        if kind == "round":
            return MetricSpec.round(cfg["radius"])
        if kind == "ellipsoid":
            return MetricSpec.ellipsoid(*cfg["axes"])
        if kind == "bumpy":
            return MetricSpec.bumpy(cfg["radius"], cfg["harmonics"])
        raise ValueError(f"unknown metric kind {kind!r}")


def _fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors; deterministic."""
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _real_sph_harm(x, y, z, ell: int, m: int, n_batch: int):
    """Real orthonormal spherical harmonic as a polynomial in unit x, y, z.

    Works on plain arrays and on jets alike; the recursion only uses ring
    operations.  No Condon-Shortley phase.
    """
    am = abs(m)
    # sectorial pair: A_k = Re((x+iy)^k), B_k = Im((x+iy)^k)
    a_k, b_k = 1.0, 0.0
    for _ in range(am):
        a_k, b_k = x * a_k - y * b_k, x * b_k + y * a_k
    # associated Legendre with the (1-z^2)^{m/2} factor stripped
    q_prev = float(_double_factorial(2 * am - 1))
    if ell == am:
        q = q_prev
    else:
        q_curr = (2 * am + 1.0) * z * q_prev
        if ell == am + 1:
            q = q_curr
        else:
            for k in range(am + 2, ell + 1):
                q_next = ((2 * k - 1.0) * (z * q_curr) + (-(k - 1.0 + am)) * q_prev) * (
                    1.0 / (k - am)
                )
                q_prev, q_curr = q_curr, q_next
            q = q_curr
    norm = math.sqrt(
        (2 * ell + 1) / (4.0 * math.pi) * math.factorial(ell - am) / math.factorial(ell + am)
    )
    if m != 0:
        norm *= math.sqrt(2.0)
    base = a_k if m >= 0 else b_k
    out = norm * (q * base) if not isinstance(q, float) else norm * q * base
    if isinstance(out, float):
        out = np.full(n_batch, out)
    return out


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def _bumpy_radial_values(spec: MetricSpec, n_vec: np.ndarray) -> np.ndarray:
    x, y, z = n_vec[:, 0], n_vec[:, 1], n_vec[:, 2]
    r = np.ones(len(n_vec))
    for (ell, m, amp) in spec.harmonics:
        r = r + amp * _real_sph_harm(x, y, z, ell, m, len(n_vec))
    return spec.radius * r


# ----------------------------------------------------------------------------
# chart maps (value-only fast paths)
# ----------------------------------------------------------------------------

def chart_to_sphere(uv: np.ndarray, chart: np.ndarray) -> np.ndarray:
    """Map chart coordinates (N,2) with chart codes (N,) to unit vectors (N,3)."""
    uv = np.atleast_2d(uv)
    s = np.einsum("ij,ij->i", uv, uv)
    d = 1.0 + s
    sign = np.where(np.asarray(chart) == NORTH, 1.0, -1.0)
    return np.stack([2.0 * uv[:, 0] / d, 2.0 * uv[:, 1] / d, sign * (1.0 - s) / d], axis=1)


def sphere_to_chart(n_vec: np.ndarray, chart: np.ndarray) -> np.ndarray:
    """Inverse stereographic projection into the requested chart."""
    n_vec = np.atleast_2d(n_vec)
    sign = np.where(np.asarray(chart) == NORTH, 1.0, -1.0)
    denom = 1.0 + sign * n_vec[:, 2]
    if np.any(denom < 1e-12):
        raise ChartSeamError("point at or beyond the opposite pole of its chart")
    return np.stack([n_vec[:, 0] / denom, n_vec[:, 1] / denom], axis=1)


def preferred_chart(n_vec: np.ndarray) -> np.ndarray:
    return np.where(np.atleast_2d(n_vec)[:, 2] >= 0.0, NORTH, SOUTH).astype(np.int8)


def transition_uv(uv: np.ndarray) -> np.ndarray:
    """Chart transition (same formula both directions): inversion in the unit circle.

    The pole of the source chart (uv = 0) has no image; it maps to a sentinel
    far outside the seam so membership-style consumers treat it as distant.
    """
    uv = np.atleast_2d(uv)
    s = np.einsum("ij,ij->i", uv, uv)
    out = np.empty_like(uv)
    tiny = s < 1e-240
    safe = np.where(tiny, 1.0, s)
    out[:] = uv / safe[:, None]
    out[tiny] = 1e120
    return out


def transition_velocity(uv: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Pushforward of a chart velocity under the transition map."""
    uv = np.atleast_2d(uv)
    vel = np.atleast_2d(vel)
    s = np.einsum("ij,ij->i", uv, uv)
    dot = np.einsum("ij,ij->i", uv, vel)
    return vel / s[:, None] - 2.0 * dot[:, None] * uv / (s * s)[:, None]


# ----------------------------------------------------------------------------
# batched geometry evaluation
# ----------------------------------------------------------------------------

def _check_seam(uv: np.ndarray):
    s = np.einsum("ij,ij->i", uv, uv)
    if np.any(s > SEAM_S):
        raise ChartSeamError(
            "chart evaluation too close to the opposite pole (|uv| > 3); switch charts"
        )


class _Jet3:
    """Value / gradient / Hessian w.r.t. the three ambient sphere components."""

    __slots__ = ("f", "df", "d2f")

    def __init__(self, f, df, d2f):
        self.f = f
        self.df = df
        self.d2f = d2f

    def __add__(self, other):
        if isinstance(other, _Jet3):
            return _Jet3(self.f + other.f, self.df + other.df, self.d2f + other.d2f)
        return _Jet3(self.f + other, self.df, self.d2f)

    __radd__ = __add__

    def __neg__(self):
        return _Jet3(-self.f, -self.df, -self.d2f)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, _Jet3):
            cross = self.df[:, :, None] * other.df[:, None, :]
            return _Jet3(
                self.f * other.f,
                self.df * other.f[:, None] + other.df * self.f[:, None],
                self.d2f * other.f[:, None, None]
                + other.d2f * self.f[:, None, None]
                + cross
                + np.swapaxes(cross, 1, 2),
            )
        return _Jet3(self.f * other, self.df * other, self.d2f * other)

    __rmul__ = __mul__


def _chart_derivs(uv: np.ndarray, chart: np.ndarray):
    """Unit-sphere point with first and second chart derivatives, closed form."""
    u, v = uv[:, 0], uv[:, 1]
    s = u * u + v * v
    d = 1.0 + s
    d2 = 1.0 / (d * d)
    d3 = d2 / d
    sign = np.where(np.asarray(chart) == NORTH, 1.0, -1.0)
    n = np.stack([2.0 * u / d, 2.0 * v / d, sign * (1.0 - s) / d], axis=1)
    dn = np.empty((len(u), 3, 2))
    dn[:, 0, 0] = 2.0 * (1.0 + v * v - u * u) * d2
    dn[:, 0, 1] = -4.0 * u * v * d2
    dn[:, 1, 0] = dn[:, 0, 1]
    dn[:, 1, 1] = 2.0 * (1.0 + u * u - v * v) * d2
    dn[:, 2, 0] = -4.0 * sign * u * d2
    dn[:, 2, 1] = -4.0 * sign * v * d2
    d2n = np.empty((len(u), 3, 2, 2))
    d2n[:, 0, 0, 0] = -12.0 * u * d2 + 16.0 * u * u * u * d3
    d2n[:, 0, 0, 1] = -4.0 * v * d2 + 16.0 * u * u * v * d3
    d2n[:, 0, 1, 0] = d2n[:, 0, 0, 1]
    d2n[:, 0, 1, 1] = -4.0 * u * d2 + 16.0 * u * v * v * d3
    d2n[:, 1, 0, 0] = -4.0 * v * d2 + 16.0 * u * u * v * d3
    d2n[:, 1, 0, 1] = -4.0 * u * d2 + 16.0 * u * v * v * d3
    d2n[:, 1, 1, 0] = d2n[:, 1, 0, 1]
    d2n[:, 1, 1, 1] = -12.0 * v * d2 + 16.0 * v * v * v * d3
    d2n[:, 2, 0, 0] = sign * (-4.0 * d2 + 16.0 * u * u * d3)
    d2n[:, 2, 0, 1] = sign * 16.0 * u * v * d3
    d2n[:, 2, 1, 0] = d2n[:, 2, 0, 1]
    d2n[:, 2, 1, 1] = sign * (-4.0 * d2 + 16.0 * v * v * d3)
    return n, dn, d2n


def _embed_derivs(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray):
    """Embedding position, jacobian and second derivatives in one pass."""
    n, dn, d2n = _chart_derivs(uv, chart)
    if spec.kind == "round":
        r = spec.radius
        return r * n, r * dn, r * d2n
    if spec.kind == "ellipsoid":
        ax = np.asarray(spec.axes)
        return n * ax[None, :], dn * ax[None, :, None], d2n * ax[None, :, None, None]
    m = len(n)
    eye = np.broadcast_to(np.eye(3), (m, 3, 3))
    xj = _Jet3(n[:, 0], eye[:, 0].copy(), np.zeros((m, 3, 3)))
    yj = _Jet3(n[:, 1], eye[:, 1].copy(), np.zeros((m, 3, 3)))
    zj = _Jet3(n[:, 2], eye[:, 2].copy(), np.zeros((m, 3, 3)))
    rad = _Jet3(np.ones(m), np.zeros((m, 3)), np.zeros((m, 3, 3)))
    for (ell, mm, amp) in spec.harmonics:
        rad = rad + amp * _real_sph_harm(xj, yj, zj, ell, mm, m)
    rho = spec.radius * rad.f
    # chain rule through n(u,v); contractions written out to avoid einsum overhead
    drho = spec.radius * (rad.df[:, :, None] * dn).sum(axis=1)
    hn = (rad.d2f[:, :, :, None] * dn[:, None, :, :]).sum(axis=2)   # (N,3,2): Hf . dn
    d2rho = spec.radius * (
        (dn[:, :, :, None] * hn[:, :, None, :]).sum(axis=1)
        + (rad.df[:, :, None, None] * d2n).sum(axis=1)
    )
    xyz = rho[:, None] * n
    jac = rho[:, None, None] * dn + n[:, :, None] * drho[:, None, :]
    hess = (
        rho[:, None, None, None] * d2n
        + dn[:, :, :, None] * drho[:, None, None, :]
        + dn[:, :, None, :] * drho[:, None, :, None]
        + n[:, :, None, None] * d2rho[:, None, :, :]
    )
    return xyz, jac, hess


def geometry_batch(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray, want_curvature: bool = False):
    """Full local geometry for a batch of points.

    Returns a dict with keys xyz (N,3), jac (N,3,2), g (N,2,2), ginv (N,2,2),
    gamma (N,2,2,2) and optionally gauss (N,).
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    chart = np.atleast_1d(np.asarray(chart))
    _check_seam(uv)
    xyz, jac, hess = _embed_derivs(spec, uv, chart)
    g = np.einsum("nia,nib->nab", jac, jac)
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    ginv = np.empty_like(g)
    ginv[:, 0, 0] = g[:, 1, 1]
    ginv[:, 1, 1] = g[:, 0, 0]
    ginv[:, 0, 1] = -g[:, 0, 1]
    ginv[:, 1, 0] = -g[:, 1, 0]
    ginv /= det[:, None, None]
    # Gauss formula: x_,ab = Gamma^c_ab x_,c + II_ab N
    proj = np.einsum("niab,nic->nabc", hess, jac)
    gamma = np.einsum("ncd,nabd->ncab", ginv, proj)
    out = {"xyz": xyz, "jac": jac, "g": g, "ginv": ginv, "gamma": gamma}
    if want_curvature:
        nrm = np.cross(jac[:, :, 0], jac[:, :, 1])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        two_ff = np.einsum("niab,ni->nab", hess, nrm)
        det2 = two_ff[:, 0, 0] * two_ff[:, 1, 1] - two_ff[:, 0, 1] * two_ff[:, 1, 0]
        out["gauss"] = det2 / det
    return out


def geodesic_accel(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray, vel: np.ndarray,
                   want_g: bool = False, want_curvature: bool = False):
    """Fused geodesic acceleration -Gamma(v,v), avoiding the full Gamma tensor.

    Returns (acc, g_or_None, gauss_or_None).  This is the integrator hot path;
    the round and ellipsoid kinds take closed-form shortcuts.
    """
    if spec.kind == "round" and not want_curvature:
        # conformal chart: lambda = 4R^2/(1+s)^2, phi = log sqrt(lambda)
        u, v = uv[:, 0], uv[:, 1]
        vu, vv = vel[:, 0], vel[:, 1]
        inv_d = 1.0 / (1.0 + u * u + v * v)
        pu = -2.0 * u * inv_d
        pv = -2.0 * v * inv_d
        acc = np.empty_like(vel)
        acc[:, 0] = -(pu * (vu * vu - vv * vv) + 2.0 * pv * vu * vv)
        acc[:, 1] = -(pv * (vv * vv - vu * vu) + 2.0 * pu * vu * vv)
        g = None
        if want_g:
            lam = (2.0 * spec.radius * inv_d) ** 2
            g = np.zeros((len(u), 2, 2))
            g[:, 0, 0] = lam
            g[:, 1, 1] = lam
        return acc, g, None
    if spec.kind == "ellipsoid" and not want_curvature:
        return _accel_ellipsoid(spec, uv, chart, vel, want_g)
    xyz, jac, hess = _embed_derivs(spec, uv, chart)
    # w_i = v^a v^b x_i,ab
    hv = (
        hess[:, :, 0, 0] * (vel[:, 0] * vel[:, 0])[:, None]
        + (hess[:, :, 0, 1] + hess[:, :, 1, 0]) * (vel[:, 0] * vel[:, 1])[:, None]
        + hess[:, :, 1, 1] * (vel[:, 1] * vel[:, 1])[:, None]
    )
    j0, j1 = jac[:, :, 0], jac[:, :, 1]
    g00 = (j0 * j0).sum(axis=1)
    g01 = (j0 * j1).sum(axis=1)
    g11 = (j1 * j1).sum(axis=1)
    det = g00 * g11 - g01 * g01
    b0 = (hv * j0).sum(axis=1)
    b1 = (hv * j1).sum(axis=1)
    acc = np.empty_like(vel)
    acc[:, 0] = -(g11 * b0 - g01 * b1) / det
    acc[:, 1] = -(g00 * b1 - g01 * b0) / det
    g = None
    if want_g:
        g = np.empty((len(uv), 2, 2))
        g[:, 0, 0] = g00
        g[:, 0, 1] = g01
        g[:, 1, 0] = g01
        g[:, 1, 1] = g11
    gauss = None
    if want_curvature:
        nrm = np.cross(j0, j1)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        l = (hess[:, :, 0, 0] * nrm).sum(axis=1)
        mm = (hess[:, :, 0, 1] * nrm).sum(axis=1)
        nn = (hess[:, :, 1, 1] * nrm).sum(axis=1)
        gauss = (l * nn - mm * mm) / det
    return acc, g, gauss


def _accel_ellipsoid(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray, vel: np.ndarray,
                     want_g: bool):
    """Closed-form v^a v^b x_,ab contraction for linear (axis-scaled) embeddings."""
    u, v = uv[:, 0], uv[:, 1]
    vu, vv = vel[:, 0], vel[:, 1]
    s = u * u + v * v
    d2 = 1.0 / ((1.0 + s) * (1.0 + s))
    d3 = d2 / (1.0 + s)
    sign = np.where(np.asarray(chart) == NORTH, 1.0, -1.0)
    p = u * vu + v * vv
    q = vu * vu + vv * vv
    p2_16 = 16.0 * d3 * p * p
    ax, ay, az = spec.axes
    # hv_i = v^a v^b x_i,ab
    hv0 = ax * (-4.0 * d2 * (u * q + 2.0 * vu * p) + u * p2_16)
    hv1 = ay * (-4.0 * d2 * (v * q + 2.0 * vv * p) + v * p2_16)
    hv2 = az * sign * (-4.0 * d2 * q + p2_16)
    # jacobian columns
    j00 = ax * 2.0 * (1.0 + v * v - u * u) * d2
    j01 = ax * (-4.0 * u * v * d2)
    j10 = ay * (-4.0 * u * v * d2)
    j11 = ay * 2.0 * (1.0 + u * u - v * v) * d2
    j20 = az * (-4.0 * sign * u * d2)
    j21 = az * (-4.0 * sign * v * d2)
    g00 = j00 * j00 + j10 * j10 + j20 * j20
    g01 = j00 * j01 + j10 * j11 + j20 * j21
    g11 = j01 * j01 + j11 * j11 + j21 * j21
    det = g00 * g11 - g01 * g01
    b0 = hv0 * j00 + hv1 * j10 + hv2 * j20
    b1 = hv0 * j01 + hv1 * j11 + hv2 * j21
    acc = np.empty_like(vel)
    acc[:, 0] = -(g11 * b0 - g01 * b1) / det
    acc[:, 1] = -(g00 * b1 - g01 * b0) / det
    g = None
    if want_g:
        g = np.empty((len(u), 2, 2))
        g[:, 0, 0] = g00
        g[:, 0, 1] = g01
        g[:, 1, 0] = g01
        g[:, 1, 1] = g11
    return acc, g, None


def embed_points(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray) -> np.ndarray:
    """Ambient positions only (cheap value-level evaluation)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    chart = np.atleast_1d(np.asarray(chart))
    _check_seam(uv)
    n_vec = chart_to_sphere(uv, chart)
    if spec.kind == "round":
        return spec.radius * n_vec
    if spec.kind == "ellipsoid":
        return n_vec * np.asarray(spec.axes)[None, :]
    return _bumpy_radial_values(spec, n_vec)[:, None] * n_vec


def xyz_to_chart(spec: MetricSpec, xyz: np.ndarray):
    """Recover (chart, uv) for ambient points lying on the surface."""
    xyz = np.atleast_2d(xyz)
    if spec.kind == "ellipsoid":
        n_vec = xyz / np.asarray(spec.axes)[None, :]
    else:
        n_vec = xyz.copy()
    n_vec /= np.linalg.norm(n_vec, axis=1, keepdims=True)
    chart = preferred_chart(n_vec)
    return chart, sphere_to_chart(n_vec, chart)


def metric_norm(g: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("nab,na,nb->n", g, vec, vec))


# ----------------------------------------------------------------------------
# first-order fast path (positions + jacobians, no Hessians)
# ----------------------------------------------------------------------------

class _Grad3:
    """Value plus gradient w.r.t. the three ambient sphere components."""

    __slots__ = ("f", "df")

    def __init__(self, f, df):
        self.f = f
        self.df = df

    def __add__(self, other):
        if isinstance(other, _Grad3):
            return _Grad3(self.f + other.f, self.df + other.df)
        return _Grad3(self.f + other, self.df)

    __radd__ = __add__

    def __neg__(self):
        return _Grad3(-self.f, -self.df)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, _Grad3):
            return _Grad3(
                self.f * other.f,
                self.df * other.f[:, None] + other.df * self.f[:, None],
            )
        return _Grad3(self.f * other, self.df * other)

    __rmul__ = __mul__


def _sphere_jacobian(uv: np.ndarray, chart: np.ndarray):
    """Unit-sphere point and its chart jacobian dn/d(u,v), closed form."""
    u, v = uv[:, 0], uv[:, 1]
    s = u * u + v * v
    d = 1.0 + s
    d2 = d * d
    sign = np.where(np.asarray(chart) == NORTH, 1.0, -1.0)
    n = np.stack([2.0 * u / d, 2.0 * v / d, sign * (1.0 - s) / d], axis=1)
    dn = np.empty((len(u), 3, 2))
    dn[:, 0, 0] = 2.0 * (1.0 + v * v - u * u) / d2
    dn[:, 0, 1] = -4.0 * u * v / d2
    dn[:, 1, 0] = dn[:, 0, 1]
    dn[:, 1, 1] = 2.0 * (1.0 + u * u - v * v) / d2
    dn[:, 2, 0] = -4.0 * sign * u / d2
    dn[:, 2, 1] = -4.0 * sign * v / d2
    return n, dn


def emb_jacobian(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray):
    """Ambient positions (N,3) and embedding jacobians (N,3,2), first order only.

    Much cheaper than geometry_batch; used by length quadrature and frames.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    chart = np.atleast_1d(np.asarray(chart))
    _check_seam(uv)
    n, dn = _sphere_jacobian(uv, chart)
    if spec.kind == "round":
        return spec.radius * n, spec.radius * dn
    if spec.kind == "ellipsoid":
        ax = np.asarray(spec.axes)
        return n * ax[None, :], dn * ax[None, :, None]
    x = _Grad3(n[:, 0], np.array([[1.0, 0.0, 0.0]]) * np.ones((len(n), 1)))
    y = _Grad3(n[:, 1], np.array([[0.0, 1.0, 0.0]]) * np.ones((len(n), 1)))
    z = _Grad3(n[:, 2], np.array([[0.0, 0.0, 1.0]]) * np.ones((len(n), 1)))
    rad = _Grad3(np.ones(len(n)), np.zeros((len(n), 3)))
    for (ell, m, amp) in spec.harmonics:
        rad = rad + amp * _real_sph_harm(x, y, z, ell, m, len(n))
    rho = spec.radius * rad.f
    drho = spec.radius * np.einsum("ni,nia->na", rad.df, dn)
    xyz = rho[:, None] * n
    jac = rho[:, None, None] * dn + n[:, :, None] * drho[:, None, :]
    return xyz, jac


def metric_g(spec: MetricSpec, uv: np.ndarray, chart: np.ndarray) -> np.ndarray:
    """Metric tensors only, via the first-order fast path."""
    _, jac = emb_jacobian(spec, uv, chart)
    return np.einsum("nia,nib->nab", jac, jac)


def metric_at(spec: MetricSpec, point) -> tuple:
    """Metric tensor and Christoffel symbols at a single surface point.

    Accepts a SurfacePoint-like object carrying .uv and .chart.  Raises
    ChartSeamError for evaluations too close to the opposite pole.
    """
    geo = geometry_batch(spec, np.asarray(point.uv)[None, :], np.asarray([point.chart]))
    return geo["g"][0], geo["gamma"][0]
