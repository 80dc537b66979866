"""Ray geometry in the conformal metric g = c^{-2} g_E.

Geodesics of g are the ray paths; parameterized by metric arclength s
(equal to travel time) they obey the first-order system

    dx/ds =  c(x) p / |p|,        dp/ds = -|p| grad c(x),

with momentum normalization c |p| = 1 at launch, conserved by the flow
(c^2 |p|^2_E is the Hamiltonian check).  Tangents are stored g-unit,
i.e. with Euclidean norm c.

Frames ride along as Levi-Civita-parallel vectors of g; in Cartesian
coordinates the conformal transport law is

    dw/ds = (1/c) [ v (grad c . w) + w (grad c . v) - (v . w) grad c ].

Jacobi (variational) fields propagate launch perturbations and yield the
geometric spreading J as the Gram determinant of the two transverse
fields of a phase-synchronized ray family.

The batch tracer advances all rays of a fan simultaneously with a fixed
RK4 step (reproducible, vectorized); single rays default to adaptive
RK45 via scipy.  Boundary exits are refined by bisection to 1e-10 in s.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.integrate import solve_ivp

from .errors import GrazingRayError, TrappedRayError
from .media import MediumSpec

__all__ = [
    "BallDomain",
    "HalfSpaceDomain",
    "IntegratorConfig",
    "Ray",
    "LensRecord",
    "FrameTransport",
    "JacobiInit",
    "SpreadingResult",
    "tangent_frame",
    "trace_geodesic",
    "trace_fan",
    "lens_relation",
    "parallel_transport",
    "spreading_J",
    "plane_wave_jacobi_init",
    "point_source_jacobi_init",
]

# Exits are declared at sdist > _EXIT_SLACK so that launches sitting
# exactly on the boundary (sdist = O(1e-16) of either sign) never
# register as instant exits.
_EXIT_SLACK = 1e-12


def tangent_frame(nu: np.ndarray):
    """Orthonormal boundary frame (t1, t2) with (t1, t2, -nu) right-handed.

    -nu is the inward normal, so the frame matches boundary-adapted
    coordinates whose third axis points into the domain.
    """
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu, axis=-1, keepdims=True)
    a = np.where(np.abs(nu[..., [0]]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    t1 = a - np.sum(a * nu, axis=-1, keepdims=True) * nu
    t1 = t1 / np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(-nu, t1)
    return t1, t2


class BallDomain:
    """Ball of given radius; signed distance negative inside."""

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def sdist(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def normal(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x - self.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def contains_point(self, x, tol: float = 1e-9) -> bool:
        return bool(self.sdist(x) <= tol)

    def boundary_point(self, direction) -> np.ndarray:
        d = np.asarray(direction, dtype=float)
        return self.center + self.radius * d / np.linalg.norm(d)


class HalfSpaceDomain:
    """Half space {(x - point) . nu <= 0}; nu is the outward normal."""

    def __init__(self, point, nu):
        self.point = np.asarray(point, dtype=float)
        nu = np.asarray(nu, dtype=float)
        self.nu = nu / np.linalg.norm(nu)

    def sdist(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.point) @ self.nu

    def normal(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.nu, x.shape).copy()

    def contains_point(self, x, tol: float = 1e-9) -> bool:
        return bool(self.sdist(x) <= tol)


@dataclasses.dataclass
class IntegratorConfig:
    """Tracing controls.

    method "rk45" uses scipy's adaptive Dormand-Prince pair (single rays);
    "rk4" is the fixed-step batch mode.  h is the RK4 step; samples are
    stored every store_every steps (and rk45 output is resampled at the
    same spacing).  max_length is the trapped-ray budget in metric length,
    boundary_tol the bisection target for the exit parameter, grazing_tol
    the minimum |cos| between launch direction and inward normal.
    """

    method: str = "rk45"
    h: float = 0.005
    store_every: int = 2
    atol: float = 1e-9
    rtol: float = 1e-9
    max_step: float = 0.05
    max_length: float = 40.0
    boundary_tol: float = 1e-10
    grazing_tol: float = 1e-3


@dataclasses.dataclass
class Ray:
    """A traced geodesic with uniform interior samples plus the exit point.

    x are positions, v g-unit tangents (|v|_E = c).  The momentum covector
    is recovered as p = v / |v|^2 (c |p| = 1 normalization).  status is one
    of "exited", "trapped", "truncated", "rejected_grazing".
    """

    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    status: str
    entry_point: np.ndarray
    entry_dir: np.ndarray
    exit_point: np.ndarray | None = None
    exit_dir: np.ndarray | None = None
    tau: float | None = None
    eta: np.ndarray | None = None
    zeta: np.ndarray | None = None
    jacobi: "SpreadingResult | None" = None

    @property
    def p(self) -> np.ndarray:
        return self.v / np.sum(self.v * self.v, axis=-1, keepdims=True)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def interp_x(self, s_new: np.ndarray) -> np.ndarray:
        return _hermite(self.s, self.x, self.v, s_new)

    def interp_v(self, s_new: np.ndarray) -> np.ndarray:
        return _hermite_deriv(self.s, self.x, self.v, s_new)

    def resample(self, ds: float, odd: bool = True):
        """Uniform s grid over [0, length] with ~ds spacing; returns (s, x)."""
        n = max(int(np.ceil(self.length / ds)) + 1, 5)
        if odd and n % 2 == 0:
            n += 1
        s = np.linspace(0.0, self.length, n)
        return s, self.interp_x(s)


@dataclasses.dataclass
class LensRecord:
    x_in: np.ndarray
    v_in: np.ndarray
    x_out: np.ndarray
    v_out: np.ndarray
    tau: float


@dataclasses.dataclass
class FrameTransport:
    """Parallel frame along a ray: eta and the derived zeta = (v x eta)/c.

    Both are g-unit (Euclidean norm c); (v, eta, zeta) is a right-handed
    g-orthogonal triple.
    """

    s: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray


@dataclasses.dataclass
class JacobiInit:
    """Initial data for two transverse variational fields.

    dx0/dp0 hold the launch-point and launch-momentum derivatives of the
    ray family along the two patch directions; slip carries the constant
    tangential phase gradient (xi'_1, xi'_2), which converts the
    launch-synchronized fields into phase-synchronized ones:
    Y~_a = Y_a - slip_a * v(s).  slip = 0 for normal-incidence launches.
    """

    dx0: np.ndarray
    dp0: np.ndarray
    slip: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.dx0 = np.asarray(self.dx0, dtype=float).reshape(2, 3)
        self.dp0 = np.asarray(self.dp0, dtype=float).reshape(2, 3)
        self.slip = np.asarray(self.slip, dtype=float).reshape(2)


@dataclasses.dataclass
class SpreadingResult:
    s: np.ndarray
    J: np.ndarray
    dJ: np.ndarray
    Y: np.ndarray          # (n, 2, 3) launch-synchronized position blocks
    P: np.ndarray          # (n, 2, 3) momentum blocks
    slip: np.ndarray


def plane_wave_jacobi_init(t1, t2, phase_hessian, xi_prime) -> JacobiInit:
    """Family launched from a patch carrying a linear boundary phase.

    The launch point moves along t1/t2; the momentum derivative is the
    full phase Hessian applied to the patch direction; slip is xi'.
    """
    W = np.asarray(phase_hessian, dtype=float)
    dx0 = np.stack([np.asarray(t1, float), np.asarray(t2, float)])
    dp0 = np.stack([W @ dx0[0], W @ dx0[1]])
    return JacobiInit(dx0, dp0, xi_prime)


def point_source_jacobi_init(m: MediumSpec, x0, v0) -> JacobiInit:
    """Angular family from a point source: dx0 = 0, dp0 spans directions
    transverse to the launch momentum (unit angular spread)."""
    x0 = np.asarray(x0, dtype=float)
    c = float(m.speed(x0[None])[0])
    vhat = np.asarray(v0, dtype=float)
    vhat = vhat / np.linalg.norm(vhat)
    t1, t2 = tangent_frame(vhat)
    # |p| = 1/c; a unit angular rotation of the launch direction moves the
    # momentum by t/c.
    return JacobiInit(np.zeros((2, 3)), np.stack([t1 / c, t2 / c]))


# ----------------------------------------------------------------------
# Packed state: x(3) p(3) [eta(3)] [Y1(3) P1(3) Y2(3) P2(3)]


def _rhs(m: MediumSpec, y: np.ndarray, with_frame: bool, with_jacobi: bool):
    """Batched right-hand side for the packed state; y is (N, D)."""
    x = y[:, 0:3]
    p = y[:, 3:6]
    if with_jacobi:
        c, gc, hc = m.speed_grad_hess(x)
    else:
        c, gc = m.speed_and_gradient(x)
        hc = None
    pn = np.linalg.norm(p, axis=-1)
    phat = p / pn[:, None]
    v = c[:, None] * phat
    dy = np.empty_like(y)
    dy[:, 0:3] = v
    dy[:, 3:6] = -pn[:, None] * gc
    col = 6
    if with_frame:
        w = y[:, 6:9]
        gcw = np.sum(gc * w, axis=-1, keepdims=True)
        gcv = np.sum(gc * v, axis=-1, keepdims=True)
        vw = np.sum(v * w, axis=-1, keepdims=True)
        dy[:, 6:9] = (v * gcw + w * gcv - vw * gc) / c[:, None]
        col = 9
    if with_jacobi:
        for blk in range(2):
            dx = y[:, col + 6 * blk : col + 6 * blk + 3]
            dp = y[:, col + 6 * blk + 3 : col + 6 * blk + 6]
            gcdx = np.sum(gc * dx, axis=-1, keepdims=True)
            pdp = np.sum(phat * dp, axis=-1, keepdims=True)
            dy[:, col + 6 * blk : col + 6 * blk + 3] = (
                gcdx * phat + c[:, None] * (dp - phat * pdp) / pn[:, None]
            )
            dy[:, col + 6 * blk + 3 : col + 6 * blk + 6] = (
                -pn[:, None] * np.einsum("nij,nj->ni", hc, dx) - pdp * gc
            )
    return dy


def _rk4_step(m, y, h, with_frame, with_jacobi):
    """One vectorized RK4 step; h may be per-ray (N,) or scalar."""
    h = np.asarray(h, dtype=float)
    hh = h[:, None] if h.ndim == 1 else h
    k1 = _rhs(m, y, with_frame, with_jacobi)
    k2 = _rhs(m, y + 0.5 * hh * k1, with_frame, with_jacobi)
    k3 = _rhs(m, y + 0.5 * hh * k2, with_frame, with_jacobi)
    k4 = _rhs(m, y + hh * k3, with_frame, with_jacobi)
    return y + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _J_and_dJ(m, x, p, Y, P, slip):
    """Spreading J = sqrt(det Gram) of phase-synchronized fields and its
    s-derivative.  x, p are (n, 3); Y, P are (n, 2, 3)."""
    c, gc, hc = m.speed_grad_hess(x)
    pn = np.linalg.norm(p, axis=-1)
    phat = p / pn[:, None]
    v = c[:, None] * phat
    dp_full = -pn[:, None] * gc
    dphat = (
        dp_full - phat * np.sum(phat * dp_full, axis=-1, keepdims=True)
    ) / pn[:, None]
    dv = np.sum(gc * v, axis=-1)[:, None] * phat + c[:, None] * dphat

    dY = np.empty_like(Y)
    for blk in range(2):
        dx = Y[:, blk]
        dp = P[:, blk]
        gcdx = np.sum(gc * dx, axis=-1, keepdims=True)
        pdp = np.sum(phat * dp, axis=-1, keepdims=True)
        dY[:, blk] = gcdx * phat + c[:, None] * (dp - phat * pdp) / pn[:, None]

    Yt = Y - slip[None, :, None] * v[:, None, :]
    dYt = dY - slip[None, :, None] * dv[:, None, :]
    G = np.einsum("nai,nbi->nab", Yt, Yt)
    dG = np.einsum("nai,nbi->nab", dYt, Yt)
    dG = dG + np.swapaxes(dG, -1, -2)
    det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    ddet = (
        dG[:, 0, 0] * G[:, 1, 1]
        + G[:, 0, 0] * dG[:, 1, 1]
        - dG[:, 0, 1] * G[:, 1, 0]
        - G[:, 0, 1] * dG[:, 1, 0]
    )
    J = np.sqrt(np.maximum(det, 0.0))
    dJ = np.where(J > 0, 0.5 * ddet / np.maximum(J, 1e-300), 0.0)
    return J, dJ


def _unpack_jacobi(ys, with_frame):
    col = 9 if with_frame else 6
    Y = np.stack([ys[:, col : col + 3], ys[:, col + 6 : col + 9]], axis=1)
    P = np.stack([ys[:, col + 3 : col + 6], ys[:, col + 9 : col + 12]], axis=1)
    return Y, P


def _check_entry(m, domain, x0, v0, grazing_tol):
    """Normalize launches to g-unit tangents; flag grazing boundary starts."""
    c = m.speed(x0)
    vhat = v0 / np.linalg.norm(v0, axis=-1, keepdims=True)
    v = c[:, None] * vhat
    sd = domain.sdist(x0)
    on_bdy = np.abs(sd) <= 1e-9
    cosang = np.sum(vhat * domain.normal(x0), axis=-1)
    grazing = on_bdy & (cosang > -grazing_tol)
    return v, grazing


def _finish_ray(m, ss, ys, status, x0, v_launch, with_frame, with_jacobi, slip):
    c_s = m.speed(ys[:, 0:3])
    pn = np.linalg.norm(ys[:, 3:6], axis=-1)
    v_s = c_s[:, None] * ys[:, 3:6] / pn[:, None]
    ray = Ray(ss, ys[:, 0:3].copy(), v_s, status, x0.copy(), v_launch.copy())
    if status == "exited":
        ray.exit_point = ys[-1, 0:3].copy()
        ray.exit_dir = v_s[-1].copy()
        ray.tau = float(ss[-1])
    if with_frame:
        ray.eta = ys[:, 6:9].copy()
        ray.zeta = np.cross(v_s, ray.eta) / c_s[:, None]
    if with_jacobi:
        Y, P = _unpack_jacobi(ys, with_frame)
        J, dJ = _J_and_dJ(m, ys[:, 0:3], ys[:, 3:6], Y, P, slip)
        ray.jacobi = SpreadingResult(ss.copy(), J, dJ, Y, P, slip.copy())
    return ray


def trace_fan(
    m: MediumSpec,
    domain,
    x0: np.ndarray,
    v0: np.ndarray,
    cfg: IntegratorConfig | None = None,
    eta0: np.ndarray | None = None,
    jacobi: JacobiInit | None = None,
) -> list[Ray]:
    """Trace a batch of rays with the fixed-step RK4 engine.

    All rays share the step; each exit is refined by bisection on its last
    step.  Optional eta0 (N, 3) seeds parallel frames; a shared JacobiInit
    propagates spreading data (meaningful when the fan is one boundary
    family).  Grazing boundary launches come back as status
    "rejected_grazing" rather than raising, so bulk generators can count
    and skip them.
    """
    cfg = cfg or IntegratorConfig(method="rk4", h=0.01)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    n = len(x0)
    with_frame = eta0 is not None
    with_jacobi = jacobi is not None
    slip = jacobi.slip if with_jacobi else np.zeros(2)

    v_launch, grazing = _check_entry(m, domain, x0, v0, cfg.grazing_tol)
    p_launch = v_launch / np.sum(v_launch * v_launch, axis=-1, keepdims=True)

    d = 6 + (3 if with_frame else 0) + (12 if with_jacobi else 0)
    y = np.zeros((n, d))
    y[:, 0:3] = x0
    y[:, 3:6] = p_launch
    col = 6
    if with_frame:
        y[:, 6:9] = np.atleast_2d(np.asarray(eta0, dtype=float))
        col = 9
    if with_jacobi:
        y[:, col : col + 3] = jacobi.dx0[0]
        y[:, col + 3 : col + 6] = jacobi.dp0[0]
        y[:, col + 6 : col + 9] = jacobi.dx0[1]
        y[:, col + 9 : col + 12] = jacobi.dp0[1]

    h = cfg.h
    n_steps = int(np.ceil(cfg.max_length / h))
    store = cfg.store_every
    alive = ~grazing
    snaps = [y.copy()]
    snap_alive = [alive.copy()]
    bracket_y = y.copy()
    bracket_s = np.zeros(n)
    exited = np.zeros(n, dtype=bool)
    s_now = 0.0

    for k in range(1, n_steps + 1):
        if not alive.any():
            break
        prev = y[alive].copy()
        y[alive] = _rk4_step(m, prev, h, with_frame, with_jacobi)
        s_now = k * h
        sd = domain.sdist(y[alive, 0:3])
        crossed = sd > _EXIT_SLACK
        if crossed.any():
            idx = np.flatnonzero(alive)[crossed]
            bracket_y[idx] = prev[crossed]
            bracket_s[idx] = s_now - h
            exited[idx] = True
            alive = alive.copy()
            alive[idx] = False
        if k % store == 0 and alive.any():
            snaps.append(y.copy())
            snap_alive.append(alive.copy())

    # Refine all exits at once by bisection on the step fraction.
    exit_y = np.zeros((n, d))
    exit_s = np.zeros(n)
    if exited.any():
        idx = np.flatnonzero(exited)
        y0b = bracket_y[idx]
        lo = np.zeros(len(idx))
        hi = np.ones(len(idx))
        n_it = max(8, int(np.ceil(np.log2(h / cfg.boundary_tol))) + 2)
        for _ in range(n_it):
            mid = 0.5 * (lo + hi)
            y_mid = _rk4_step(m, y0b, mid * h, with_frame, with_jacobi)
            outside = domain.sdist(y_mid[:, 0:3]) > _EXIT_SLACK
            hi = np.where(outside, mid, hi)
            lo = np.where(outside, lo, mid)
        theta = 0.5 * (lo + hi)
        exit_y[idx] = _rk4_step(m, y0b, theta * h, with_frame, with_jacobi)
        exit_s[idx] = bracket_s[idx] + theta * h

    snaps_arr = np.stack(snaps)
    alive_arr = np.stack(snap_alive)
    s_grid = np.arange(len(snaps)) * (h * store)
    rays: list[Ray] = []
    for i in range(n):
        if grazing[i]:
            rays.append(
                Ray(
                    np.zeros(1),
                    x0[[i]].copy(),
                    v_launch[[i]].copy(),
                    "rejected_grazing",
                    x0[i].copy(),
                    v_launch[i].copy(),
                )
            )
            continue
        keep = alive_arr[:, i]
        ys = snaps_arr[keep, i]
        ss = s_grid[keep].copy()
        if exited[i]:
            if exit_s[i] > ss[-1] + 1e-14:
                ys = np.vstack([ys, exit_y[i]])
                ss = np.append(ss, exit_s[i])
            else:
                ys = ys.copy()
                ys[-1] = exit_y[i]
                ss[-1] = exit_s[i]
            status = "exited"
        else:
            status = "trapped" if s_now >= cfg.max_length - h else "truncated"
        rays.append(
            _finish_ray(
                m, ss, ys, status, x0[i], v_launch[i], with_frame,
                with_jacobi, slip,
            )
        )
    return rays


def trace_geodesic(
    m: MediumSpec,
    domain,
    x0,
    v0,
    cfg: IntegratorConfig | None = None,
    eta0=None,
    jacobi: JacobiInit | None = None,
) -> Ray:
    """Trace one geodesic; adaptive RK45 by default, RK4 when configured.

    Raises GrazingRayError for boundary launches within the grazing
    tolerance of tangency.
    """
    cfg = cfg or IntegratorConfig()
    x0 = np.asarray(x0, dtype=float).reshape(3)
    v0 = np.asarray(v0, dtype=float).reshape(3)
    v, grazing = _check_entry(m, domain, x0[None], v0[None], cfg.grazing_tol)
    if grazing[0]:
        raise GrazingRayError(
            f"launch at {x0} within grazing tolerance {cfg.grazing_tol}"
        )
    if cfg.method == "rk4":
        e0 = None if eta0 is None else np.asarray(eta0, dtype=float)[None]
        return trace_fan(m, domain, x0[None], v0[None], cfg, e0, jacobi)[0]

    with_frame = eta0 is not None
    with_jacobi = jacobi is not None
    p0 = v[0] / np.sum(v[0] * v[0])
    parts = [x0, p0]
    if with_frame:
        parts.append(np.asarray(eta0, dtype=float).reshape(3))
    if with_jacobi:
        parts += [jacobi.dx0[0], jacobi.dp0[0], jacobi.dx0[1], jacobi.dp0[1]]
    y0 = np.concatenate(parts)

    def f(s, y):
        return _rhs(m, y[None], with_frame, with_jacobi)[0]

    def hit(s, y):
        return float(domain.sdist(y[0:3])) - _EXIT_SLACK

    hit.terminal = True
    hit.direction = 1.0
    sol = solve_ivp(
        f,
        (0.0, cfg.max_length),
        y0,
        method="RK45",
        rtol=cfg.rtol,
        atol=cfg.atol,
        max_step=cfg.max_step,
        dense_output=True,
        events=hit,
    )
    if sol.t_events[0].size:
        s_end = float(sol.t_events[0][0])
        status = "exited"
    elif sol.status == 0:
        s_end = float(sol.t[-1])
        status = "trapped"
    else:
        s_end = float(sol.t[-1])
        status = "truncated"
    ds = cfg.h * cfg.store_every
    n_s = max(int(np.ceil(s_end / ds)) + 1, 2)
    ss = np.linspace(0.0, s_end, n_s)
    ys = sol.sol(ss).T
    if status == "exited" and sol.y_events[0].size:
        ys[-1] = sol.y_events[0][0]
    slip = jacobi.slip if with_jacobi else np.zeros(2)
    return _finish_ray(m, ss, ys, status, x0, v[0], with_frame, with_jacobi,
                       slip)


def lens_relation(m: MediumSpec, domain, x_in, v_in,
                  cfg: IntegratorConfig | None = None) -> LensRecord:
    """Boundary-to-boundary scattering record (exit point, direction, time).

    Raises TrappedRayError if the ray does not exit within the length
    budget and GrazingRayError for grazing launches or exits.
    """
    cfg = cfg or IntegratorConfig()
    ray = trace_geodesic(m, domain, x_in, v_in, cfg)
    if ray.status != "exited":
        raise TrappedRayError(f"ray from {x_in} status={ray.status}")
    nu = domain.normal(ray.exit_point)
    cosang = float(ray.exit_dir @ nu / np.linalg.norm(ray.exit_dir))
    if abs(cosang) < cfg.grazing_tol:
        raise GrazingRayError(f"grazing exit at {ray.exit_point}")
    return LensRecord(
        ray.entry_point, ray.entry_dir, ray.exit_point, ray.exit_dir, ray.tau
    )


# ----------------------------------------------------------------------
# Cubic Hermite path interpolation (positions carry exact tangents).


def _hermite(s_nodes, x_nodes, v_nodes, s_query):
    s_query = np.atleast_1d(np.asarray(s_query, dtype=float))
    k = np.clip(np.searchsorted(s_nodes, s_query) - 1, 0, len(s_nodes) - 2)
    h = s_nodes[k + 1] - s_nodes[k]
    t = (s_query - s_nodes[k]) / h
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return (
        h00[:, None] * x_nodes[k]
        + (h10 * h)[:, None] * v_nodes[k]
        + h01[:, None] * x_nodes[k + 1]
        + (h11 * h)[:, None] * v_nodes[k + 1]
    )


def _hermite_deriv(s_nodes, x_nodes, v_nodes, s_query):
    s_query = np.atleast_1d(np.asarray(s_query, dtype=float))
    k = np.clip(np.searchsorted(s_nodes, s_query) - 1, 0, len(s_nodes) - 2)
    h = s_nodes[k + 1] - s_nodes[k]
    t = (s_query - s_nodes[k]) / h
    t2 = t * t
    d00 = (6 * t2 - 6 * t) / h
    d10 = 3 * t2 - 4 * t + 1
    d01 = (-6 * t2 + 6 * t) / h
    d11 = 3 * t2 - 2 * t
    return (
        d00[:, None] * x_nodes[k]
        + d10[:, None] * v_nodes[k]
        + d01[:, None] * x_nodes[k + 1]
        + d11[:, None] * v_nodes[k + 1]
    )


class _PathInterp:
    """Hermite view of a ray's (x, p) samples for transport integration."""

    def __init__(self, m: MediumSpec, ray: Ray):
        self.ray = ray
        p = ray.p
        _, gc = m.speed_and_gradient(ray.x)
        pn = np.linalg.norm(p, axis=-1, keepdims=True)
        self.p_nodes = p
        self.pdot_nodes = -pn * gc

    def x(self, s):
        return _hermite(self.ray.s, self.ray.x, self.ray.v, s)

    def v(self, s, m: MediumSpec):
        d = _hermite_deriv(self.ray.s, self.ray.x, self.ray.v, s)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        c = m.speed(self.x(s))
        return c[:, None] * d

    def p(self, s):
        return _hermite(self.ray.s, self.p_nodes, self.pdot_nodes, s)


def _transport_rhs(m, x, v, w):
    c, gc = m.speed_and_gradient(x)
    gcw = np.sum(gc * w, axis=-1, keepdims=True)
    gcv = np.sum(gc * v, axis=-1, keepdims=True)
    vw = np.sum(v * w, axis=-1, keepdims=True)
    return (v * gcw + w * gcv - vw * gc) / c[..., None]


def parallel_transport(m: MediumSpec, ray: Ray, eta0) -> FrameTransport:
    """Levi-Civita transport of eta0 along the ray's stored samples.

    eta0 must be g-orthogonal to the launch tangent (a residual component
    is projected out) and is normalized to g-unit (|eta|_E = c).  RK4
    between samples with Hermite midpoints keeps the O(h^4) accuracy of
    the underlying trace.
    """
    eta0 = np.asarray(eta0, dtype=float).reshape(3).copy()
    c0 = float(m.speed(ray.x[[0]])[0])
    eta0 -= (eta0 @ ray.v[0]) / (c0 * c0) * ray.v[0]
    nrm = np.linalg.norm(eta0)
    if nrm < 1e-12:
        raise ValueError("eta0 is parallel to the launch tangent")
    eta0 *= c0 / nrm

    path = _PathInterp(m, ray)
    n = len(ray.s)
    eta = np.empty((n, 3))
    eta[0] = eta0
    for i in range(n - 1):
        h = ray.s[i + 1] - ray.s[i]
        s_mid = np.array([ray.s[i] + 0.5 * h])
        x_mid = path.x(s_mid)
        v_mid = path.v(s_mid, m)
        w = eta[i]
        k1 = _transport_rhs(m, ray.x[[i]], ray.v[[i]], w[None])[0]
        k2 = _transport_rhs(m, x_mid, v_mid, (w + 0.5 * h * k1)[None])[0]
        k3 = _transport_rhs(m, x_mid, v_mid, (w + 0.5 * h * k2)[None])[0]
        k4 = _transport_rhs(
            m, ray.x[[i + 1]], ray.v[[i + 1]], (w + h * k3)[None]
        )[0]
        eta[i + 1] = w + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    c_s = m.speed(ray.x)
    zeta = np.cross(ray.v, eta) / c_s[:, None]
    return FrameTransport(ray.s.copy(), eta, zeta)


def spreading_J(m: MediumSpec, ray: Ray, init: JacobiInit) -> SpreadingResult:
    """Geometric spreading along a ray from two variational fields.

    Integrates the variational system on the stored samples (RK4 with
    Hermite midpoints for x and p) and forms J = sqrt(det Gram) of the
    phase-synchronized transverse fields.  J(0) = 1 for a normal
    plane-wave launch with orthonormal patch directions.
    """
    path = _PathInterp(m, ray)
    n = len(ray.s)
    Y = np.empty((n, 2, 3))
    P = np.empty((n, 2, 3))
    Y[0] = init.dx0
    P[0] = init.dp0

    def var_rhs(x, p, Yb, Pb):
        c, gc, hc = m.speed_grad_hess(x[None])
        c, gc, hc = c[0], gc[0], hc[0]
        pn = np.linalg.norm(p)
        phat = p / pn
        dY = np.empty_like(Yb)
        dP = np.empty_like(Pb)
        for b in range(2):
            gcdx = gc @ Yb[b]
            pdp = phat @ Pb[b]
            dY[b] = gcdx * phat + c * (Pb[b] - phat * pdp) / pn
            dP[b] = -pn * (hc @ Yb[b]) - pdp * gc
        return dY, dP

    for i in range(n - 1):
        h = ray.s[i + 1] - ray.s[i]
        s_mid = np.array([ray.s[i] + 0.5 * h])
        x_mid = path.x(s_mid)[0]
        p_mid = path.p(s_mid)[0]
        stages = [
            (ray.x[i], path.p_nodes[i], 0.0, None),
            (x_mid, p_mid, 0.5, 0),
            (x_mid, p_mid, 0.5, 1),
            (ray.x[i + 1], path.p_nodes[i + 1], 1.0, 2),
        ]
        kY, kP = [], []
        for xa, pa, w, ki in stages:
            Yj = Y[i] + (w * h * kY[ki] if ki is not None else 0.0)
            Pj = P[i] + (w * h * kP[ki] if ki is not None else 0.0)
            dY, dP = var_rhs(xa, pa, Yj, Pj)
            kY.append(dY)
            kP.append(dP)
        Y[i + 1] = Y[i] + (h / 6.0) * (kY[0] + 2 * kY[1] + 2 * kY[2] + kY[3])
        P[i + 1] = P[i] + (h / 6.0) * (kP[0] + 2 * kP[1] + 2 * kP[2] + kP[3])

    J, dJ = _J_and_dJ(m, ray.x, ray.p, Y, P, init.slip)
    return SpreadingResult(ray.s.copy(), J, dJ, Y, P, init.slip.copy())
