"""Eikonal phases by characteristics, and a grid first-arrival oracle.

The phase ansatz solves |grad phi|^2 = eps*mu = c^{-2} with boundary data
phi = x'.xi' on a flat patch.  Characteristics are the geodesics of
g = c^{-2} g_E; along them phi grows at unit rate (d phi/ds = p.v = 1)
and grad phi equals the ray momentum p.  The phase is kept Lagrangian
(per-characteristic samples); a global grid phase would break at
caustics.

The Hessian W = grad^2 phi rides along each characteristic.  Instead of
the stiff matrix Riccati form it is carried by the linear variational
pair (A, B) of the Hamiltonian flow of H = (1/2) c^2 |p|^2,

    A' = Hpx A + Hpp B,      B' = -Hxx A - Hxp B,
    A(0) = I,                B(0) = W0,

with W(s) = B A^{-1}; det A -> 0 flags the caustic.  On the level set
c|p| = 1 this flow coincides with the arclength ray equations used by
the tracer.

fast_march_travel_time is a first-order upwind fast-marching solver on a
Cartesian grid, used only as an independent oracle for ray-traced travel
times.
"""

from __future__ import annotations

import dataclasses
import heapq

import numpy as np

from .errors import CausticError, DomainError, EvanescentModeError
from .fields import GridField
from .geometry import HalfSpaceDomain, IntegratorConfig, tangent_frame
from .media import MediumSpec

__all__ = [
    "xi3",
    "BoundaryPatch",
    "PhaseRay",
    "PhaseField",
    "phase_hessian_at_boundary",
    "boundary_phase",
    "fast_march_travel_time",
]


def xi3(eps, mu, xi_prime):
    """Normal phase frequency sqrt(eps*mu - |xi'|^2).

    xi_prime may be a 2-covector (tangential frame components) or a
    scalar magnitude rho.  Inputs broadcast.  The positive root is
    returned; the inward-going convention is applied where the full
    gradient is assembled (the normal component multiplies the inward
    frame vector).
    """
    eps = np.asarray(eps, dtype=float)
    mu = np.asarray(mu, dtype=float)
    xp = np.asarray(xi_prime, dtype=float)
    rho2 = np.sum(xp * xp, axis=-1) if xp.ndim and xp.shape[-1] == 2 else xp * xp
    disc = eps * mu - rho2
    if np.any(disc <= 0):
        bad = np.min(disc)
        raise EvanescentModeError(
            f"eps*mu - |xi'|^2 = {bad:.6g} <= 0: mode does not propagate"
        )
    return np.sqrt(disc)


@dataclasses.dataclass
class BoundaryPatch:
    """Flat boundary patch: base point, outward normal, tangent frame.

    The frame (t1, t2, e3) with e3 = -nu is right-handed; patch
    coordinates x' = ((x-x0).t1, (x-x0).t2) parameterize the plane.
    """

    x0: np.ndarray
    nu: np.ndarray
    halfwidth: float = 0.05

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(3)
        nu = np.asarray(self.nu, dtype=float).reshape(3)
        self.nu = nu / np.linalg.norm(nu)
        t1, t2 = tangent_frame(self.nu)
        self.t1, self.t2 = t1, t2
        self.e3 = -self.nu

    def coords(self, x: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(x) - self.x0
        return np.stack([d @ self.t1, d @ self.t2], axis=-1)

    def points(self, n_side: int) -> np.ndarray:
        """n_side x n_side launch grid on the patch (row-major)."""
        u = np.linspace(-self.halfwidth, self.halfwidth, n_side)
        U, V = np.meshgrid(u, u, indexing="ij")
        return (
            self.x0
            + U.reshape(-1, 1) * self.t1
            + V.reshape(-1, 1) * self.t2
        )

    def domain(self) -> HalfSpaceDomain:
        return HalfSpaceDomain(self.x0, self.nu)


def phase_hessian_at_boundary(m: MediumSpec, x0, nu, xi_prime) -> np.ndarray:
    """Cartesian Hessian of the launched phase at a flat-patch point.

    With q = eps*mu, rho^2 = |xi'|^2 and xi_3 = sqrt(q - rho^2), the
    frame-block Hessian is

        tangential  d_a d_b phi = 0        (linear boundary data, flat patch)
        mixed       d_a d_3 phi = d_a q / (2 xi_3)
        normal      d_3 d_3 phi = (d_3 q - 2 sum_a xi'_a d_a xi_3) / (2 xi_3)

    where d_3 is the inward normal derivative; the normal entry comes
    from differentiating the eikonal equation |grad phi|^2 = q along the
    inward normal.
    """
    x0 = np.asarray(x0, dtype=float).reshape(3)
    nu = np.asarray(nu, dtype=float).reshape(3)
    nu = nu / np.linalg.norm(nu)
    t1, t2 = tangent_frame(nu)
    e3 = -nu
    xp = np.asarray(xi_prime, dtype=float).reshape(2)

    ev = m.evaluate(x0[None])
    q = ev.eps[0] * ev.mu[0]
    gq = ev.eps[0] * ev.grad_mu[0] + ev.mu[0] * ev.grad_eps[0]
    x3 = float(xi3(ev.eps[0], ev.mu[0], xp))

    dq = np.array([t1 @ gq, t2 @ gq, e3 @ gq])
    dxi3_t = dq[:2] / (2.0 * x3)
    w33 = (dq[2] - 2.0 * (xp @ dxi3_t)) / (2.0 * x3)

    T = np.stack([t1, t2, e3], axis=1)
    Wf = np.zeros((3, 3))
    Wf[0, 2] = Wf[2, 0] = dxi3_t[0]
    Wf[1, 2] = Wf[2, 1] = dxi3_t[1]
    Wf[2, 2] = w33
    return T @ Wf @ T.T


@dataclasses.dataclass
class PhaseRay:
    """One characteristic with its phase jet samples.

    VA, VB are the variational pair of the launched Lagrangian plane;
    the position response to a launch shift dx0 with dp0 = W(0) dx0 is
    VA(s) dx0, which is what Jacobi/spreading consumers need.
    """

    s: np.ndarray
    x: np.ndarray
    p: np.ndarray          # = grad phi at the samples
    W: np.ndarray          # (n, 3, 3) Hessian grad^2 phi
    phi: np.ndarray
    detA: np.ndarray
    exited: bool
    VA: np.ndarray | None = None
    VB: np.ndarray | None = None

    @property
    def grad_phi(self) -> np.ndarray:
        return self.p


@dataclasses.dataclass
class PhaseField:
    """Lagrangian phase: characteristics launched from one patch."""

    patch: BoundaryPatch
    xi_prime: np.ndarray
    rays: list[PhaseRay]

    def eikonal_residual(self, m: MediumSpec) -> float:
        """max over samples of |c^2 |grad phi|^2 - 1|."""
        worst = 0.0
        for r in self.rays:
            c = m.speed(r.x)
            res = np.abs(c * c * np.sum(r.p * r.p, axis=-1) - 1.0)
            worst = max(worst, float(res.max()))
        return worst

    def boundary_values(self) -> np.ndarray:
        """phi at launch minus x'.xi' (should vanish)."""
        out = np.empty(len(self.rays))
        for i, r in enumerate(self.rays):
            xp = self.patch.coords(r.x[[0]])[0]
            out[i] = r.phi[0] - xp @ self.xi_prime
        return out


def _phase_rhs(m: MediumSpec, y: np.ndarray) -> np.ndarray:
    """RHS for packed (x, p, A, B) state, y is (N, 24)."""
    x = y[:, 0:3]
    p = y[:, 3:6]
    A = y[:, 6:15].reshape(-1, 3, 3)
    B = y[:, 15:24].reshape(-1, 3, 3)
    c, gc, hc = m.speed_grad_hess(x)
    pn2 = np.sum(p * p, axis=-1)
    dy = np.empty_like(y)
    dy[:, 0:3] = c[:, None] ** 2 * p
    dy[:, 3:6] = -(c * pn2)[:, None] * gc
    # Hpp = c^2 I, Hpx = 2c p (x) grad c, Hxx = |p|^2 (grad c (x) grad c + c hess c)
    Hpx = 2.0 * c[:, None, None] * np.einsum("ni,nj->nij", p, gc)
    Hxx = pn2[:, None, None] * (
        np.einsum("ni,nj->nij", gc, gc) + c[:, None, None] * hc
    )
    dA = np.einsum("nij,njk->nik", Hpx, A) + c[:, None, None] ** 2 * B
    dB = -np.einsum("nij,njk->nik", Hxx, A) - np.einsum(
        "nji,njk->nik", Hpx, B
    )
    dy[:, 6:15] = dA.reshape(-1, 9)
    dy[:, 15:24] = dB.reshape(-1, 9)
    return dy


def boundary_phase(
    m: MediumSpec,
    patch: BoundaryPatch,
    xi_prime,
    depth: float,
    n_side: int = 3,
    cfg: IntegratorConfig | None = None,
) -> PhaseField:
    """Launch the phase from a patch and carry (phi, grad phi, Hessian).

    Characteristics start on an n_side x n_side patch grid with momentum
    xi'_1 t1 + xi'_2 t2 + xi_3 e3 (inward) and stop at the depth budget
    or when they re-cross the patch plane.  Raises CausticError if det A
    of the variational pair collapses within the budget, and
    EvanescentModeError if xi' is inadmissible anywhere on the patch.
    """
    cfg = cfg or IntegratorConfig(method="rk4", h=0.005, store_every=2)
    xp = np.asarray(xi_prime, dtype=float).reshape(2)
    x0 = patch.points(n_side)
    n = len(x0)
    ev = m.evaluate(x0)
    x3 = xi3(ev.eps, ev.mu, xp)

    p0 = (
        xp[0] * patch.t1 + xp[1] * patch.t2 + x3[:, None] * patch.e3
    )
    y = np.zeros((n, 24))
    y[:, 0:3] = x0
    y[:, 3:6] = p0
    y[:, 6:15] = np.eye(3).reshape(9)
    for i in range(n):
        y[i, 15:24] = phase_hessian_at_boundary(m, x0[i], patch.nu, xp).reshape(9)

    dom = patch.domain()
    h = cfg.h
    n_steps = int(np.ceil(depth / h))
    store = cfg.store_every
    alive = np.ones(n, dtype=bool)
    snaps = [y.copy()]
    snap_alive = [alive.copy()]
    exited = np.zeros(n, dtype=bool)
    exit_state = np.zeros((n, 24))
    exit_s = np.zeros(n)

    def rk4(yv, hv):
        hv = np.asarray(hv, dtype=float)
        hh = hv[:, None] if hv.ndim == 1 else hv
        k1 = _phase_rhs(m, yv)
        k2 = _phase_rhs(m, yv + 0.5 * hh * k1)
        k3 = _phase_rhs(m, yv + 0.5 * hh * k2)
        k4 = _phase_rhs(m, yv + hh * k3)
        return yv + (hh / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    for k in range(1, n_steps + 1):
        if not alive.any():
            break
        prev = y[alive].copy()
        y[alive] = rk4(prev, h)
        sd = dom.sdist(y[alive, 0:3])
        crossed = sd > 1e-12
        if crossed.any():
            idx = np.flatnonzero(alive)[crossed]
            # bisect the exit like the tracer does
            y0b = prev[crossed]
            lo = np.zeros(len(idx))
            hi = np.ones(len(idx))
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                ym = rk4(y0b, mid * h)
                out = dom.sdist(ym[:, 0:3]) > 1e-12
                hi = np.where(out, mid, hi)
                lo = np.where(out, lo, mid)
            th = 0.5 * (lo + hi)
            exit_state[idx] = rk4(y0b, th * h)
            exit_s[idx] = (k - 1) * h + th * h
            exited[idx] = True
            alive[idx] = False
        if k % store == 0 and alive.any():
            snaps.append(y.copy())
            snap_alive.append(alive.copy())

    snaps_arr = np.stack(snaps)
    alive_arr = np.stack(snap_alive)
    s_grid = np.arange(len(snaps)) * (h * store)
    phi0 = np.einsum("nk,k->n", patch.coords(x0), xp)

    rays = []
    for i in range(n):
        keep = alive_arr[:, i]
        ys = snaps_arr[keep, i]
        ss = s_grid[keep].copy()
        if exited[i] and exit_s[i] > ss[-1] + 1e-14:
            ys = np.vstack([ys, exit_state[i]])
            ss = np.append(ss, exit_s[i])
        A = ys[:, 6:15].reshape(-1, 3, 3)
        B = ys[:, 15:24].reshape(-1, 3, 3)
        detA = np.linalg.det(A)
        if np.any(detA < 1e-8):
            j = int(np.argmax(detA < 1e-8))
            raise CausticError(
                f"caustic on characteristic {i} near s = {ss[j]:.4f} "
                f"(det A = {detA[j]:.3e})"
            )
        W = np.linalg.solve(np.swapaxes(A, -1, -2), np.swapaxes(B, -1, -2))
        W = np.swapaxes(W, -1, -2)
        rays.append(
            PhaseRay(
                ss,
                ys[:, 0:3].copy(),
                ys[:, 3:6].copy(),
                W,
                phi0[i] + ss,
                detA,
                bool(exited[i]),
                A,
                B,
            )
        )
    return PhaseField(patch, xp.copy(), rays)


# ----------------------------------------------------------------------
# Fast marching (first-order upwind) on a Cartesian grid.

_FAR, _BAND, _FROZEN = 0, 1, 2


def _upwind_solve(vals, hs, slow):
    """Solve sum_i max((T - a_i)/h_i, 0)^2 = slow^2 progressively."""
    pairs = sorted((v, h) for v, h in zip(vals, hs) if np.isfinite(v))
    T = np.inf
    for k in range(len(pairs), 0, -1):
        use = pairs[:k]
        # quadratic sum_{i<k} (T - a_i)^2 / h_i^2 = slow^2
        A = sum(1.0 / h**2 for _, h in use)
        Bq = -2.0 * sum(a / h**2 for a, h in use)
        Cq = sum(a * a / h**2 for a, h in use) - slow * slow
        disc = Bq * Bq - 4.0 * A * Cq
        if disc < 0:
            continue
        T = (-Bq + np.sqrt(disc)) / (2.0 * A)
        if k == 1 or T >= use[-1][0]:
            break
    if not np.isfinite(T):
        T = pairs[0][0] + pairs[0][1] * slow
    return T


def fast_march_travel_time(
    m: MediumSpec,
    source,
    grid: GridField | tuple,
) -> GridField:
    """First-arrival travel time in the metric c^{-2} g_E by fast marching.

    source is one point (3,) or a set (k, 3); grid is a GridField
    template (its geometry is reused) or an (origin, spacing, dims)
    tuple.  First-order upwind updates with a causal heap; nodes near a
    source are initialized with the locally averaged slowness.
    """
    if isinstance(grid, GridField):
        origin, spacing, dims = grid.origin, grid.spacing, grid.dims
    else:
        origin, spacing, dims = grid
        origin = np.asarray(origin, dtype=float)
        spacing = np.asarray(spacing, dtype=float)
        dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    src = np.atleast_2d(np.asarray(source, dtype=float))

    ax = [origin[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    nodes = np.stack([X, Y, Z], axis=-1)
    slow = 1.0 / m.speed(nodes.reshape(-1, 3)).reshape(dims)

    tau = np.full(dims, np.inf)
    state = np.full(dims, _FAR, dtype=np.int8)
    heap: list[tuple[float, int, tuple[int, int, int]]] = []
    tick = 0

    r_init = 2.0 * float(np.max(spacing))
    for xs in src:
        if np.any(xs < origin - 1e-9) or np.any(
            xs > origin + spacing * (np.array(dims) - 1) + 1e-9
        ):
            raise DomainError(f"source {xs} outside grid")
        s_src = float(1.0 / m.speed(xs[None])[0])
        ijk0 = np.clip(
            np.round((xs - origin) / spacing).astype(int), 0, np.array(dims) - 1
        )
        rad = np.ceil(r_init / spacing).astype(int)
        for di in range(-rad[0], rad[0] + 1):
            for dj in range(-rad[1], rad[1] + 1):
                for dk in range(-rad[2], rad[2] + 1):
                    i, j, k = ijk0 + (di, dj, dk)
                    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
                        continue
                    xnode = origin + spacing * (i, j, k)
                    d = float(np.linalg.norm(xnode - xs))
                    if d > r_init:
                        continue
                    t0 = d * 0.5 * (slow[i, j, k] + s_src)
                    if t0 < tau[i, j, k]:
                        tau[i, j, k] = t0
                        state[i, j, k] = _BAND
                        heapq.heappush(heap, (t0, tick, (i, j, k)))
                        tick += 1

    offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    while heap:
        t, _, (i, j, k) = heapq.heappop(heap)
        if state[i, j, k] == _FROZEN or t > tau[i, j, k] + 1e-15:
            continue
        state[i, j, k] = _FROZEN
        for oi, oj, ok in offs:
            a, b, c_ = i + oi, j + oj, k + ok
            if not (0 <= a < nx and 0 <= b < ny and 0 <= c_ < nz):
                continue
            if state[a, b, c_] == _FROZEN:
                continue
            vals, hs = [], []
            for axis, (lo_off, hi_off) in enumerate(
                (((-1, 0, 0), (1, 0, 0)), ((0, -1, 0), (0, 1, 0)),
                 ((0, 0, -1), (0, 0, 1)))
            ):
                best = np.inf
                for off in (lo_off, hi_off):
                    p, q, r = a + off[0], b + off[1], c_ + off[2]
                    if 0 <= p < nx and 0 <= q < ny and 0 <= r < nz:
                        if state[p, q, r] == _FROZEN:
                            best = min(best, tau[p, q, r])
                vals.append(best)
                hs.append(spacing[axis])
            if not any(np.isfinite(v) for v in vals):
                continue
            t_new = _upwind_solve(vals, hs, slow[a, b, c_])
            if t_new < tau[a, b, c_]:
                tau[a, b, c_] = t_new
                state[a, b, c_] = _BAND
                heapq.heappush(heap, (t_new, tick, (a, b, c_)))
                tick += 1

    return GridField(origin, spacing, tau[..., None])
