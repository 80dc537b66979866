"""Boundary identification and the staged volumetric reconstruction.

The chain runs: boundary symbol fits give (eps, mu, sigma) and first
normal jets on the accessible patch; lens data give the wave speed
(radial Abel inversion when the medium is declared radial, Gauss-Newton
travel-time tomography otherwise); attenuation data give sigma/eps by a
scalar ray-transform inversion in the recovered speed; differential
transverse tensor data give eps through the log-permittivity potential;
mu and sigma then follow from algebraic identities, pointwise exactly.
"""

from __future__ import annotations

import dataclasses
import time
import warnings

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator

from .errors import (
    CoverageError,
    DivergenceError,
    DomainError,
    HerglotzViolationError,
    IllConditionedFitError,
    InconsistentDataError,
    MxtomoError,
)
from .fields import ConstantField, Field, GridField, SplineField
from .geometry import BallDomain, FrameTransport, IntegratorConfig, trace_fan
from .media import Box, FoliationDesc, MediumSpec, ball_foliation
from .transforms import (
    GradOp,
    InversionResult,
    TrilinearOp,
    _ray_quadrature,
    cgls,
    trt_invert_for_u,
    xray_invert,
)

__all__ = [
    "BoundaryJets",
    "Order0Fit",
    "Order1Fit",
    "recover_boundary_order0",
    "recover_boundary_order1",
    "herglotz_invert",
    "TomographyConfig",
    "TomographyResult",
    "traveltime_tomography",
    "AttenuationResult",
    "recover_sigma_over_eps",
    "PermittivityResult",
    "recover_epsilon",
    "PipelineConfig",
    "ReconstructionReport",
    "pipeline",
]


# ----------------------------------------------------------------------
# Boundary jets from the symbol data.


@dataclasses.dataclass
class Order0Fit:
    eps: float
    mu: float
    cond: float


@dataclasses.dataclass
class Order1Fit:
    dn_eps: float
    dn_mu: float
    sigma: float
    cond: float


@dataclasses.dataclass
class BoundaryJets:
    """Order-0 and order-1 boundary values at sample points.

    Normal derivatives are outward.  speed() gives c = 1/sqrt(eps mu) at
    the samples, the anchor for the interior speed stages.
    """

    points: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    dn_eps: np.ndarray
    dn_mu: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        for name in ("eps", "mu", "sigma", "dn_eps", "dn_mu"):
            setattr(
                self, name, np.atleast_1d(np.asarray(getattr(self, name), float))
            )

    def speed(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.eps * self.mu)

    def __len__(self) -> int:
        return len(self.points)


def recover_boundary_order0(samples) -> Order0Fit:
    """(eps, mu) at one boundary point from principal-symbol samples.

    samples are (rho, S0) pairs.  y = (S0/rho^2)^2 is linear in rho^2:
    y = eps/mu - rho^2/mu^2, so a 2x2 least-squares fit hands back both
    parameters in closed form.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(arr) < 2:
        raise InconsistentDataError("need at least two (rho, S0) samples")
    rho, s0 = arr[:, 0], arr[:, 1]
    if np.any(rho <= 0):
        raise InconsistentDataError("rho samples must be positive")
    y = (s0 / rho**2) ** 2
    M = np.stack([np.ones_like(rho), -(rho**2)], axis=1)
    cond = float(np.linalg.cond(M))
    if cond > 1e8:
        warnings.warn(
            f"near-duplicate rho samples, condition {cond:.2e}",
            RuntimeWarning,
            stacklevel=2,
        )
    (a, b), *_ = np.linalg.lstsq(M, y, rcond=None)
    if b <= 0.0 or a <= 0.0:
        raise InconsistentDataError(
            f"symbol fit gave a={a:.3e}, b={b:.3e}; data inconsistent with "
            "a positive medium"
        )
    mu = 1.0 / np.sqrt(b)
    return Order0Fit(eps=float(a / np.sqrt(b)), mu=float(mu), cond=cond)


def recover_boundary_order1(samples, eps: float, mu: float) -> Order1Fit:
    """First normal jets and sigma from the order-1 symbol.

    S1(rho) = alpha + beta rho^2 + gamma sqrt(eps mu - rho^2) with
    alpha = (eps d3mu - mu d3eps)/2, beta = -d3mu/mu, gamma = sigma mu,
    all in the inward derivative d3; the returned jets are outward.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(arr) < 3:
        raise InconsistentDataError("need at least three (rho, S1) samples")
    rho, s1 = arr[:, 0], arr[:, 1]
    disc = eps * mu - rho**2
    if np.any(disc <= 0):
        raise InconsistentDataError(
            "rho sample at or beyond the evanescent threshold"
        )
    M = np.stack([np.ones_like(rho), rho**2, np.sqrt(disc)], axis=1)
    cond = float(np.linalg.cond(M))
    if cond > 1e12:
        raise IllConditionedFitError(
            f"order-1 symbol basis is numerically collinear ({cond:.2e}); "
            "spread the rho samples"
        )
    (alpha, beta, gamma), *_ = np.linalg.lstsq(M, s1, rcond=None)
    d3mu = -beta * mu
    d3eps = (eps * d3mu - 2.0 * alpha) / mu
    return Order1Fit(
        dn_eps=float(-d3eps),
        dn_mu=float(-d3mu),
        sigma=float(gamma / mu),
        cond=cond,
    )


# ----------------------------------------------------------------------
# Radial wave speed by Abel inversion of tau(impact).


def herglotz_invert(
    impact,
    tau,
    c_boundary: float = 1.0,
    radius: float = 1.0,
    n_out: int = 64,
    n_quad: int = 512,
):
    """Radial speed profile from travel times of a radial medium.

    impact are Euclidean impact parameters b of the entering chords, tau
    the measured travel times.  With p = b/c(R) the ray parameter and
    u = sqrt(p_R^2 - p^2), tau is a smooth, increasing function of u and
    a monotone (PCHIP) fit of tau(u) drives the classical turning-point
    inversion:

        X(p1) = int_0^{u1} tau_u(u) / sqrt(p_R^2 - u^2) du
        log(R/r1) = (1/pi) int_0^{u1} X(sqrt(p1^2 + w^2))
                                  / sqrt(p1^2 + w^2) dw
        c(r1) = r1 / p1.

    Both substitutions remove the grazing-limit square-root singularity,
    so plain composite Simpson converges fast.  Returns (r, c) arrays on
    the covered radius range, boundary point included.

    Raises HerglotzViolationError when tau is not strictly monotone in
    the ray parameter (the turning-point ansatz fails).
    """
    b = np.asarray(impact, dtype=float).reshape(-1)
    t = np.asarray(tau, dtype=float).reshape(-1)
    if b.shape != t.shape:
        raise InconsistentDataError("impact and tau must have equal length")
    good = (b > 0) & (b < radius) & (t > 0)
    b, t = b[good], t[good]
    if len(b) < 4:
        raise InconsistentDataError("need at least 4 interior tau samples")
    p_R = radius / c_boundary
    p = b / c_boundary
    u = np.sqrt(p_R**2 - p**2)
    order = np.argsort(u)
    u, t, p = u[order], t[order], p[order]
    if np.any(np.diff(u) <= 0):
        # Duplicated impact parameters: average duplicates.
        uu, inv = np.unique(u, return_inverse=True)
        tt = np.bincount(inv, weights=t) / np.bincount(inv)
        u, t = uu, tt
    if np.any(np.diff(t) <= 0):
        raise HerglotzViolationError(
            "travel time is not monotone in the ray parameter"
        )
    u_fit = np.concatenate([[0.0], u])
    t_fit = np.concatenate([[0.0], t])
    spl = PchipInterpolator(u_fit, t_fit)
    dspl = spl.derivative()

    # Aperture angle X on a fine u grid, cumulative quadrature.
    u_max = u[-1]
    n_fine = max(4 * n_quad, 2048)
    ug = np.linspace(0.0, u_max, n_fine + 1)
    integrand = dspl(ug) / np.sqrt(np.maximum(p_R**2 - ug**2, 1e-300))
    X = cumulative_trapezoid(integrand, ug, initial=0.0)

    def X_of_p(pv):
        uq = np.sqrt(np.maximum(p_R**2 - pv**2, 0.0))
        return np.interp(uq, ug, X)

    p_min = float(np.min(p))
    p_targets = np.linspace(p_min, p_R, n_out, endpoint=False)
    rr = np.empty(n_out)
    cc = np.empty(n_out)
    for k, p1 in enumerate(p_targets):
        w1 = np.sqrt(p_R**2 - p1**2)
        wg = np.linspace(0.0, w1, 201)
        pv = np.sqrt(p1**2 + wg**2)
        f = X_of_p(pv) / pv
        hw = w1 / 200
        val = hw / 3.0 * (
            f[0] + f[-1] + 4.0 * np.sum(f[1:-1:2]) + 2.0 * np.sum(f[2:-2:2])
        )
        rr[k] = radius * np.exp(-val / np.pi)
        cc[k] = rr[k] / p1
    rr = np.append(rr, radius)
    cc = np.append(cc, c_boundary)
    order = np.argsort(rr)
    return rr[order], cc[order]


# ----------------------------------------------------------------------
# General wave speed by travel-time tomography.


@dataclasses.dataclass
class TomographyConfig:
    """Controls for the Gauss-Newton travel-time solve.

    shells lists foliation levels solved outside-in (each shell uses only
    rays whose deepest point stays at kappa <= shell); outer bounds the
    Gauss-Newton iterations per shell.  trace_h is the RK4 step for the
    predicted rays; ds the quadrature step of the sensitivity rows.
    """

    dims: tuple = (64, 64, 64)
    box: Box | None = None
    domain_radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    reg: float | None = None
    outer: int = 4
    inner: int = 50
    shells: tuple = (0.5, 1.0)
    trace_h: float = 0.01
    store_every: int = 2
    ds: float | None = None
    misfit_tol: float = 1e-12


@dataclasses.dataclass
class TomographyResult:
    c: GridField
    misfit_history: list
    dropped: int
    exit_rms: float
    converged: bool


def _segment_max(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(values, offsets[:-1])


def traveltime_tomography(
    lens, foliation: FoliationDesc, c0: Field, cfg: TomographyConfig | None = None
) -> TomographyResult:
    """Wave speed on a grid from boundary travel times.

    Gauss-Newton in the slowness n = 1/c: each outer step retraces the
    fan in the current speed, forms delta-tau sensitivity rows
    int c(x) delta-n ds along the frozen paths (Fermat kills the path
    derivative to first order), and solves the gradient-regularized
    normal equations by CGLS.  A backtracking line search on a frozen
    ray subset guarantees the regularized objective never increases.
    Trapped or grazing predicted rays are dropped with a count.  Three
    consecutive stalls raise DivergenceError.

    The default smoothing weight is 1e-3 ||tau||: the bending
    linearization rewards rough slowness updates that straight-ray
    theory would not, and the weaker scalar-transform default lets the
    line search thrash.
    """
    cfg = cfg or TomographyConfig()
    center = np.asarray(cfg.center, dtype=float)
    R = cfg.domain_radius
    box = cfg.box or Box(tuple(center - 1.05 * R), tuple(center + 1.05 * R))
    dims = np.asarray(cfg.dims, dtype=int)
    spacing = (np.asarray(box.hi) - np.asarray(box.lo)) / (dims - 1)
    tpl = GridField(box.lo, spacing, np.zeros(tuple(dims)))
    nodes = tpl.node_points()
    domain = BallDomain(R, center)

    x_in = np.stack([np.asarray(lr.x_in, float) for lr in lens])
    v_in = np.stack([np.asarray(lr.v_in, float) for lr in lens])
    x_out = np.stack([np.asarray(lr.x_out, float) for lr in lens])
    tau_meas = np.array([lr.tau for lr in lens], dtype=float)

    n_vec = 1.0 / np.asarray(c0.value(nodes), dtype=float)
    free = domain.sdist(nodes) < 0.0
    if not np.any(free):
        raise CoverageError("no grid nodes inside the domain")
    ds = cfg.ds or 0.75 * float(np.min(spacing))
    icfg = IntegratorConfig(
        method="rk4", h=cfg.trace_h, store_every=cfg.store_every
    )
    G = GradOp(tuple(dims), spacing)
    nd = float(np.linalg.norm(tau_meas)) or 1.0
    beta = cfg.reg if cfg.reg is not None else 1e-3 * nd
    kappa = foliation.kappa

    def trace_all(nv):
        cg = GridField(box.lo, spacing, (1.0 / nv).reshape(tuple(dims)))
        m = MediumSpec.from_speed(SplineField(cg), box=box)
        return m, trace_fan(m, domain, x_in, v_in, icfg)

    def ray_depth(rays):
        """Deepest kappa per ray; exited rays only carry a finite value."""
        depth = np.full(len(rays), np.inf)
        samples, offs, ids = [], [0], []
        for k, ray in enumerate(rays):
            if ray.status != "exited":
                continue
            samples.append(ray.x)
            offs.append(offs[-1] + len(ray.x))
            ids.append(k)
        if not samples:
            return depth
        kap = kappa.value(np.concatenate(samples))
        depth[np.asarray(ids)] = _segment_max(
            kap, np.asarray(offs, dtype=np.int64)
        )
        return depth

    def shell_rays(rays, q):
        # kappa exceeds 1 inside the foliation core; a terminal shell
        # (q >= 1) therefore takes every exited ray.
        depth = ray_depth(rays)
        if q >= 1.0 - 1e-12:
            keep = np.flatnonzero(np.isfinite(depth))
        else:
            keep = np.flatnonzero(depth <= q + 1e-12)
        if len(keep) == 0:
            raise CoverageError(f"no usable rays inside shell kappa<={q}")
        return keep

    def objective(nv, rays, keep):
        """Data + smoothing objective over a frozen ray subset.

        None when any kept ray failed to exit (the trial step bent it
        into a trapped orbit), so the line search can reject the step.
        """
        taus = np.empty(len(keep))
        for j, i in enumerate(keep):
            if rays[i].status != "exited":
                return None, None
            taus[j] = rays[i].tau
        resid = tau_meas[keep] - taus
        gn = beta * G.apply(nv)
        return float(resid @ resid + gn @ gn), resid

    m_cur, rays_cur = trace_all(n_vec)
    history = []
    stalls = 0
    increases = 0
    converged = False
    n_free = int(np.sum(free))
    for q in cfg.shells:
        last_mis = None
        for _ in range(cfg.outer):
            keep = shell_rays(rays_cur, q)
            obj, resid = objective(n_vec, rays_cur, keep)
            mis = float(resid @ resid)
            history.append(mis / nd**2)
            if last_mis is not None and mis > last_mis * (1 + 1e-12):
                increases += 1
                if increases >= 3:
                    raise DivergenceError(
                        f"misfit increased 3 consecutive steps (shell {q})"
                    )
            else:
                increases = 0
            last_mis = mis
            if mis <= cfg.misfit_tol * nd**2:
                converged = True
                break

            sub = [rays_cur[i] for i in keep]
            rows, _, w, xq, _ = _ray_quadrature(sub, ds)
            sens = w * m_cur.speed(xq)
            X = TrilinearOp(tpl, xq, sens, rows, len(sub))

            def embed(z):
                full = np.zeros(len(n_vec))
                full[free] = z
                return full

            def A(z):
                f = embed(z)
                return np.concatenate([X.apply(f), beta * G.apply(f)])

            def AT(y):
                f = X.adjoint(y[: len(sub)]) + beta * G.adjoint(y[len(sub):])
                return f[free]

            b = np.concatenate([resid, -beta * G.apply(n_vec)])
            dz, _, _ = cgls(A, AT, b, np.zeros(n_free), iters=cfg.inner)
            step = embed(dz)

            accepted = False
            t = 1.0
            while t >= 2.0**-5:
                n_try = n_vec + t * step
                if np.any(n_try <= 0):
                    t *= 0.5
                    continue
                try:
                    # A wild trial speed can throw a ray out of the padded
                    # box within one step; treat that as a failed trial.
                    m_try, rays_try = trace_all(n_try)
                except DomainError:
                    t *= 0.5
                    continue
                obj_try, _ = objective(n_try, rays_try, keep)
                if obj_try is not None and obj_try < obj:
                    n_vec = n_try
                    m_cur, rays_cur = m_try, rays_try
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                stalls += 1
                break
        if converged:
            break
    if stalls >= 3:
        raise DivergenceError("line search stalled on 3 shells")

    depth = ray_depth(rays_cur)
    keep = np.flatnonzero(np.isfinite(depth))
    dropped = len(rays_cur) - len(keep)
    if len(keep):
        dx = (
            np.stack([rays_cur[i].exit_point for i in keep]) - x_out[keep]
        )
        exit_rms = float(np.sqrt(np.mean(np.sum(dx * dx, axis=1))))
    else:
        exit_rms = np.nan
    c_grid = GridField(box.lo, spacing, (1.0 / n_vec).reshape(tuple(dims)))
    final_mis = history[-1] if history else np.nan
    return TomographyResult(
        c=c_grid,
        misfit_history=history,
        dropped=dropped,
        exit_rms=exit_rms,
        converged=bool(converged or final_mis < 1e-6),
    )


# ----------------------------------------------------------------------
# Conductivity ratio from attenuation data.


@dataclasses.dataclass
class AttenuationResult:
    field: GridField
    clamped: int
    inversion: InversionResult


def recover_sigma_over_eps(
    rays,
    data,
    grid,
    reg: float | None = None,
    noise_level: float | None = None,
    iters: int = 200,
    ds: float | None = None,
) -> AttenuationResult:
    """sigma/eps on a grid from -2 log I attenuation data.

    A straight scalar-transform inversion; the physical sign constraint
    is applied afterwards by clamping at zero, with the number of clamped
    nodes reported rather than hidden in a constrained solve.
    """
    inv = xray_invert(
        data, rays, grid, reg=reg, noise_level=noise_level, iters=iters, ds=ds
    )
    vals = inv.field.values
    clamped = int(np.sum(vals < 0.0))
    field = GridField(
        inv.field.origin, inv.field.spacing, np.maximum(vals, 0.0)
    )
    return AttenuationResult(field=field, clamped=clamped, inversion=inv)


# ----------------------------------------------------------------------
# Permittivity from differential transverse data, then mu and sigma.


@dataclasses.dataclass
class PermittivityResult:
    eps: GridField
    mu: GridField
    sigma: GridField | None
    u: GridField
    inversion: InversionResult


def recover_epsilon(
    data,
    rays,
    frames,
    m_ref: MediumSpec,
    eps_ref: float = 1.0,
    sigma_over_eps: GridField | None = None,
    u_boundary=None,
    **solver_opts,
) -> PermittivityResult:
    """eps (and mu, sigma) from differential endpoint pairings.

    data must be taken relative to a reference medium sharing the speed
    and sigma/eps of m_ref and carrying constant permittivity eps_ref.
    The potential u = log sqrt(eps/eps_ref) is recovered first; mu is
    assembled from the speed identity and sigma from the ratio field, so
    those two identities hold on the output exactly.
    """
    inv = trt_invert_for_u(
        data, rays, frames, m_ref, u_boundary=u_boundary, **solver_opts
    )
    u = inv.field
    eps_vals = eps_ref * np.exp(2.0 * u.values)
    c_nodes = np.asarray(
        m_ref.speed(u.node_points()), dtype=float
    ).reshape(u.dims + (1,))
    mu_vals = 1.0 / (c_nodes**2 * eps_vals)
    sig_field = None
    if sigma_over_eps is not None:
        if tuple(sigma_over_eps.dims) != tuple(u.dims):
            raise InconsistentDataError(
                "sigma/eps grid does not match the permittivity grid"
            )
        sig_field = GridField(
            u.origin, u.spacing, sigma_over_eps.values * eps_vals
        )
    return PermittivityResult(
        eps=GridField(u.origin, u.spacing, eps_vals),
        mu=GridField(u.origin, u.spacing, mu_vals),
        sigma=sig_field,
        u=u,
        inversion=inv,
    )


# ----------------------------------------------------------------------
# The end-to-end pipeline.


@dataclasses.dataclass
class PipelineConfig:
    """Knobs for the staged reconstruction.

    radial_speed switches the c-stage to the Abel path (radial media
    only).  truth, when supplied, adds relative-error diagnostics inside
    the kappa >= eval_level region.  trt_ray_limit bounds the tensor
    stage's ray count (deterministic stride subsampling) to keep its row
    matrices in memory.
    """

    dims: tuple = (64, 64, 64)
    inv_dims: tuple = (33, 33, 33)
    domain_radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    box: Box | None = None
    radial_speed: bool = False
    tomography: TomographyConfig | None = None
    reg_xray: float | None = None
    reg_trt: float | None = None
    noise_level: float | None = None
    trt_ray_limit: int = 4000
    trt_ds: float = 0.035
    trt_outer: int = 6
    trt_inner: int = 80
    trace_h: float = 0.01
    eval_level: float = 0.2
    truth: MediumSpec | None = None


@dataclasses.dataclass
class ReconstructionReport:
    """Everything the pipeline found, plus stage diagnostics.

    mu and sigma satisfy mu c^2 eps = 1 and sigma = (sigma/eps) eps
    pointwise by construction.  failed_stage is None on a clean run;
    notes collects anomalies that did not stop the chain.
    """

    jets: BoundaryJets | None = None
    c: GridField | None = None
    sigma_over_eps: GridField | None = None
    eps: GridField | None = None
    mu: GridField | None = None
    sigma: GridField | None = None
    residuals: dict = dataclasses.field(default_factory=dict)
    errors: dict = dataclasses.field(default_factory=dict)
    timings: dict = dataclasses.field(default_factory=dict)
    notes: list = dataclasses.field(default_factory=list)
    failed_stage: str | None = None
    clamped_nodes: int = 0

    def summary_lines(self, timings: bool = True):
        """Flat key=value lines; timings=False drops the wall-clock lines,
        leaving output that is byte-stable across reruns."""
        lines = []
        if timings:
            for k, v in sorted(self.timings.items()):
                lines.append(f"time_{k}={v:.3f}")
        for k, v in sorted(self.residuals.items()):
            if np.isscalar(v):
                lines.append(f"residual_{k}={v:.6e}")
        for k, v in sorted(self.errors.items()):
            lines.append(f"error_{k}={v:.6e}")
        lines.append(f"clamped_nodes={self.clamped_nodes}")
        lines.append(f"failed_stage={self.failed_stage or 'none'}")
        for note in self.notes:
            lines.append(f"note={note}")
        return lines


class _BoundaryShepard:
    """Inverse-distance extension of boundary samples, value calls only."""

    def __init__(self, points, values, power=4.0):
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.power = power

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d2 = np.sum(
            (x[:, None, :] - self.points[None, :, :]) ** 2, axis=-1
        )
        w = (d2 + 1e-12) ** (-self.power / 2.0)
        return (w @ self.values) / np.sum(w, axis=1)


def _relative_l2(rec: np.ndarray, ref: np.ndarray, mask: np.ndarray) -> float:
    num = np.linalg.norm((rec - ref)[mask])
    den = np.linalg.norm(ref[mask])
    return float(num / den) if den > 0 else float(num)


def _fit_jets(symbols) -> tuple[BoundaryJets, dict, list]:
    pts = np.asarray(symbols["x"], dtype=float)
    rho = np.asarray(symbols["rho"], dtype=float)
    s0 = np.asarray(symbols["S0"], dtype=float)
    s1 = np.asarray(symbols["S1"], dtype=float)
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    eps, mu, sig = [], [], []
    dne, dnm = [], []
    conds = []
    notes = []
    kept = []
    for j in range(len(uniq)):
        sel = inverse == j
        try:
            f0 = recover_boundary_order0(
                np.stack([rho[sel], s0[sel]], axis=1)
            )
            f1 = recover_boundary_order1(
                np.stack([rho[sel], s1[sel]], axis=1), f0.eps, f0.mu
            )
        except MxtomoError as exc:
            notes.append(f"boundary point {uniq[j]} skipped: {exc}")
            continue
        kept.append(j)
        eps.append(f0.eps)
        mu.append(f0.mu)
        sig.append(max(f1.sigma, 0.0))
        dne.append(f1.dn_eps)
        dnm.append(f1.dn_mu)
        conds.append(max(f0.cond, f1.cond))
    if not kept:
        raise InconsistentDataError("no boundary point produced a valid fit")
    jets = BoundaryJets(
        uniq[kept],
        np.array(eps),
        np.array(mu),
        np.array(sig),
        np.array(dne),
        np.array(dnm),
    )
    diag = {"jets_max_cond": float(np.max(conds))}
    return jets, diag, notes


def pipeline(dataset, cfg: PipelineConfig | None = None) -> ReconstructionReport:
    """Run the full chain on a dataset; failures tag the report.

    Stages: boundary jets, wave speed, sigma/eps, permittivity, algebraic
    assembly of mu and sigma.  A stage failure records the stage name and
    stops dependent stages; independent diagnostics still run.  With
    cfg.truth set, relative L2 errors are evaluated inside the ball and
    inside the deeper kappa >= eval_level region.
    """
    cfg = cfg or PipelineConfig()
    rep = ReconstructionReport()
    center = np.asarray(cfg.center, dtype=float)
    R = cfg.domain_radius
    box = cfg.box or Box(tuple(center - 1.05 * R), tuple(center + 1.05 * R))
    domain = BallDomain(R, center)
    fol = ball_foliation(R)
    meta = getattr(dataset, "meta", {}) or {}
    eps_ref = float(meta.get("eps_ref", 1.0))

    # Stage 1: boundary jets.
    t0 = time.perf_counter()
    try:
        jets, diag, notes = _fit_jets(dataset.symbols)
        rep.jets = jets
        rep.residuals.update(diag)
        rep.notes.extend(notes)
    except MxtomoError as exc:
        rep.failed_stage = "boundary"
        rep.notes.append(str(exc))
        return rep
    rep.timings["boundary"] = time.perf_counter() - t0

    lens = dataset.lens
    x_in = np.asarray(lens["x_in"], dtype=float)
    v_in = np.asarray(lens["v_in"], dtype=float)
    x_out = np.asarray(lens["x_out"], dtype=float)
    v_out = np.asarray(lens["v_out"], dtype=float)
    tau = np.asarray(lens["tau"], dtype=float)
    c_bdy = float(np.mean(jets.speed()))

    # Stage 2: wave speed.
    t0 = time.perf_counter()
    try:
        if cfg.radial_speed:
            rel = x_in - center
            vhat = v_in / np.linalg.norm(v_in, axis=1, keepdims=True)
            b = np.linalg.norm(np.cross(rel, vhat), axis=1)
            r_prof, c_prof = herglotz_invert(
                b, tau, c_boundary=c_bdy, radius=R
            )
            dims = np.asarray(cfg.dims, dtype=int)
            spacing = (np.asarray(box.hi) - np.asarray(box.lo)) / (dims - 1)
            tpl = GridField(box.lo, spacing, np.zeros(tuple(dims)))
            r_nodes = np.linalg.norm(tpl.node_points() - center, axis=1)
            vals = np.interp(
                r_nodes, r_prof, c_prof, left=c_prof[0], right=c_bdy
            )
            c_grid = GridField(box.lo, spacing, vals.reshape(tuple(dims)))
            rep.residuals["speed_profile_points"] = float(len(r_prof))
        else:
            from .geometry import LensRecord

            records = [
                LensRecord(x_in[i], v_in[i], x_out[i], v_out[i], tau[i])
                for i in range(len(tau))
            ]
            tcfg = cfg.tomography or TomographyConfig(
                dims=cfg.dims,
                box=box,
                domain_radius=R,
                center=tuple(center),
                trace_h=cfg.trace_h,
            )
            tres = traveltime_tomography(
                records, fol, ConstantField(c_bdy), tcfg
            )
            c_grid = tres.c
            rep.residuals["speed_misfit"] = (
                tres.misfit_history[-1] if tres.misfit_history else np.nan
            )
            rep.residuals["tomography_misfit_history"] = tres.misfit_history
            rep.residuals["speed_exit_rms"] = tres.exit_rms
            if tres.dropped:
                rep.notes.append(f"speed stage dropped {tres.dropped} rays")
        rep.c = c_grid
    except MxtomoError as exc:
        rep.failed_stage = "speed"
        rep.notes.append(str(exc))
        return rep
    rep.timings["speed"] = time.perf_counter() - t0

    # Re-trace the acquisition in the recovered speed.
    t0 = time.perf_counter()
    m_rec = MediumSpec.from_speed(SplineField(c_grid), box=box)
    icfg = IntegratorConfig(method="rk4", h=cfg.trace_h, store_every=2)

    # Stage 3: sigma/eps from attenuation.
    att = dataset.attenuation
    att_ids = np.asarray(att["ray_id"], dtype=int)
    att_val = np.asarray(att["value"], dtype=float)
    try:
        rays_att = trace_fan(m_rec, domain, x_in[att_ids], v_in[att_ids], icfg)
        ok = np.array([r.status == "exited" for r in rays_att])
        if np.sum(~ok):
            rep.notes.append(
                f"attenuation stage dropped {int(np.sum(~ok))} rays"
            )
        rays_ok = [r for r, o in zip(rays_att, ok) if o]
        if not np.any(np.abs(att_val) > 0):
            rep.notes.append("attenuation data identically zero")
        soe_res = recover_sigma_over_eps(
            rays_ok,
            att_val[ok],
            rep.c,
            reg=cfg.reg_xray,
            noise_level=cfg.noise_level,
        )
        rep.sigma_over_eps = soe_res.field
        rep.clamped_nodes = soe_res.clamped
        rep.residuals["attenuation_rel"] = soe_res.inversion.residual
    except MxtomoError as exc:
        rep.failed_stage = "attenuation"
        rep.notes.append(str(exc))
        rep.timings["attenuation"] = time.perf_counter() - t0
        return rep
    rep.timings["attenuation"] = time.perf_counter() - t0

    # Stage 4: permittivity from differential transverse data.
    t0 = time.perf_counter()
    trt = dataset.trt
    trt_ids = np.asarray(trt["ray_id"], dtype=int)
    trt_val = np.asarray(trt["values"], dtype=float)
    seeds = np.asarray(trt["seed"], dtype=float)
    stride = max(1, int(np.ceil(len(trt_ids) / cfg.trt_ray_limit)))
    sel = np.arange(0, len(trt_ids), stride)
    try:
        rays_trt = trace_fan(
            m_rec,
            domain,
            x_in[trt_ids[sel]],
            v_in[trt_ids[sel]],
            icfg,
            eta0=seeds[sel],
        )
        ok = np.array([r.status == "exited" for r in rays_trt])
        rays_ok = [r for r, o in zip(rays_trt, ok) if o]
        frames = [FrameTransport(r.s, r.eta, r.zeta) for r in rays_ok]
        if np.sum(~ok):
            rep.notes.append(
                f"permittivity stage dropped {int(np.sum(~ok))} rays"
            )
        u_bdy = np.log(np.sqrt(jets.eps / eps_ref))
        u_boundary = (
            _BoundaryShepard(jets.points, u_bdy)
            if np.max(np.abs(u_bdy)) > 1e-6
            else None
        )
        perm = recover_epsilon(
            trt_val[sel][ok],
            rays_ok,
            frames,
            m_rec,
            eps_ref=eps_ref,
            sigma_over_eps=rep.sigma_over_eps,
            u_boundary=u_boundary,
            inv_dims=cfg.inv_dims,
            out_dims=cfg.dims,
            box=box,
            reg=cfg.reg_trt,
            outer=cfg.trt_outer,
            inner=cfg.trt_inner,
            ds=cfg.trt_ds,
            anchor_radius=R,
            center=tuple(center),
        )
        rep.eps = perm.eps
        rep.mu = perm.mu
        rep.sigma = perm.sigma
        rep.residuals["trt_rel"] = perm.inversion.residual
    except MxtomoError as exc:
        rep.failed_stage = "permittivity"
        rep.notes.append(str(exc))
        rep.timings["permittivity"] = time.perf_counter() - t0
        return rep
    rep.timings["permittivity"] = time.perf_counter() - t0

    # Truth diagnostics.
    if cfg.truth is not None and rep.eps is not None:
        nodes = rep.eps.node_points()
        kap = fol.kappa.value(nodes)
        inside = kap >= 0.0
        deep = kap >= cfg.eval_level
        tm = cfg.truth
        pairs = [
            ("c", rep.c, tm.speed(nodes)),
            ("sigma_over_eps", rep.sigma_over_eps, tm.sigma_over_eps(nodes)),
            ("eps", rep.eps, tm.epsilon.value(nodes)),
            ("mu", rep.mu, tm.mu.value(nodes)),
            ("sigma", rep.sigma, tm.sigma.value(nodes)),
        ]
        for name, grid, ref in pairs:
            if grid is None:
                continue
            rec = grid.values[..., 0].reshape(-1)
            rep.errors[f"{name}_ball"] = _relative_l2(rec, ref, inside)
            rep.errors[f"{name}_deep"] = _relative_l2(rec, ref, deep)
    return rep
