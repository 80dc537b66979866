"""Ray transforms along traced geodesics and their regularized inverses.

Two data routes share the quadrature scaffolding here.  The scalar route
integrates a field along rays (travel-time and attenuation data live in
this form).  The tensor route integrates a symmetric 2-tensor against
parallel-transported polarization vectors, and also exposes the endpoint
pairing that the transverse data is differentially extracted from.

Forward synthesis and inversion deliberately cross a representation
boundary: synthesis samples fields through their own (cubic or analytic)
evaluators with composite Simpson weights, while the inverse operators are
built from trilinear or B-spline row matrices with exact transposes.  A
synth -> invert loop therefore never inverts its own discretization.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import convolve1d

from .errors import CoverageError, DomainError, InconsistentDataError
from .fields import (
    Field,
    GridField,
    SplineField,
    _bspline_weights,
    sym6_quadratic_form,
)
from .geometry import _hermite, _transport_rhs
from .media import MediumSpec

__all__ = [
    "RayDatum",
    "AcquisitionSet",
    "TrilinearOp",
    "GradOp",
    "cgls",
    "InversionResult",
    "xray_forward",
    "xray_invert",
    "coverage_map",
    "trt_forward",
    "trt_endpoint_extract",
    "synthesize_xi_endpoint",
    "trt_invert_for_u",
    "filter_rays_by_level",
]


# ----------------------------------------------------------------------
# Acquisition records.


@dataclasses.dataclass
class RayDatum:
    """What a detector pair sees for one ray.

    log_attenuation is -2 log I (nonnegative for sigma >= 0) and doubles
    as the scalar-transform data for sigma/eps.  trt_values holds up to
    three transverse quadratic-form integrals, one per polarization
    (eta, zeta, and their normalized mix).  frame_seed is the eta used at
    the entry point, so the frame can be reproduced from geometry alone.
    """

    ray_id: int
    tau: float
    exit_point: np.ndarray
    exit_dir: np.ndarray
    log_attenuation: float | None = None
    trt_values: np.ndarray | None = None
    frame_seed: np.ndarray | None = None


@dataclasses.dataclass
class AcquisitionSet:
    """A fan of entry states covering the accessible boundary.

    entries/directions are (n, 3); directions point into the domain and
    need not be normalized (tracing rescales to the metric).  level_cap
    restricts use of the fan to the foliation layer kappa <= level_cap.
    """

    entries: np.ndarray
    directions: np.ndarray
    level_cap: float = 1.0
    frame_seeds: np.ndarray | None = None

    def __post_init__(self):
        self.entries = np.atleast_2d(np.asarray(self.entries, dtype=float))
        self.directions = np.atleast_2d(
            np.asarray(self.directions, dtype=float)
        )
        if self.entries.shape != self.directions.shape:
            raise ValueError("entries and directions must have equal shape")
        if self.frame_seeds is not None:
            self.frame_seeds = np.atleast_2d(
                np.asarray(self.frame_seeds, dtype=float)
            )

    def __len__(self) -> int:
        return len(self.entries)


# ----------------------------------------------------------------------
# Quadrature along rays.


def _simpson_nodes(ray, ds):
    """Uniform Simpson nodes and weights over one ray's arclength."""
    length = float(ray.s[-1])
    n = max(4, int(np.ceil(length / ds)))
    if n % 2:
        n += 1
    s = np.linspace(0.0, length, n + 1)
    w = np.full(n + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    w *= length / n / 3.0
    return s, w


def _ray_quadrature(rays, ds):
    """Concatenated Simpson rule over a ray list.

    Returns (rows, s, w, x, offsets): rows maps each quadrature sample to
    its ray index, offsets[k]:offsets[k+1] slices ray k's samples.
    """
    rows, svals, weights, points = [], [], [], []
    offsets = np.zeros(len(rays) + 1, dtype=np.int64)
    for k, ray in enumerate(rays):
        s, w = _simpson_nodes(ray, ds)
        rows.append(np.full(len(s), k, dtype=np.int64))
        svals.append(s)
        weights.append(w)
        points.append(ray.interp_x(s))
        offsets[k + 1] = offsets[k] + len(s)
    return (
        np.concatenate(rows),
        np.concatenate(svals),
        np.concatenate(weights),
        np.concatenate(points, axis=0),
        offsets,
    )


def _frames_at(m: MediumSpec, rays, frames, s_all, offsets):
    """Transported eta and ray velocity at arbitrary arclengths.

    Hermite interpolation from the stored samples; the eta derivative
    nodes come from the transport equation itself, so the interpolant
    keeps the fourth-order accuracy of the underlying trace.
    """
    eta = np.empty((len(s_all), 3))
    vel = np.empty((len(s_all), 3))
    for k, (ray, fr) in enumerate(zip(rays, frames)):
        sl = slice(offsets[k], offsets[k + 1])
        deta = _transport_rhs(m, ray.x, ray.v, fr.eta)
        eta[sl] = _hermite(ray.s, fr.eta, deta, s_all[sl])
        vel[sl] = ray.interp_v(s_all[sl])
    return eta, vel


def _as_scalar_evaluator(f):
    if isinstance(f, GridField):
        return SplineField(f).value
    if isinstance(f, Field):
        return f.value
    if callable(f):
        return f
    raise TypeError(f"cannot evaluate {type(f).__name__} along rays")


def _as_sym6_evaluator(t):
    if isinstance(t, GridField):
        if t.ncomp != 6:
            raise ValueError("tensor GridField must have 6 components")
        return SplineField(t).sample
    if callable(t):
        return t
    raise TypeError(f"cannot evaluate {type(t).__name__} as a tensor field")


# ----------------------------------------------------------------------
# Scalar route.


def xray_forward(f, rays, ds=0.01) -> np.ndarray:
    """Line integrals of a scalar field over traced rays.

    f may be a scalar GridField (sampled through its cubic interpolant),
    a Field, or a callable (n, 3) -> (n,).  Composite Simpson with
    arclength step <= ds on each ray's Hermite path.
    """
    ev = _as_scalar_evaluator(f)
    rows, _, w, x, _ = _ray_quadrature(rays, ds)
    try:
        vals = np.asarray(ev(x), dtype=float)
    except DomainError as exc:
        raise CoverageError(f"ray leaves the field support: {exc}") from exc
    return np.bincount(rows, weights=w * vals, minlength=len(rays))


class TrilinearOp:
    """Row-summed trilinear sampling operator on a node grid.

    apply maps flattened node values f to per-row quadrature sums
    sum_q w_q f(x_q); adjoint is the exact transpose (bincount scatter),
    so <Af, d> == <f, A^T d> to roundoff.  Rows are whatever grouping the
    caller encodes in `rows` (here: one row per ray).
    """

    def __init__(self, grid: GridField, points, weights, rows, n_rows):
        origin = grid.origin
        spacing = grid.spacing
        dims = np.array(grid.dims)
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        tol = 1e-9 * float(np.max(spacing))
        if np.any(pts < origin - tol) or np.any(pts > grid.upper + tol):
            bad = pts[
                np.any(
                    (pts < origin - tol) | (pts > grid.upper + tol), axis=1
                )
            ][0]
            raise CoverageError(f"sample {bad} outside grid box")
        t = (np.clip(pts, origin, grid.upper) - origin) / spacing
        i = np.minimum(t.astype(np.int64), dims - 2)
        f = t - i
        strides = np.array(
            [dims[1] * dims[2], dims[2], 1], dtype=np.int64
        )
        base = i @ strides
        corner = np.array(
            [
                [di, dj, dk]
                for di in (0, 1)
                for dj in (0, 1)
                for dk in (0, 1)
            ],
            dtype=np.int64,
        )
        self.idx = base[:, None] + corner @ strides
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        w8 = (
            wx[:, corner[:, 0]] * wy[:, corner[:, 1]] * wz[:, corner[:, 2]]
        )
        self.w8 = w8 * np.asarray(weights, dtype=float)[:, None]
        self.rows = np.asarray(rows, dtype=np.int64)
        self.n_rows = int(n_rows)
        self.n_nodes = int(np.prod(dims))

    def apply(self, fflat: np.ndarray) -> np.ndarray:
        vals = np.sum(fflat[self.idx] * self.w8, axis=1)
        return np.bincount(self.rows, weights=vals, minlength=self.n_rows)

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        a = d[self.rows]
        return np.bincount(
            self.idx.ravel(),
            weights=(a[:, None] * self.w8).ravel(),
            minlength=self.n_nodes,
        )


class GradOp:
    """Forward-difference gradient on a node lattice.

    apply returns the three difference fields stacked and flattened; rows
    touching the far face of each axis are zero, which keeps the operator
    square-free and the adjoint exact by construction.
    """

    def __init__(self, dims, spacing):
        self.dims = tuple(int(d) for d in dims)
        self.spacing = np.asarray(spacing, dtype=float)
        self.n = int(np.prod(self.dims))

    def apply(self, fflat: np.ndarray) -> np.ndarray:
        f = fflat.reshape(self.dims)
        out = np.zeros((3,) + self.dims)
        out[0, :-1] = np.diff(f, axis=0) / self.spacing[0]
        out[1, :, :-1] = np.diff(f, axis=1) / self.spacing[1]
        out[2, :, :, :-1] = np.diff(f, axis=2) / self.spacing[2]
        return out.reshape(-1)

    def adjoint(self, gflat: np.ndarray) -> np.ndarray:
        g = gflat.reshape((3,) + self.dims)
        a = np.zeros(self.dims)
        d = g[0, :-1] / self.spacing[0]
        a[1:] += d
        a[:-1] -= d
        d = g[1, :, :-1] / self.spacing[1]
        a[:, 1:] += d
        a[:, :-1] -= d
        d = g[2, :, :, :-1] / self.spacing[2]
        a[:, :, 1:] += d
        a[:, :, :-1] -= d
        return a.reshape(-1)


def cgls(apply_A, apply_AT, b, x0, iters=200, tol=1e-10):
    """Conjugate gradients on the normal equations, in factored form.

    Minimizes ||A x - b|| without ever forming A^T A.  Returns
    (x, relres, k) where relres = ||A x - b|| / ||b||.
    """
    x = np.array(x0, dtype=float)
    r = b - apply_A(x)
    s = apply_AT(r)
    p = s.copy()
    gamma = float(s @ s)
    nb = float(np.linalg.norm(b)) or 1.0
    stop2 = (tol * np.sqrt(gamma)) ** 2 if gamma > 0 else 0.0
    k = 0
    for k in range(1, iters + 1):
        q = apply_A(p)
        qq = float(q @ q)
        if qq == 0.0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = apply_AT(r)
        gamma_new = float(s @ s)
        if gamma_new <= stop2:
            gamma = gamma_new
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, float(np.linalg.norm(r)) / nb, k


@dataclasses.dataclass
class InversionResult:
    """Regularized least-squares output with solver diagnostics.

    residual is relative to the data norm and measured on the data block
    only (the penalty block is excluded).  coverage, when present, is the
    row-sum density of the sampling operator: a quick look at which nodes
    the rays actually constrain.
    """

    field: GridField
    residual: float
    iterations: int
    converged: bool
    reg: float
    coverage: GridField | None = None
    model: SplineField | None = None
    history: list | None = None


def _grid_template(grid) -> GridField:
    if isinstance(grid, GridField):
        return grid
    origin, spacing, dims = grid
    return GridField(origin, spacing, np.zeros(tuple(int(d) for d in dims)))


def coverage_map(rays, grid, ds=None) -> GridField:
    """Ray-sample density on a grid (adjoint of the row operator at 1)."""
    tpl = _grid_template(grid)
    if ds is None:
        ds = 0.75 * float(np.min(tpl.spacing))
    rows, _, w, x, _ = _ray_quadrature(rays, ds)
    op = TrilinearOp(tpl, x, w, rows, len(rays))
    dens = op.adjoint(np.ones(len(rays)))
    return GridField(tpl.origin, tpl.spacing, dens.reshape(tpl.dims))


def xray_invert(
    data,
    rays,
    grid,
    reg: float | None = None,
    iters: int = 200,
    ds: float | None = None,
    noise_level: float | None = None,
    tol: float = 1e-10,
) -> InversionResult:
    """Recover a scalar node field from ray integrals.

    Solves min ||X f - d||^2 + reg^2 ||G f||^2 with X the trilinear row
    operator and G the lattice gradient, by CGLS on the stacked system.
    reg defaults to 1e-4 ||d||; when a relative noise_level is declared
    instead, reg is chosen by discrepancy: the data residual is driven to
    the noise floor by bisection on log reg.
    """
    tpl = _grid_template(grid)
    if ds is None:
        ds = 0.75 * float(np.min(tpl.spacing))
    d = np.asarray(data, dtype=float)
    if len(d) != len(rays):
        raise InconsistentDataError(
            f"{len(d)} data values for {len(rays)} rays"
        )
    rows, _, w, x, _ = _ray_quadrature(rays, ds)
    op = TrilinearOp(tpl, x, w, rows, len(rays))
    G = GradOp(tpl.dims, tpl.spacing)
    nd = float(np.linalg.norm(d)) or 1.0
    n_nodes = op.n_nodes

    def solve(beta, f0, nit):
        def A(f):
            return np.concatenate([op.apply(f), beta * G.apply(f)])

        def AT(y):
            return op.adjoint(y[: len(d)]) + beta * G.adjoint(y[len(d):])

        b = np.concatenate([d, np.zeros(3 * n_nodes)])
        f, _, k = cgls(A, AT, b, f0, iters=nit, tol=tol)
        return f, float(np.linalg.norm(op.apply(f) - d)), k

    if reg is None and noise_level is not None and noise_level > 0:
        # Discrepancy principle: residual grows monotonically with reg.
        target = noise_level * nd
        lo, hi = np.log10(1e-7 * nd), np.log10(10.0 * nd)
        f = np.zeros(n_nodes)
        beta = 10.0 ** ((lo + hi) / 2)
        k_tot = 0
        for _ in range(12):
            beta = 10.0 ** ((lo + hi) / 2)
            f, res, k = solve(beta, f, max(40, iters // 4))
            k_tot += k
            if res > target:
                hi = np.log10(beta)
            else:
                lo = np.log10(beta)
        reg = beta
        f, res, k = solve(reg, f, iters)
        k_tot += k
    else:
        if reg is None:
            reg = 1e-4 * nd
        f, res, k_tot = solve(reg, np.zeros(n_nodes), iters)

    converged = res <= max(3.0 * tol * nd, (noise_level or 0.0) * nd * 1.2)
    dens = op.adjoint(np.ones(len(rays)))
    out = GridField(tpl.origin, tpl.spacing, f.reshape(tpl.dims))
    return InversionResult(
        field=out,
        residual=res / nd,
        iterations=k_tot,
        converged=bool(converged or res / nd < 1e-6),
        reg=float(reg),
        coverage=GridField(tpl.origin, tpl.spacing, dens.reshape(tpl.dims)),
    )


# ----------------------------------------------------------------------
# Tensor route.

_SQRT2 = np.sqrt(2.0)


def _polarizations(eta, vel, n_pol):
    """Transverse frame vectors at quadrature samples.

    zeta is rebuilt from the velocity so it stays exactly orthogonal to
    the ray even between stored samples; transport preserves the cross
    product, so this agrees with transporting zeta itself.
    """
    vhat = vel / np.linalg.norm(vel, axis=-1, keepdims=True)
    zeta = np.cross(vhat, eta)
    pols = [eta, zeta, (eta + zeta) / _SQRT2]
    return pols[:n_pol]


def trt_forward(
    tensor, m: MediumSpec, rays, frames, ds=0.01, n_pol=3
) -> np.ndarray:
    """Transverse ray transform of a symmetric 2-tensor.

    Returns (n_rays, n_pol) values of ∫ T(m_j, m_j) ds with m_j running
    over the transported polarization eta, its conjugate zeta, and the
    normalized mix (eta + zeta)/sqrt(2).  tensor is a 6-component
    GridField or a callable (n, 3) -> (n, 6) in xx, yy, zz, xy, xz, yz
    order.
    """
    if len(frames) != len(rays):
        raise InconsistentDataError("one frame per ray required")
    ev = _as_sym6_evaluator(tensor)
    rows, s, w, x, offs = _ray_quadrature(rays, ds)
    eta, vel = _frames_at(m, rays, frames, s, offs)
    try:
        t6 = np.asarray(ev(x), dtype=float)
    except DomainError as exc:
        raise CoverageError(f"ray leaves the tensor support: {exc}") from exc
    out = np.empty((len(rays), n_pol))
    for j, mv in enumerate(_polarizations(eta, vel, n_pol)):
        out[:, j] = np.bincount(
            rows,
            weights=w * sym6_quadratic_form(t6, mv),
            minlength=len(rays),
        )
    return out


def trt_endpoint_extract(ray, frame, xi_a, xi_b) -> float:
    """c^{-2} <xi, eta> at exit minus the same pairing at entry.

    This is the boundary-measurable combination whose difference between
    two media equals half the transverse transform of the tensor
    difference; the unknown common integration constant cancels.
    """
    if len(frame.s) != len(ray.s) or not np.allclose(frame.s, ray.s):
        raise InconsistentDataError("frame samples do not match the ray")
    ca2 = float(np.sum(ray.v[0] ** 2))
    cb2 = float(np.sum(ray.v[-1] ** 2))
    ea, eb = frame.eta[0], frame.eta[-1]
    if abs(np.sum(ea * ea) - ca2) > 1e-6 * ca2:
        raise InconsistentDataError("frame is not metric-unit at entry")
    return float(xi_b @ eb) / cb2 - float(xi_a @ ea) / ca2


def synthesize_xi_endpoint(
    m: MediumSpec, ray, frame, tensor_at, C=0.0, pairing_a=0.0, nsub=8
):
    """Integrate the pairing transport and return endpoint covectors.

    The weighted pairing p = c^{-2} <xi, eta> obeys p' = (T(eta, eta) +
    C)/2 along the ray; C is the constant the boundary data cannot see.
    Quadrature is per-interval Simpson on an nsub-refined grid, on
    purpose not sharing nodes with trt_forward.  Returns (xi_a, xi_b)
    with xi = p eta (any covector with the right pairing would do).
    """
    if nsub % 2:
        nsub += 1
    s_nodes = np.asarray(ray.s)
    fine = []
    for k in range(len(s_nodes) - 1):
        seg = np.linspace(s_nodes[k], s_nodes[k + 1], nsub + 1)
        fine.append(seg if k == 0 else seg[1:])
    s_f = np.concatenate(fine)
    x_f = ray.interp_x(s_f)
    deta = _transport_rhs(m, ray.x, ray.v, frame.eta)
    eta_f = _hermite(ray.s, frame.eta, deta, s_f)
    try:
        t6 = np.asarray(tensor_at(x_f), dtype=float)
    except DomainError as exc:
        raise CoverageError(f"ray leaves the tensor support: {exc}") from exc
    integrand = sym6_quadratic_form(t6, eta_f) + C
    total = 0.0
    npt = nsub + 1
    for k in range(len(s_nodes) - 1):
        i0 = k * nsub
        seg = integrand[i0 : i0 + npt]
        h = (s_f[i0 + npt - 1] - s_f[i0]) / nsub
        total += h / 3.0 * (
            seg[0]
            + seg[-1]
            + 4.0 * np.sum(seg[1:-1:2])
            + 2.0 * np.sum(seg[2:-2:2])
        )
    p_b = pairing_a + 0.5 * total
    xi_a = pairing_a * frame.eta[0]
    xi_b = p_b * frame.eta[-1]
    return xi_a, xi_b


# ----------------------------------------------------------------------
# Tensor inversion for the log-permittivity potential.


class _SplineDesignOp:
    """Cached cubic B-spline patch geometry at a fixed point set.

    Stores per-sample patch indices into the coefficient lattice
    (dims + 2 per axis) and per-axis basis weights for derivative orders
    0..2, with grid-spacing powers folded in.  Row matrices for any
    differential-operator combination are assembled from these, and the
    same cache evaluates derivative fields of a coefficient vector, so
    the forward model and its Jacobian cannot drift apart.
    """

    def __init__(self, grid: GridField, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        tol = 1e-9 * float(np.max(grid.spacing))
        if np.any(pts < grid.origin - tol) or np.any(pts > grid.upper + tol):
            raise CoverageError("sample outside the inversion grid box")
        t = (np.clip(pts, grid.origin, grid.upper) - grid.origin) / grid.spacing
        dims = np.array(grid.dims)
        i = np.minimum(t.astype(np.int64), dims - 2)
        u = t - i
        cdims = dims + 2
        strides = np.array(
            [cdims[1] * cdims[2], cdims[2], 1], dtype=np.int64
        )
        offs = np.arange(4, dtype=np.int64)
        flat = (
            (i[:, 0, None] + offs)[:, :, None, None] * strides[0]
            + (i[:, 1, None] + offs)[:, None, :, None] * strides[1]
            + (i[:, 2, None] + offs)[:, None, None, :] * strides[2]
        )
        self.idx = flat.reshape(len(pts), 64).astype(np.int32)
        self.W = []
        for ax in range(3):
            per_order = []
            for order in range(3):
                wa = _bspline_weights(u[:, ax], order)
                per_order.append(wa / grid.spacing[ax] ** order)
            self.W.append(per_order)
        self.n_pts = len(pts)
        self.n_coef = int(np.prod(cdims))
        self.cdims = tuple(int(v) for v in cdims)

    def _blocks(self, ox, oy, oz, sl):
        return (
            self.W[0][ox][sl][:, :, None, None]
            * self.W[1][oy][sl][:, None, :, None]
            * self.W[2][oz][sl][:, None, None, :]
        ).reshape(-1, 64)

    def evaluate(self, zflat, orders):
        """Derivative samples of the coefficient field, one per order triple."""
        out = [np.empty(self.n_pts) for _ in orders]
        for lo in range(0, self.n_pts, 65536):
            sl = slice(lo, min(lo + 65536, self.n_pts))
            patch = zflat[self.idx[sl]]
            for j, (ox, oy, oz) in enumerate(orders):
                out[j][sl] = np.einsum(
                    "np,np->n", patch, self._blocks(ox, oy, oz, sl)
                )
        return out

    def rows(self, terms):
        """(n, 64) row matrix sum_t coef_t * D^t B over the patch."""
        out = np.zeros((self.n_pts, 64))
        for lo in range(0, self.n_pts, 65536):
            sl = slice(lo, min(lo + 65536, self.n_pts))
            for coef, ox, oy, oz in terms:
                out[sl] += coef[sl, None] * self._blocks(ox, oy, oz, sl)
        return out


_DERIV_ORDERS = (
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (2, 0, 0),
    (0, 2, 0),
    (0, 0, 2),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
)

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _coef_smoother(cdims, passes):
    """Separable binomial filter on the coefficient lattice (self-adjoint).

    The tensor rows act like a third-order derivative, so plain CGLS
    resolves rough coefficient modes first and starves the smooth ones the
    unknown actually lives in; solving in the filtered variable z = S w
    reverses that ordering.  More aggressive filtering raises the residual
    floor, so one pass is the default.
    """
    if passes <= 0:
        return lambda z: z

    def S(z):
        # zero-padded ends keep the filter matrix exactly symmetric, which
        # the CGLS adjoint pairing relies on
        w = z.reshape(cdims)
        for _ in range(passes):
            for ax in range(3):
                w = convolve1d(w, _BINOMIAL5, axis=ax, mode="constant")
        return w.reshape(-1)

    return S


def _row_scatter_apply(idx, rows, nrows_ids, n_rows, z):
    vals = np.sum(z[idx] * rows, axis=1)
    return np.bincount(nrows_ids, weights=vals, minlength=n_rows)


def _row_scatter_adjoint(idx, rows, nrows_ids, n_coef, d):
    a = d[nrows_ids]
    return np.bincount(
        idx.ravel().astype(np.int64),
        weights=(a[:, None] * rows).ravel(),
        minlength=n_coef,
    )


def trt_invert_for_u(
    data,
    rays,
    frames,
    m: MediumSpec,
    u_boundary=None,
    inv_dims=(33, 33, 33),
    out_dims=(64, 64, 64),
    box=None,
    reg: float | None = None,
    outer: int = 6,
    inner: int = 80,
    ds: float = 0.035,
    n_pol: int = 3,
    anchor_radius: float = 1.0,
    center=(0.0, 0.0, 0.0),
    anchor_weight: float = 10.0,
    tol: float = 5e-4,
    smooth_passes: int = 1,
) -> InversionResult:
    """Gauss-Newton recovery of u = log sqrt(eps) from differential data.

    data is (n_rays, n_pol) endpoint pairings, equal to half the
    transverse transform of A(u) when the reference shares c and sigma/eps
    and has constant permittivity.  The unknown is a cubic B-spline on an
    inv_dims lattice; each outer step linearizes A(u) in u and solves the
    damped normal equations by CGLS in a binomially filtered coefficient
    variable (see _coef_smoother; smooth_passes = 0 disables it).  Gauge:
    u is anchored to u_boundary (zero if omitted) at lattice nodes with
    |x - center| >= anchor_radius, which pins the constant the
    differential data cannot see.
    """
    box = box if box is not None else m.box
    data = np.asarray(data, dtype=float)
    if data.shape != (len(rays), n_pol):
        raise InconsistentDataError(
            f"data shape {data.shape} != ({len(rays)}, {n_pol})"
        )
    d = data.reshape(-1)
    nd = float(np.linalg.norm(d)) or 1.0

    def make_grid(dims):
        dims = np.asarray(dims, dtype=int)
        lo = np.asarray(box.lo, dtype=float)
        hi = np.asarray(box.hi, dtype=float)
        return GridField(lo, (hi - lo) / (dims - 1), np.zeros(tuple(dims)))

    inv_grid = make_grid(inv_dims)
    out_grid = make_grid(out_dims)

    # Quadrature samples and frozen medium/frame quantities.
    rows_id, s_all, w_all, x_all, offs = _ray_quadrature(rays, ds)
    eta, vel = _frames_at(m, rays, frames, s_all, offs)
    c, gc = m.speed_and_gradient(x_all)
    pols = _polarizations(eta, vel, n_pol)
    design = _SplineDesignOp(inv_grid, x_all)
    n_coef = design.n_coef

    # Anchor block: lattice nodes outside the informative region.
    node_pts = inv_grid.node_points()
    r = np.linalg.norm(node_pts - np.asarray(center, dtype=float), axis=1)
    anchors = node_pts[r >= anchor_radius * (1.0 - 1e-12)]
    if len(anchors) == 0:
        raise CoverageError(
            "no lattice nodes outside anchor_radius to fix the gauge"
        )
    anchor_op = _SplineDesignOp(inv_grid, anchors)
    ones = np.ones(anchor_op.n_pts)
    anchor_rows = anchor_op.rows([(ones, 0, 0, 0)]) * anchor_weight
    if u_boundary is None:
        u_bc = np.zeros(anchor_op.n_pts)
    else:
        u_bc = np.asarray(u_boundary.value(anchors), dtype=float)

    G = GradOp(design.cdims, inv_grid.spacing)
    if reg is None:
        reg = 1e-4 * nd

    n_data = len(d)
    n_anchor = anchor_op.n_pts
    anchor_ids = np.arange(n_anchor, dtype=np.int64)

    def u_derivs(z):
        gx, gy, gz, hxx, hyy, hzz, hxy, hxz, hyz = design.evaluate(
            z, _DERIV_ORDERS
        )
        gu = np.stack([gx, gy, gz], axis=-1)
        lap = hxx + hyy + hzz
        return gu, lap, (hxx, hyy, hzz, hxy, hxz, hyz)

    def model_and_rows(z, want_rows):
        """Per-datum model values F(z) and, optionally, Jacobian rows."""
        gu, lap, hess = u_derivs(z)
        hxx, hyy, hzz, hxy, hxz, hyz = hess
        gu2 = np.sum(gu * gu, axis=-1)
        F = np.empty((len(rays), n_pol))
        J_rows = []
        for j, mv in enumerate(pols):
            m2 = np.sum(mv * mv, axis=-1)
            hmm = (
                hxx * mv[:, 0] ** 2
                + hyy * mv[:, 1] ** 2
                + hzz * mv[:, 2] ** 2
                + 2.0 * hxy * mv[:, 0] * mv[:, 1]
                + 2.0 * hxz * mv[:, 0] * mv[:, 2]
                + 2.0 * hyz * mv[:, 1] * mv[:, 2]
            )
            gcm = np.sum(gc * mv, axis=-1)
            gum = np.sum(gu * mv, axis=-1)
            a_q = (
                (-lap + gu2) * m2
                + 2.0 * hmm
                + (4.0 / c) * gcm * gum
            )
            F[:, j] = 0.5 * np.bincount(
                rows_id, weights=w_all * a_q, minlength=len(rays)
            )
            if want_rows:
                hw = 0.5 * w_all
                alpha = (
                    2.0 * m2[:, None] * gu
                    + (4.0 / c * gcm)[:, None] * mv
                )
                terms = [
                    (hw * alpha[:, 0], 1, 0, 0),
                    (hw * alpha[:, 1], 0, 1, 0),
                    (hw * alpha[:, 2], 0, 0, 1),
                    (hw * (2.0 * mv[:, 0] ** 2 - m2), 2, 0, 0),
                    (hw * (2.0 * mv[:, 1] ** 2 - m2), 0, 2, 0),
                    (hw * (2.0 * mv[:, 2] ** 2 - m2), 0, 0, 2),
                    (hw * 4.0 * mv[:, 0] * mv[:, 1], 1, 1, 0),
                    (hw * 4.0 * mv[:, 0] * mv[:, 2], 1, 0, 1),
                    (hw * 4.0 * mv[:, 1] * mv[:, 2], 0, 1, 1),
                ]
                J_rows.append(design.rows(terms))
        return F.reshape(-1), J_rows

    def blocks(z):
        Fz, _ = model_and_rows(z, want_rows=False)
        r1 = Fz - d
        r2 = reg * G.apply(z)
        r3 = _row_scatter_apply(
            anchor_op.idx, anchor_rows, anchor_ids, n_anchor, z
        ) - anchor_weight * u_bc
        return r1, r2, r3

    def objective(z):
        r1, r2, r3 = blocks(z)
        return float(r1 @ r1 + r2 @ r2 + r3 @ r3), float(
            np.linalg.norm(r1)
        )

    S = _coef_smoother(design.cdims, smooth_passes)
    z = np.zeros(n_coef)
    obj, mis = objective(z)
    history = [mis / nd]
    converged = False
    it_done = 0
    for it in range(1, outer + 1):
        Fz, J_rows = model_and_rows(z, want_rows=True)
        r1 = Fz - d

        def J_apply(dz):
            cols = [
                _row_scatter_apply(design.idx, Jr, rows_id, len(rays), dz)
                for Jr in J_rows
            ]
            return np.stack(cols, axis=1).reshape(-1)

        def J_adjoint(y):
            y2 = y.reshape(len(rays), n_pol)
            out = np.zeros(n_coef)
            for j, Jr in enumerate(J_rows):
                out += _row_scatter_adjoint(
                    design.idx, Jr, rows_id, n_coef, y2[:, j]
                )
            return out

        def A(dw):
            dz = S(dw)
            return np.concatenate(
                [
                    J_apply(dz),
                    reg * G.apply(dz),
                    _row_scatter_apply(
                        anchor_op.idx, anchor_rows, anchor_ids, n_anchor, dz
                    ),
                ]
            )

        def AT(y):
            y1 = y[:n_data]
            y2 = y[n_data : n_data + 3 * n_coef]
            y3 = y[n_data + 3 * n_coef :]
            return S(
                J_adjoint(y1)
                + reg * G.adjoint(y2)
                + _row_scatter_adjoint(
                    anchor_op.idx, anchor_rows, anchor_ids, n_coef, y3
                )
            )

        b = np.concatenate(
            [
                -r1,
                -reg * G.apply(z),
                anchor_weight * u_bc
                - _row_scatter_apply(
                    anchor_op.idx, anchor_rows, anchor_ids, n_anchor, z
                ),
            ]
        )
        dw, _, _ = cgls(A, AT, b, np.zeros(n_coef), iters=inner, tol=1e-10)
        dz = S(dw)
        del J_rows

        step = 1.0
        accepted = False
        while step >= 2.0**-6:
            obj_new, mis_new = objective(z + step * dz)
            if obj_new < obj:
                z = z + step * dz
                obj, mis = obj_new, mis_new
                accepted = True
                break
            step *= 0.5
        it_done = it
        history.append(mis / nd)
        if not accepted:
            break
        if mis / nd < tol or (
            len(history) > 1
            and abs(history[-2] - history[-1]) < 1e-4 * history[0]
        ):
            converged = True
            break

    spline = SplineField.from_coefficients(
        inv_grid, z.reshape(design.cdims)
    )
    u_vals = spline.value(out_grid.node_points()).reshape(out_grid.dims)
    return InversionResult(
        field=GridField(out_grid.origin, out_grid.spacing, u_vals),
        residual=mis / nd,
        iterations=it_done,
        converged=bool(converged or mis / nd < tol),
        reg=float(reg),
        model=spline,
        history=history,
    )


# ----------------------------------------------------------------------
# Layer selection.


def filter_rays_by_level(rays, kappa, q, ds=0.02) -> np.ndarray:
    """Indices of rays that stay in the outer shell kappa <= q.

    kappa is the foliation scalar (0 on the boundary, growing inward);
    the deepest sample of each ray decides.  Sampling at step ds on the
    Hermite path is plenty for the smooth foliations used here.
    """
    keep = []
    for k, ray in enumerate(rays):
        s, _ = _simpson_nodes(ray, ds)
        x = ray.interp_x(s)
        if float(np.max(kappa.value(x))) <= q:
            keep.append(k)
    return np.asarray(keep, dtype=np.int64)
