"""Scalar and tensor fields on R^3: analytic profiles and gridded data.

Every field exposes batched ``value``, ``gradient`` and ``hessian`` taking
points of shape (..., 3).  Analytic classes carry exact derivatives; gridded
data is interpolated by a tensor-product cubic B-spline whose coefficients
are solved with fourth-difference end conditions, so the interpolant
reproduces node values and cubic polynomials to machine precision and has
two honest derivatives everywhere in the interior.

Gridded fields serialize to the MXT-FIELD v1 container: one ASCII header
line followed by little-endian float64 payload, row-major with the component
index fastest.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.linalg import solve_banded

from .errors import DomainError, FormatError

__all__ = [
    "Field",
    "ConstantField",
    "ExpLinearField",
    "QuadraticField",
    "GaussianBumpField",
    "RadialField",
    "SumField",
    "ProductField",
    "PowerField",
    "ExpScaledField",
    "CallableField",
    "ProjectedField",
    "GridField",
    "SplineField",
    "sym6_to_matrix",
    "matrix_to_sym6",
    "sym6_quadratic_form",
    "sym6_trace",
]

# Symmetric 3x3 tensors travel as 6-vectors in this fixed component order.
SYM6_ORDER = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def sym6_to_matrix(t6: np.ndarray) -> np.ndarray:
    """(..., 6) symmetric components -> (..., 3, 3) matrices."""
    t6 = np.asarray(t6, dtype=float)
    m = np.zeros(t6.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(SYM6_ORDER):
        m[..., i, j] = t6[..., k]
        m[..., j, i] = t6[..., k]
    return m


def matrix_to_sym6(m: np.ndarray) -> np.ndarray:
    """(..., 3, 3) -> symmetrized (..., 6) components."""
    m = np.asarray(m, dtype=float)
    out = np.empty(m.shape[:-2] + (6,))
    for k, (i, j) in enumerate(SYM6_ORDER):
        out[..., k] = 0.5 * (m[..., i, j] + m[..., j, i])
    return out


def sym6_quadratic_form(t6: np.ndarray, v: np.ndarray) -> np.ndarray:
    """T(v, v) for symmetric T given as (..., 6), v as (..., 3)."""
    t6 = np.asarray(t6, dtype=float)
    v = np.asarray(v, dtype=float)
    return (
        t6[..., 0] * v[..., 0] ** 2
        + t6[..., 1] * v[..., 1] ** 2
        + t6[..., 2] * v[..., 2] ** 2
        + 2.0 * t6[..., 3] * v[..., 0] * v[..., 1]
        + 2.0 * t6[..., 4] * v[..., 0] * v[..., 2]
        + 2.0 * t6[..., 5] * v[..., 1] * v[..., 2]
    )


def sym6_trace(t6: np.ndarray) -> np.ndarray:
    return np.asarray(t6)[..., 0] + np.asarray(t6)[..., 1] + np.asarray(t6)[..., 2]


def _outer_sym(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetrized outer product (a (x)s b) as (..., 3, 3)."""
    ab = a[..., :, None] * b[..., None, :]
    return 0.5 * (ab + np.swapaxes(ab, -1, -2))


class Field:
    """A smooth scalar field with batched value/gradient/hessian."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_gradient(self, x: np.ndarray):
        # Subclasses that can share work between the two override this.
        return self.value(x), self.gradient(x)

    # Small algebra so media can be composed without new classes.
    def __add__(self, other):
        other = other if isinstance(other, Field) else ConstantField(float(other))
        return SumField((self, other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Field):
            return ProductField(self, other)
        return ScaledField(self, float(other))

    __rmul__ = __mul__

    def __pow__(self, p):
        return PowerField(self, float(p))


@dataclasses.dataclass(frozen=True)
class ConstantField(Field):
    c: float

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.c)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3,))

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3))


@dataclasses.dataclass(frozen=True)
class ExpLinearField(Field):
    """exp(a . x + b)."""

    a: tuple
    b: float = 0.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        a = np.asarray(self.a, dtype=float)
        return np.exp(x @ a + self.b)

    def gradient(self, x):
        a = np.asarray(self.a, dtype=float)
        return self.value(x)[..., None] * a

    def hessian(self, x):
        a = np.asarray(self.a, dtype=float)
        return self.value(x)[..., None, None] * np.outer(a, a)


@dataclasses.dataclass(frozen=True)
class QuadraticField(Field):
    """x^T A x / 2 + b . x + c with constant symmetric A."""

    A: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    b: tuple = (0.0, 0.0, 0.0)
    c: float = 0.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, A, x) + x @ b + self.c

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        A = np.asarray(self.A, dtype=float)
        return x @ A.T + np.asarray(self.b, dtype=float)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        A = np.asarray(self.A, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + (3, 3)).copy()


class GaussianBumpField(Field):
    """base + sum_k amp_k exp(-|x - c_k|^2 / (2 w_k^2))."""

    def __init__(self, base=0.0, amps=(), centers=(), widths=()):
        self.base = float(base)
        self.amps = np.atleast_1d(np.asarray(amps, dtype=float))
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.widths = np.atleast_1d(np.asarray(widths, dtype=float))
        if not (len(self.amps) == len(self.centers) == len(self.widths)):
            raise ValueError("amps, centers, widths must have equal length")

    def _bumps(self, x):
        x = np.asarray(x, dtype=float)
        d = x[..., None, :] - self.centers          # (..., K, 3)
        r2 = np.sum(d * d, axis=-1)                 # (..., K)
        g = self.amps * np.exp(-0.5 * r2 / self.widths**2)
        return d, g

    def value(self, x):
        _, g = self._bumps(x)
        return self.base + np.sum(g, axis=-1)

    def gradient(self, x):
        d, g = self._bumps(x)
        return np.sum((-g / self.widths**2)[..., None] * d, axis=-2)

    def hessian(self, x):
        d, g = self._bumps(x)
        w2 = self.widths**2
        eye = np.eye(3)
        outer = d[..., :, None] * d[..., None, :]   # (..., K, 3, 3)
        h = (g / w2**2)[..., None, None] * outer - (g / w2)[..., None, None] * eye
        return np.sum(h, axis=-3)


class RadialField(Field):
    """f(|x|) from profile callables (f, f', f'')  — vectorized in r.

    The gradient is f'(r) x/r; profiles used on domains containing the
    origin should have f'(0) = 0, otherwise evaluation is guarded by a tiny
    floor on r and only valid away from the origin.
    """

    def __init__(self, f, df, d2f):
        self.f, self.df, self.d2f = f, df, d2f

    def value(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        return self.f(r)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        rs = np.maximum(r, 1e-300)
        return (self.df(r) / rs)[..., None] * x

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        rs = np.maximum(r, 1e-300)
        u = x / rs[..., None]
        uu = u[..., :, None] * u[..., None, :]
        eye = np.eye(3)
        fp = self.df(r)
        fpp = self.d2f(r)
        return fpp[..., None, None] * uu + (fp / rs)[..., None, None] * (eye - uu)


class SumField(Field):
    def __init__(self, terms):
        self.terms = tuple(terms)

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def gradient(self, x):
        return sum(t.gradient(x) for t in self.terms)

    def hessian(self, x):
        return sum(t.hessian(x) for t in self.terms)


class ScaledField(Field):
    def __init__(self, f: Field, s: float):
        self.f, self.s = f, s

    def value(self, x):
        return self.s * self.f.value(x)

    def gradient(self, x):
        return self.s * self.f.gradient(x)

    def hessian(self, x):
        return self.s * self.f.hessian(x)


class ProductField(Field):
    def __init__(self, f: Field, g: Field):
        self.f, self.g = f, g

    def value(self, x):
        return self.f.value(x) * self.g.value(x)

    def gradient(self, x):
        return (
            self.f.value(x)[..., None] * self.g.gradient(x)
            + self.g.value(x)[..., None] * self.f.gradient(x)
        )

    def hessian(self, x):
        fv = self.f.value(x)[..., None, None]
        gv = self.g.value(x)[..., None, None]
        fg, gg = self.f.gradient(x), self.g.gradient(x)
        cross = 2.0 * _outer_sym(fg, gg)
        return fv * self.g.hessian(x) + gv * self.f.hessian(x) + cross


class PowerField(Field):
    """f(x)^p for strictly positive f."""

    def __init__(self, f: Field, p: float):
        self.f, self.p = f, p

    def value(self, x):
        return self.f.value(x) ** self.p

    def gradient(self, x):
        p = self.p
        fv = self.f.value(x)
        return (p * fv ** (p - 1.0))[..., None] * self.f.gradient(x)

    def hessian(self, x):
        p = self.p
        fv = self.f.value(x)
        g = self.f.gradient(x)
        gg = g[..., :, None] * g[..., None, :]
        return (p * (p - 1.0) * fv ** (p - 2.0))[..., None, None] * gg + (
            p * fv ** (p - 1.0)
        )[..., None, None] * self.f.hessian(x)


class ExpScaledField(Field):
    """exp(s·f) with chain-rule derivatives."""

    def __init__(self, f: Field, s: float = 1.0):
        self.f, self.s = f, float(s)

    def value(self, x):
        return np.exp(self.s * self.f.value(x))

    def gradient(self, x):
        return (self.s * self.value(x))[..., None] * self.f.gradient(x)

    def hessian(self, x):
        s = self.s
        v = self.value(x)[..., None, None]
        g = self.f.gradient(x)
        gg = g[..., :, None] * g[..., None, :]
        return v * (s * self.f.hessian(x) + s * s * gg)


class CallableField(Field):
    """Adapter for ad-hoc closures supplying the three evaluations."""

    def __init__(self, value_fn, gradient_fn, hessian_fn):
        self._v, self._g, self._h = value_fn, gradient_fn, hessian_fn

    def value(self, x):
        return self._v(np.asarray(x, dtype=float))

    def gradient(self, x):
        return self._g(np.asarray(x, dtype=float))

    def hessian(self, x):
        return self._h(np.asarray(x, dtype=float))


class ProjectedField(Field):
    """Base field frozen along a normal direction: f(x) = base(P x).

    P projects onto the plane through x0 with unit normal n, so values,
    tangential derivatives and tangential curvatures on that plane match
    the base field while every normal derivative vanishes.  Used to build
    reference media that share a boundary restriction but carry zero
    normal jets.
    """

    def __init__(self, base: Field, x0, normal):
        self.base = base
        self.x0 = np.asarray(x0, dtype=float).reshape(3)
        n = np.asarray(normal, dtype=float).reshape(3)
        self.n = n / np.linalg.norm(n)
        self.P = np.eye(3) - np.outer(self.n, self.n)

    def _proj(self, x):
        x = np.asarray(x, dtype=float)
        d = np.sum((x - self.x0) * self.n, axis=-1, keepdims=True)
        return x - d * self.n

    def value(self, x):
        return self.base.value(self._proj(x))

    def gradient(self, x):
        g = self.base.gradient(self._proj(x))
        return g @ self.P

    def hessian(self, x):
        h = self.base.hessian(self._proj(x))
        return self.P @ h @ self.P


# ----------------------------------------------------------------------
# Cubic B-spline interpolation on uniform grids.

_MAGIC = "MXT-FIELD"
_VERSION = "v1"


def _bspline_coeff_1d(data: np.ndarray) -> np.ndarray:
    """Solve for cubic B-spline coefficients along axis 0.

    data has n >= 4 samples; returns n + 2 coefficients z_j = c_{j-1}.
    Interpolation rows (z_{i} + 4 z_{i+1} + z_{i+2})/6 = f_i are closed with
    vanishing fourth differences at both ends, which makes the interpolant
    exact on cubic polynomials (their coefficient sequences are cubic in j).
    """
    n = data.shape[0]
    if n < 4:
        raise ValueError("cubic spline interpolation needs at least 4 nodes")
    m = n + 2
    band = np.zeros((9, m))  # l = u = 4 diagonals for solve_banded

    def put(i, j, v):
        band[4 + i - j, j] = v

    put(0, 0, 1.0), put(0, 1, -4.0), put(0, 2, 6.0), put(0, 3, -4.0), put(0, 4, 1.0)
    for i in range(1, n + 1):
        put(i, i - 1, 1.0 / 6.0)
        put(i, i, 4.0 / 6.0)
        put(i, i + 1, 1.0 / 6.0)
    put(m - 1, m - 5, 1.0), put(m - 1, m - 4, -4.0), put(m - 1, m - 3, 6.0)
    put(m - 1, m - 2, -4.0), put(m - 1, m - 1, 1.0)

    rhs = np.zeros((m,) + data.shape[1:])
    rhs[1 : n + 1] = data
    flat = rhs.reshape(m, -1)
    sol = solve_banded((4, 4), band, flat)
    return sol.reshape(rhs.shape)


def _bspline_weights(u: np.ndarray, order: int) -> np.ndarray:
    """Weights of the 4 active cubic B-splines at local coordinate u in [0,1].

    order 0/1/2 selects value, d/du or d2/du2 weights; shape (..., 4).
    """
    u = np.asarray(u, dtype=float)
    out = np.empty(u.shape + (4,))
    if order == 0:
        out[..., 0] = (1.0 - u) ** 3 / 6.0
        out[..., 1] = (3.0 * u**3 - 6.0 * u**2 + 4.0) / 6.0
        out[..., 2] = (-3.0 * u**3 + 3.0 * u**2 + 3.0 * u + 1.0) / 6.0
        out[..., 3] = u**3 / 6.0
    elif order == 1:
        out[..., 0] = -0.5 * (1.0 - u) ** 2
        out[..., 1] = (9.0 * u**2 - 12.0 * u) / 6.0
        out[..., 2] = (-9.0 * u**2 + 6.0 * u + 3.0) / 6.0
        out[..., 3] = 0.5 * u**2
    elif order == 2:
        out[..., 0] = 1.0 - u
        out[..., 1] = 3.0 * u - 2.0
        out[..., 2] = 1.0 - 3.0 * u
        out[..., 3] = u
    else:  # pragma: no cover
        raise ValueError(order)
    return out


@dataclasses.dataclass
class GridField:
    """Sampled field on a uniform Cartesian grid.

    values has shape (nx, ny, nz, ncomp); the flat serialization order is
    row-major with the component index fastest.  ncomp is 1 for scalars and
    6 for symmetric tensors (component order xx, yy, zz, xy, xz, yz).
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.ndim == 3:
            self.values = self.values[..., None]
        if self.values.ndim != 4:
            raise ValueError("values must be (nx, ny, nz) or (nx, ny, nz, ncomp)")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def ncomp(self) -> int:
        return self.values.shape[3]

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    def axes(self):
        return tuple(
            self.origin[k] + self.spacing[k] * np.arange(self.dims[k])
            for k in range(3)
        )

    def node_points(self) -> np.ndarray:
        ax, ay, az = self.axes()
        X, Y, Z = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)

    @classmethod
    def from_function(cls, fn, origin, spacing, dims, ncomp=1) -> "GridField":
        g = cls(origin, spacing, np.zeros(tuple(dims) + (ncomp,)))
        vals = np.asarray(fn(g.node_points()), dtype=float)
        g.values = np.ascontiguousarray(vals.reshape(tuple(dims) + (ncomp,)))
        return g

    # -- MXT-FIELD v1 container ----------------------------------------
    def save(self, path) -> None:
        nx, ny, nz = self.dims
        hdr = " ".join(
            [_MAGIC, _VERSION, str(nx), str(ny), str(nz), str(self.ncomp)]
            + [f"{v:.17g}" for v in self.spacing]
            + [f"{v:.17g}" for v in self.origin]
        )
        payload = self.values.astype("<f8").tobytes(order="C")
        with open(path, "wb") as fh:
            fh.write(hdr.encode("ascii") + b"\n")
            fh.write(payload)

    @classmethod
    def load(cls, path) -> "GridField":
        with open(path, "rb") as fh:
            hdr = fh.readline().decode("ascii", errors="replace").strip()
            payload = fh.read()
        parts = hdr.split()
        if len(parts) != 12 or parts[0] != _MAGIC or parts[1] != _VERSION:
            raise FormatError(f"bad MXT-FIELD header: {hdr!r}")
        try:
            nx, ny, nz, ncomp = (int(p) for p in parts[2:6])
            dx, dy, dz, ox, oy, oz = (float(p) for p in parts[6:12])
        except ValueError as exc:
            raise FormatError(f"bad MXT-FIELD header fields: {hdr!r}") from exc
        expect = nx * ny * nz * ncomp * 8
        if len(payload) != expect:
            raise FormatError(
                f"MXT-FIELD payload is {len(payload)} bytes, expected {expect}"
            )
        vals = np.frombuffer(payload, dtype="<f8").reshape(nx, ny, nz, ncomp)
        return cls((ox, oy, oz), (dx, dy, dz), vals.copy())

    def interpolator(self) -> "SplineField":
        return SplineField(self)


class SplineField(Field):
    """Tensor-product cubic B-spline view of a GridField.

    Node values are reproduced exactly and cubic polynomials are reproduced
    to machine precision on the interior (the end conditions kill the usual
    boundary pollution).  Gradient and Hessian are the interpolant's own
    analytic derivatives.  Points outside the grid box raise DomainError.
    """

    def __init__(self, grid: GridField, component: int | None = None):
        self.grid = grid
        if min(grid.dims) < 4:
            raise ValueError("SplineField needs at least 4 nodes per axis")
        coeff = grid.values if component is None else grid.values[..., [component]]
        for ax in range(3):
            coeff = np.moveaxis(
                _bspline_coeff_1d(np.moveaxis(coeff, ax, 0)), 0, ax
            )
        self._coeff = coeff
        self._tol = 1e-9 * np.max(grid.spacing)

    @classmethod
    def from_coefficients(cls, grid: GridField, coeff: np.ndarray
                          ) -> "SplineField":
        """Wrap an explicit coefficient array (dims + 2 per axis, ncomp last).

        grid supplies geometry only; its stored values are ignored.
        """
        self = cls.__new__(cls)
        self.grid = grid
        want = tuple(d + 2 for d in grid.dims)
        coeff = np.asarray(coeff, dtype=float)
        if coeff.ndim == 3:
            coeff = coeff[..., None]
        if coeff.shape[:3] != want:
            raise ValueError(f"coefficient shape {coeff.shape} != {want}")
        self._coeff = coeff
        self._tol = 1e-9 * np.max(grid.spacing)
        return self

    def _locate(self, x):
        g = self.grid
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, 3)
        lo, hi = g.origin, g.upper
        if np.any(pts < lo - self._tol) or np.any(pts > hi + self._tol):
            bad = pts[
                np.any((pts < lo - self._tol) | (pts > hi + self._tol), axis=1)
            ][0]
            raise DomainError(f"point {bad} outside grid box [{lo}, {hi}]")
        t = (np.clip(pts, lo, hi) - lo) / g.spacing
        i = np.minimum(t.astype(np.int64), np.array(g.dims) - 2)
        u = t - i
        return x.shape[:-1], i, u

    def _patch(self, i):
        offs = np.arange(4)
        ix = i[:, 0, None] + offs
        iy = i[:, 1, None] + offs
        iz = i[:, 2, None] + offs
        return self._coeff[
            ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]
        ]  # (N, 4, 4, 4, ncomp)

    def _eval(self, x, dx: int, dy: int, dz: int):
        shape, i, u = self._locate(x)
        patch = self._patch(i)
        wx = _bspline_weights(u[:, 0], dx) / self.grid.spacing[0] ** dx
        wy = _bspline_weights(u[:, 1], dy) / self.grid.spacing[1] ** dy
        wz = _bspline_weights(u[:, 2], dz) / self.grid.spacing[2] ** dz
        out = np.einsum("nijkc,ni,nj,nk->nc", patch, wx, wy, wz)
        return out.reshape(shape + (out.shape[-1],))

    def sample(self, x) -> np.ndarray:
        """All components at x: shape (..., ncomp)."""
        return self._eval(x, 0, 0, 0)

    def value(self, x):
        return self._eval(x, 0, 0, 0)[..., 0]

    def gradient(self, x):
        return np.stack(
            [
                self._eval(x, 1, 0, 0)[..., 0],
                self._eval(x, 0, 1, 0)[..., 0],
                self._eval(x, 0, 0, 1)[..., 0],
            ],
            axis=-1,
        )

    def value_and_gradient(self, x):
        # One locate + one patch gather for all four contractions; this is
        # the integrator's hot loop.
        shape, i, u = self._locate(x)
        patch = self._patch(i)[..., 0]
        sp = self.grid.spacing
        w0 = [_bspline_weights(u[:, k], 0) for k in range(3)]
        w1 = [_bspline_weights(u[:, k], 1) / sp[k] for k in range(3)]
        pz0 = np.einsum("nijk,nk->nij", patch, w0[2])
        py0 = np.einsum("nij,nj->ni", pz0, w0[1])
        val = np.einsum("ni,ni->n", py0, w0[0])
        gx = np.einsum("ni,ni->n", py0, w1[0])
        gy = np.einsum("ni,ni->n",
                       np.einsum("nij,nj->ni", pz0, w1[1]), w0[0])
        gz = np.einsum("ni,ni->n",
                       np.einsum("nij,nj->ni",
                                 np.einsum("nijk,nk->nij", patch, w1[2]),
                                 w0[1]), w0[0])
        grad = np.stack([gx, gy, gz], axis=-1)
        return val.reshape(shape), grad.reshape(shape + (3,))

    def hessian(self, x):
        hxx = self._eval(x, 2, 0, 0)[..., 0]
        hyy = self._eval(x, 0, 2, 0)[..., 0]
        hzz = self._eval(x, 0, 0, 2)[..., 0]
        hxy = self._eval(x, 1, 1, 0)[..., 0]
        hxz = self._eval(x, 1, 0, 1)[..., 0]
        hyz = self._eval(x, 0, 1, 1)[..., 0]
        h = np.empty(hxx.shape + (3, 3))
        h[..., 0, 0], h[..., 1, 1], h[..., 2, 2] = hxx, hyy, hzz
        h[..., 0, 1] = h[..., 1, 0] = hxy
        h[..., 0, 2] = h[..., 2, 0] = hxz
        h[..., 1, 2] = h[..., 2, 1] = hyz
        return h
