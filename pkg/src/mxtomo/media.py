"""Material models: permittivity, permeability, conductivity.

A medium is three positive scalar fields (eps, mu, sigma) on a padded box
that strictly contains the run domain.  The derived wave speed is
c = (eps*mu)^(-1/2); its gradient and Hessian follow by the chain rule and
are what ray tracing and phase transport consume.

Also here: the symmetric tensor built from u = log sqrt(eps),

    A(u) = -(lap u) g_E + 2 hess u + |grad u|^2 g_E + 4 c^{-1} grad c (x)s grad u,

whose transverse ray transform drives the permittivity stage, and convexity
checks for foliations kappa: level sets are probed with the second
fundamental form of the conformal metric c^{-2} g_E.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateLevelError, DomainError
from .fields import (
    ConstantField,
    Field,
    GridField,
    PowerField,
    SplineField,
    matrix_to_sym6,
    sym6_quadratic_form,
)

__all__ = [
    "Box",
    "MediumSpec",
    "MediumEval",
    "eval_medium",
    "log_sqrt_eps_field",
    "tensor_A_of_u",
    "tensor_A_gateaux",
    "FoliationDesc",
    "ball_foliation",
    "ConvexityReport",
    "check_foliation_convexity",
]


@dataclasses.dataclass(frozen=True)
class Box:
    """Axis-aligned box; the extended domain media are defined on."""

    lo: tuple
    hi: tuple

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((x >= lo) & (x <= hi), axis=-1)


@dataclasses.dataclass
class MediumEval:
    """Pointwise medium data; arrays share the leading batch shape."""

    eps: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    c: np.ndarray
    grad_c: np.ndarray
    hess_c: np.ndarray
    grad_eps: np.ndarray
    grad_mu: np.ndarray


@dataclasses.dataclass
class MediumSpec:
    """eps, mu, sigma as scalar fields on a padded box.

    Fields must be strictly positive (eps, mu) and nonnegative (sigma) on
    the box; this is the caller's contract and is spot-checked, not proven.
    """

    epsilon: Field
    mu: Field
    sigma: Field
    box: Box = Box((-1.3, -1.3, -1.3), (1.3, 1.3, 1.3))
    # Set by from_speed: the speed itself, bypassing the eps*mu composition
    # in the integrator fast paths (identical values, ~4x fewer evals).
    c_direct: Field | None = None

    def check_inside(self, x: np.ndarray) -> None:
        inside = self.box.contains(x)
        if not np.all(inside):
            pts = np.asarray(x, dtype=float).reshape(-1, 3)
            bad = pts[~self.box.contains(pts)][0]
            raise DomainError(f"point {bad} outside medium box {self.box}")

    # -- fast paths used inside integrator loops ------------------------
    def speed(self, x: np.ndarray) -> np.ndarray:
        if self.c_direct is not None:
            return self.c_direct.value(x)
        return (self.epsilon.value(x) * self.mu.value(x)) ** -0.5

    def speed_and_gradient(self, x: np.ndarray):
        if self.c_direct is not None:
            return self.c_direct.value_and_gradient(x)
        e, m = self.epsilon.value(x), self.mu.value(x)
        ge, gm = self.epsilon.gradient(x), self.mu.gradient(x)
        p = e * m
        gp = m[..., None] * ge + e[..., None] * gm
        c = p**-0.5
        grad_c = -0.5 * (p**-1.5)[..., None] * gp
        return c, grad_c

    def speed_grad_hess(self, x: np.ndarray):
        if self.c_direct is not None:
            c = self.c_direct
            return c.value(x), c.gradient(x), c.hessian(x)
        e, m_ = self.epsilon.value(x), self.mu.value(x)
        ge, gm = self.epsilon.gradient(x), self.mu.gradient(x)
        he, hm = self.epsilon.hessian(x), self.mu.hessian(x)
        p = e * m_
        gp = m_[..., None] * ge + e[..., None] * gm
        cross = ge[..., :, None] * gm[..., None, :]
        hp = m_[..., None, None] * he + e[..., None, None] * hm
        hp = hp + cross + np.swapaxes(cross, -1, -2)
        c = p**-0.5
        grad_c = -0.5 * (p**-1.5)[..., None] * gp
        gpgp = gp[..., :, None] * gp[..., None, :]
        hess_c = 0.75 * (p**-2.5)[..., None, None] * gpgp - 0.5 * (
            p**-1.5
        )[..., None, None] * hp
        return c, grad_c, hess_c

    def sigma_over_eps(self, x: np.ndarray) -> np.ndarray:
        return self.sigma.value(x) / self.epsilon.value(x)

    def evaluate(self, x: np.ndarray) -> MediumEval:
        return eval_medium(self, x)

    @classmethod
    def vacuum(cls, box: Box | None = None) -> "MediumSpec":
        kw = {} if box is None else {"box": box}
        return cls(ConstantField(1.0), ConstantField(1.0), ConstantField(0.0), **kw)

    @classmethod
    def from_speed(cls, c_field: Field, sigma: Field | None = None,
                   box: Box | None = None) -> "MediumSpec":
        """Medium with mu = 1 and eps = c^-2 realizing a target speed."""
        kw = {} if box is None else {"box": box}
        return cls(
            PowerField(c_field, -2.0),
            ConstantField(1.0),
            sigma if sigma is not None else ConstantField(0.0),
            c_direct=c_field,
            **kw,
        )

    @classmethod
    def from_grids(cls, eps: GridField, mu: GridField, sigma: GridField
                   ) -> "MediumSpec":
        box = Box(tuple(eps.origin), tuple(eps.upper))
        return cls(SplineField(eps), SplineField(mu), SplineField(sigma), box)


def eval_medium(m: MediumSpec, x: np.ndarray) -> MediumEval:
    """eps, mu, sigma and the derived (c, grad c, hess c) at x.

    With p = eps*mu:  c = p^(-1/2),
    grad c = -p^(-3/2) grad p / 2,
    hess c = 3/4 p^(-5/2) grad p (x) grad p - p^(-3/2) hess p / 2.
    """
    m.check_inside(x)
    e, mu = m.epsilon.value(x), m.mu.value(x)
    ge, gm = m.epsilon.gradient(x), m.mu.gradient(x)
    he, hm = m.epsilon.hessian(x), m.mu.hessian(x)
    sig = m.sigma.value(x)

    p = e * mu
    gp = mu[..., None] * ge + e[..., None] * gm
    cross = ge[..., :, None] * gm[..., None, :]
    hp = mu[..., None, None] * he + e[..., None, None] * hm
    hp = hp + cross + np.swapaxes(cross, -1, -2)

    c = p**-0.5
    grad_c = -0.5 * (p**-1.5)[..., None] * gp
    gpgp = gp[..., :, None] * gp[..., None, :]
    hess_c = 0.75 * (p**-2.5)[..., None, None] * gpgp - 0.5 * (
        p**-1.5
    )[..., None, None] * hp
    return MediumEval(e, mu, sig, c, grad_c, hess_c, ge, gm)


def log_sqrt_eps_field(m: MediumSpec) -> Field:
    """u = log sqrt(eps) as a field with exact derivatives."""

    class _LogSqrt(Field):
        def value(self, x):
            return 0.5 * np.log(m.epsilon.value(x))

        def gradient(self, x):
            return 0.5 * m.epsilon.gradient(x) / m.epsilon.value(x)[..., None]

        def hessian(self, x):
            e = m.epsilon.value(x)[..., None, None]
            g = m.epsilon.gradient(x)
            gg = g[..., :, None] * g[..., None, :]
            return 0.5 * (m.epsilon.hessian(x) / e - gg / e**2)

    return _LogSqrt()


def tensor_A_of_u(m: MediumSpec, u: Field, x: np.ndarray) -> np.ndarray:
    """A(u) as symmetric 6-components (..., 6) at x.

    A(u) = -(lap u) g_E + 2 hess u + |grad u|^2 g_E
           + 4 c^{-1} grad c (x)s grad u.
    """
    x = np.asarray(x, dtype=float)
    gu = u.gradient(x)
    hu = u.hessian(x)
    c, gc = m.speed_and_gradient(x)
    lap = np.trace(hu, axis1=-2, axis2=-1)
    gu2 = np.sum(gu * gu, axis=-1)
    eye = np.eye(3)
    sym = gc[..., :, None] * gu[..., None, :]
    sym = sym + np.swapaxes(sym, -1, -2)
    mat = (
        (-lap + gu2)[..., None, None] * eye
        + 2.0 * hu
        + (2.0 / c)[..., None, None] * sym
    )
    return matrix_to_sym6(mat)


def tensor_A_gateaux(m: MediumSpec, u: Field, w: Field, x: np.ndarray) -> np.ndarray:
    """Directional derivative DA(u)[w] as (..., 6).

    Linearization of tensor_A_of_u in u:
    -(lap w) g_E + 2 hess w + 2 (grad u . grad w) g_E
    + 4 c^{-1} grad c (x)s grad w.
    """
    x = np.asarray(x, dtype=float)
    gu, gw = u.gradient(x), w.gradient(x)
    hw = w.hessian(x)
    c, gc = m.speed_and_gradient(x)
    lap = np.trace(hw, axis1=-2, axis2=-1)
    dot = np.sum(gu * gw, axis=-1)
    eye = np.eye(3)
    sym = gc[..., :, None] * gw[..., None, :]
    sym = sym + np.swapaxes(sym, -1, -2)
    mat = (
        (-lap + 2.0 * dot)[..., None, None] * eye
        + 2.0 * hw
        + (2.0 / c)[..., None, None] * sym
    )
    return matrix_to_sym6(mat)


# ----------------------------------------------------------------------
# Foliations.


@dataclasses.dataclass
class FoliationDesc:
    """Scalar kappa with kappa = 0 on the domain boundary, increasing inward.

    levels must be strictly increasing, start at 0 and end at 1.  center is
    an interior anchor from which level sets are sampled radially (they are
    assumed star-shaped about it, true for every foliation built here).
    """

    kappa: Field
    levels: np.ndarray
    center: np.ndarray = dataclasses.field(
        default_factory=lambda: np.zeros(3)
    )

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        if self.levels.ndim != 1 or len(self.levels) < 2:
            raise ValueError("need at least two levels")
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if abs(self.levels[0]) > 1e-12 or abs(self.levels[-1] - 1.0) > 1e-12:
            raise ValueError("levels must start at 0 and end at 1")


def ball_foliation(radius: float = 1.0, r_core: float = 0.1,
                   n_levels: int = 5) -> FoliationDesc:
    """kappa = (R - |x|) / (R - r_core) on the ball of the given radius.

    Level q = 1 is the sphere r = r_core, so grad kappa is nonzero on every
    level set in [0, 1] (a r_core of 0 would collapse the top level to the
    origin, where the gradient degenerates).
    """
    if not 0.0 < r_core < radius:
        raise ValueError("need 0 < r_core < radius")
    scale = radius - r_core

    def f(r):
        return (radius - r) / scale

    def df(r):
        return np.full_like(np.asarray(r, dtype=float), -1.0 / scale)

    def d2f(r):
        return np.zeros_like(np.asarray(r, dtype=float))

    from .fields import RadialField

    kappa = RadialField(f, df, d2f)
    return FoliationDesc(kappa, np.linspace(0.0, 1.0, n_levels))


@dataclasses.dataclass
class ConvexityReport:
    level: float
    n_samples: int
    min_eig: float
    argmin_point: np.ndarray | None
    eigenvalues: np.ndarray


def _fibonacci_directions(n: int) -> np.ndarray:
    k = np.arange(n)
    z = 1.0 - (2.0 * k + 1.0) / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def check_foliation_convexity(
    m: MediumSpec,
    fol: FoliationDesc,
    level: float,
    n_samples: int = 1024,
    domain=None,
    t_max: float = 4.0,
) -> ConvexityReport:
    """Probe strict convexity of kappa^-1(level) in the metric c^-2 g_E.

    The level set is sampled along rays from the foliation center.  At each
    sample with Euclidean unit normal n = grad kappa / |grad kappa| (toward
    increasing kappa) the Euclidean shape operator is
    S_E = -(P hess kappa P) / |grad kappa| restricted to the tangent plane,
    and the conformal principal curvatures are c * eig(S_E) + dc/dn.  For
    spheres in a radial medium this is c/r - c'(r): positive exactly under
    the Herglotz condition.  Min eigenvalue < 0 flags a broken foliation.
    """
    if n_samples < 4:
        raise ValueError("need at least 4 samples")
    dirs = _fibonacci_directions(n_samples)
    pts = []
    for d in dirs:
        def g(t):
            return float(fol.kappa.value(fol.center + t * d)) - level

        # Bracket the root along the ray; kappa decreases outward.
        ts = np.linspace(1e-6, t_max, 65)
        vals = np.array([g(t) for t in ts])
        sign = np.signbit(vals)
        flips = np.nonzero(sign[1:] != sign[:-1])[0]
        if len(flips) == 0:
            continue
        k = flips[0]
        t0 = brentq(g, ts[k], ts[k + 1], xtol=1e-12)
        p = fol.center + t0 * d
        if domain is not None and not domain.contains_point(p):
            continue
        pts.append(p)
    if not pts:
        return ConvexityReport(level, 0, np.nan, None, np.array([]))
    pts = np.asarray(pts)

    gk = fol.kappa.gradient(pts)
    norms = np.linalg.norm(gk, axis=-1)
    if np.any(norms < 1e-10):
        raise DegenerateLevelError(
            f"grad kappa vanishes on level {level} (|grad| min {norms.min():.3e})"
        )
    n = gk / norms[..., None]
    hk = fol.kappa.hessian(pts)
    c, gc = m.speed_and_gradient(pts)
    dcdn = np.sum(gc * n, axis=-1)

    # Orthonormal tangent frames per point.
    a = np.where(np.abs(n[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    frame = np.stack([t1, t2], axis=1)        # (N, 2, 3)
    s2 = -np.einsum("nai,nij,nbj->nab", frame, hk, frame) / norms[:, None, None]
    eigs = np.linalg.eigvalsh(s2)             # (N, 2) Euclidean curvatures
    eig_g = c[:, None] * eigs + dcdn[:, None]
    flat = eig_g.reshape(-1)
    k_min = int(np.argmin(flat))
    return ConvexityReport(
        level,
        len(pts),
        float(flat[k_min]),
        pts[k_min // 2],
        eig_g,
    )
