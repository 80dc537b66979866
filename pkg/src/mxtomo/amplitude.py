"""Amplitude transport along rays and boundary symbol synthesis.

The leading WKB amplitude A obeys

    2 dA/ds + (J'/J) A - (c'/c) A + (sigma/eps) A = 0,

whose closed form is A = C J^{-1/2} c^{1/2} I with the attenuation
factor I = exp(-int sigma/(2 eps) ds) and J the Euclidean spreading of
the phase-synchronized ray family.  This is energy-flux conservation:
|E||H| ~ A^2/c times the wavefront cross-section J is constant in the
lossless case.

Polarization assembly: with the parallel frame (eta, zeta) stored g-unit
(|eta|_E = c), the Maxwell-consistent fields are

    H0 = A eps^{1/2} (eta / c),      E0 = -A mu^{1/2} (zeta / c),

i.e. |H0|_E = A eps^{1/2} and |E0|_E = A mu^{1/2}.  Both leading-order
Maxwell equations mu H0 = grad(phi) x E0 and eps E0 = H0 x grad(phi)
then hold identically; the transversality pairings vanish by the frame
construction.

Boundary symbols: for a boundary point with admissible tangential
frequency xi' (rho = |xi'|), the order-0 and order-1 symbol values of
the measured tangential-H combination are

    S0 = -(1/mu) sqrt(eps mu - rho^2) rho^2
    S1 = (eps mu - rho^2) d3mu/mu - (eps mu d3mu/mu + mu d3eps)/2
         + sigma mu sqrt(eps mu - rho^2)

with d3 the inward normal derivative.  synthesize_boundary_symbols
reproduces both from a full ray-level simulation (phase launch, frame
transport, amplitude law), the order-1 part through the depth
derivative of the incident combination with a reference-medium
subtraction that removes the jet-independent remainder.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import CausticError, InconsistentTraceError
from .eikonal import BoundaryPatch, PhaseRay, boundary_phase, xi3
from .fields import ConstantField, ProjectedField
from .geometry import (
    FrameTransport,
    IntegratorConfig,
    Ray,
    SpreadingResult,
    parallel_transport,
    tangent_frame,
)
from .media import MediumSpec

__all__ = [
    "AmplitudeTrace",
    "BoundarySymbolSample",
    "attenuation_I",
    "transport_amplitude_ode",
    "closed_form_amplitude",
    "assemble_H0_E0",
    "boundary_symbol_S0",
    "boundary_symbol_S1",
    "split_incident",
    "synthesize_boundary_symbols",
]


def _midpoint_samples(m: MediumSpec, ray: Ray):
    """Positions and tangents at interval midpoints of a ray's samples."""
    s_mid = 0.5 * (ray.s[:-1] + ray.s[1:])
    x_mid = ray.interp_x(s_mid)
    d = ray.interp_v(s_mid)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    v_mid = m.speed(x_mid)[:, None] * d
    return s_mid, x_mid, v_mid


def attenuation_I(m: MediumSpec, ray: Ray) -> np.ndarray:
    """I(s) = exp(-int_0^s sigma/(2 eps)) sampled at the ray's nodes.

    Per-interval Simpson quadrature with Hermite midpoint positions, so
    the rule keeps the fourth-order accuracy of the underlying samples.
    """
    f_node = m.sigma_over_eps(ray.x) / 2.0
    _, x_mid, _ = _midpoint_samples(m, ray)
    f_mid = m.sigma_over_eps(x_mid) / 2.0
    h = np.diff(ray.s)
    seg = (h / 6.0) * (f_node[:-1] + 4.0 * f_mid + f_node[1:])
    return np.exp(-np.concatenate([[0.0], np.cumsum(seg)]))


def closed_form_amplitude(
    m: MediumSpec, ray: Ray, J: SpreadingResult, A0: float | None = None
) -> np.ndarray:
    """A = A(0) (J(0)/J)^{1/2} (c/c(0))^{1/2} I along the ray."""
    if np.any(J.J <= 0):
        raise CausticError("nonpositive spreading in closed-form amplitude")
    c = m.speed(ray.x)
    I = attenuation_I(m, ray)
    if A0 is None:
        A0 = J.J[0] ** -0.5 * c[0] ** 0.5
    return A0 * np.sqrt(J.J[0] / J.J) * np.sqrt(c / c[0]) * I


def transport_amplitude_ode(
    m: MediumSpec, ray: Ray, J: SpreadingResult, A0: float | None = None
) -> np.ndarray:
    """Integrate the amplitude transport ODE along the ray's samples.

    A' = (1/2) (c'/c - J'/J - sigma/eps) A, RK4 over each interval with
    Hermite-interpolated midpoint coefficients; J and J' at midpoints
    come from the cubic determined by the sampled (J, dJ) pairs.  The
    default seed is A(0) = J(0)^{-1/2} c(0)^{1/2}.  Raises CausticError
    on any nonpositive J sample.
    """
    if np.any(J.J <= 0):
        raise CausticError("nonpositive spreading sample in amplitude ODE")

    c_node, gc_node = m.speed_and_gradient(ray.x)
    dc_node = np.sum(gc_node * ray.v, axis=-1)
    se_node = m.sigma_over_eps(ray.x)

    _, x_mid, v_mid = _midpoint_samples(m, ray)
    c_mid, gc_mid = m.speed_and_gradient(x_mid)
    dc_mid = np.sum(gc_mid * v_mid, axis=-1)
    se_mid = m.sigma_over_eps(x_mid)

    h = np.diff(ray.s)
    t = 0.5
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    J_mid = (
        h00 * J.J[:-1] + h10 * h * J.dJ[:-1] + h01 * J.J[1:] + h11 * h * J.dJ[1:]
    )
    d00 = (6 * t**2 - 6 * t) / h
    d10 = 3 * t**2 - 4 * t + 1
    d01 = (-6 * t**2 + 6 * t) / h
    d11 = 3 * t**2 - 2 * t
    dJ_mid = (
        d00 * J.J[:-1] + d10 * J.dJ[:-1] + d01 * J.J[1:] + d11 * J.dJ[1:]
    )
    if np.any(J_mid <= 0):
        raise CausticError("nonpositive interpolated spreading in amplitude ODE")

    r_node = 0.5 * (dc_node / c_node - J.dJ / J.J - se_node)
    r_mid = 0.5 * (dc_mid / c_mid - dJ_mid / J_mid - se_mid)

    n = len(ray.s)
    A = np.empty(n)
    A[0] = (J.J[0] ** -0.5 * c_node[0] ** 0.5) if A0 is None else A0
    for i in range(n - 1):
        hi = h[i]
        k1 = r_node[i] * A[i]
        k2 = r_mid[i] * (A[i] + 0.5 * hi * k1)
        k3 = r_mid[i] * (A[i] + 0.5 * hi * k2)
        k4 = r_node[i + 1] * (A[i] + hi * k3)
        A[i + 1] = A[i] + (hi / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return A


@dataclasses.dataclass
class AmplitudeTrace:
    """Amplitude and polarization samples along one ray."""

    s: np.ndarray
    A: np.ndarray
    I: np.ndarray
    H0: np.ndarray
    E0: np.ndarray
    ray: Ray
    frame: FrameTransport
    J: np.ndarray | None = None

    def transport_invariant(self, m: MediumSpec) -> float:
        """max relative drift of A J^{1/2} c^{-1/2} / I along the ray."""
        if self.J is None:
            raise ValueError("no spreading attached to this trace")
        c = m.speed(self.ray.x)
        q = self.A * np.sqrt(self.J) / np.sqrt(c) / self.I
        return float(np.max(np.abs(q / q[0] - 1.0)))

    def orthogonality(self) -> float:
        """max normalized pairing among <p,H0>, <p,E0>, <E0,H0>."""
        p = self.ray.p

        def pair(a, b):
            num = np.abs(np.sum(a * b, axis=-1))
            den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
            return np.max(num / den)

        return float(max(pair(p, self.H0), pair(p, self.E0),
                         pair(self.E0, self.H0)))


def assemble_H0_E0(
    m: MediumSpec,
    ray: Ray,
    frame: FrameTransport,
    A: np.ndarray,
    I: np.ndarray | None = None,
    J: np.ndarray | None = None,
) -> AmplitudeTrace:
    """Polarized leading amplitudes H0 = A eps^{1/2} eta/c, E0 = -A mu^{1/2} zeta/c.

    eta, zeta are the stored g-unit frames (Euclidean norm c), so the
    assembled norms are |H0| = A eps^{1/2} and |E0| = A mu^{1/2}; this is
    the normalization under which both leading-order Maxwell equations
    hold exactly (checked in tests against grad(phi) cross products).
    """
    c = m.speed(ray.x)
    eps = m.epsilon.value(ray.x)
    mu = m.mu.value(ray.x)
    H0 = (A * np.sqrt(eps) / c)[:, None] * frame.eta
    E0 = -(A * np.sqrt(mu) / c)[:, None] * frame.zeta
    if I is None:
        I = attenuation_I(m, ray)
    return AmplitudeTrace(ray.s.copy(), np.asarray(A, dtype=float), I, H0, E0,
                          ray, frame, J)


def boundary_symbol_S0(eps, mu, rho):
    """Order-0 symbol -(1/mu) sqrt(eps mu - rho^2) rho^2 (broadcasts)."""
    eps = np.asarray(eps, dtype=float)
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    x3 = xi3(eps, mu, rho)
    return -(x3 / mu) * rho**2


def boundary_symbol_S1(eps, mu, sigma, dnu_eps, dnu_mu, rho):
    """Order-1 symbol from outward-normal jets (broadcasts).

    The formula is stated with inward-normal derivatives d3; the
    arguments carry outward jets, converted here with the single global
    sign d3 = -dnu:

        S1 = (eps mu - rho^2) d3mu/mu
             - (eps mu d3mu/mu + mu d3eps)/2 + sigma mu xi3.
    """
    eps = np.asarray(eps, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d3_eps = -np.asarray(dnu_eps, dtype=float)
    d3_mu = -np.asarray(dnu_mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    x3 = xi3(eps, mu, rho)
    q = eps * mu
    return (
        (q - rho**2) * d3_mu / mu
        - 0.5 * (q * d3_mu / mu + mu * d3_eps)
        + sigma * mu * x3
    )


def split_incident(total_tangential_H, total_normal_H_coeff,
                   tol: float = 1e-8):
    """Incident tangential H0 from a total boundary trace.

    At a transversal reflection the tangential components double
    (incident = total/2) and the total normal component vanishes; a
    normal residue beyond tol (relative to the tangential size) means
    the trace is not a clean two-wave superposition.
    """
    t = np.asarray(total_tangential_H, dtype=float)
    n = float(total_normal_H_coeff)
    scale = max(1.0, float(np.linalg.norm(t)))
    if abs(n) > tol * scale:
        raise InconsistentTraceError(
            f"normal H trace {n:.3e} exceeds tolerance {tol * scale:.3e}"
        )
    return 0.5 * t


@dataclasses.dataclass
class BoundarySymbolSample:
    """Measured symbol pair at one boundary point and frequency size."""

    x0: np.ndarray
    rho: float
    S0: float
    S1: float

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(3)


# ----------------------------------------------------------------------
# Ray-level synthesis of S0 and S1.


def _phase_to_ray(m: MediumSpec, pr: PhaseRay) -> Ray:
    c = m.speed(pr.x)
    v = c[:, None] ** 2 * pr.p
    return Ray(pr.s, pr.x, v, "exited" if pr.exited else "truncated",
               pr.x[0].copy(), v[0].copy())


def _family_F(m: MediumSpec, field: "object", rho: float, t1, t2):
    """<xi', H0_tan> sampled along every characteristic of a phase field.

    Returns (F_list, ray0) where F_list[i] is the sampled combination on
    characteristic i and ray0 is the center characteristic as a Ray.
    xi' is rho * t1 by construction.  The incident normalization is the
    constant TE trace E0|patch = rho * t2, i.e. A(0) = rho / mu^{1/2}.
    """
    xi_p = rho * t1
    e_te = t2
    Fs = []
    center = None
    for i, pr in enumerate(field.rays):
        ray = _phase_to_ray(m, pr)
        c = m.speed(ray.x)
        eps = m.epsilon.value(ray.x)
        mu = m.mu.value(ray.x)
        # spreading of the launched family from the variational pair
        v = ray.v
        Yt = np.stack(
            [pr.VA @ t1 - rho * v, pr.VA @ t2], axis=1
        )
        G = np.einsum("nai,nbi->nab", Yt, Yt)
        J = np.sqrt(np.maximum(
            G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0], 0.0))
        if np.any(J <= 0):
            raise CausticError("family spreading collapsed in synthesis")
        I = attenuation_I(m, ray)
        A0 = rho / np.sqrt(mu[0])
        A = A0 * np.sqrt(J[0] / J) * np.sqrt(c / c[0]) * I
        # frame seeded by the TE polarization: zeta(0) = -c e_te
        eta0 = -np.cross(e_te, v[0])
        ft = parallel_transport(m, ray, eta0)
        H0 = (A * np.sqrt(eps) / c)[:, None] * ft.eta
        Fs.append(H0 @ xi_p)
        if i == len(field.rays) // 2:
            center = ray
    return Fs, center


def _one_sided_ds(s: np.ndarray, f: np.ndarray) -> float:
    """df/ds at s[0] from a least-squares quadratic on the first samples."""
    k = min(6, len(s))
    ds = s[:k] - s[0]
    V = np.stack([np.ones(k), ds, ds * ds], axis=1)
    coef, *_ = np.linalg.lstsq(V, f[:k], rcond=None)
    return float(coef[1])


def synthesize_boundary_symbols(
    m: MediumSpec,
    x0,
    nu,
    rhos,
    depth: float = 6e-3,
    stencil: float = 1e-3,
    h: float = 2e-4,
) -> list[BoundarySymbolSample]:
    """Synthesize S0 and S1 at a boundary point from ray-level transport.

    For each rho a 3x3 family of characteristics is launched from a flat
    patch (spacing `stencil`) with the TE-normalized incident wave, the
    combination F = <xi', H0_tan> is formed from transported frames and
    amplitudes, and its inward normal derivative D is extracted through
    the family chart [t1 t2 v].  S0 is F at the point.  S1 uses the jet
    identity S1 = (2 mu xi3 / rho^2)(D - D_ref), where D_ref repeats the
    computation on the reference medium extended constantly along the
    normal (same boundary restriction, zero jets, no conductivity),
    cancelling the jet-independent remainder.
    """
    x0 = np.asarray(x0, dtype=float).reshape(3)
    nu = np.asarray(nu, dtype=float).reshape(3)
    nu = nu / np.linalg.norm(nu)
    t1, t2 = tangent_frame(nu)
    e3 = -nu

    m_ref = MediumSpec(
        ProjectedField(m.epsilon, x0, nu),
        ProjectedField(m.mu, x0, nu),
        ConstantField(0.0),
        m.box,
    )

    ev = m.evaluate(x0[None])
    eps0, mu0 = float(ev.eps[0]), float(ev.mu[0])
    cfg = IntegratorConfig(method="rk4", h=h, store_every=1)
    patch = BoundaryPatch(x0, nu, halfwidth=stencil)

    out = []
    for rho in np.atleast_1d(np.asarray(rhos, dtype=float)):
        x30 = float(xi3(eps0, mu0, float(rho)))
        xi_pc = np.array([rho, 0.0])  # components in (t1, t2)

        def measure(medium):
            fld = boundary_phase(medium, patch, xi_pc, depth, 3, cfg)
            Fs, ray0 = _family_F(medium, fld, float(rho), t1, t2)
            # chart derivatives at the center launch, s = 0
            dFa = (Fs[7][0] - Fs[1][0]) / (2.0 * stencil)
            dFb = (Fs[5][0] - Fs[3][0]) / (2.0 * stencil)
            dFs = _one_sided_ds(ray0.s, Fs[4])
            M = np.stack([t1, t2, ray0.v[0]], axis=1)
            g = np.linalg.solve(M.T, np.array([dFa, dFb, dFs]))
            return float(Fs[4][0]), float(g @ e3)

        S0_val, D = measure(m)
        _, D_ref = measure(m_ref)
        S1_val = 2.0 * mu0 * x30 / rho**2 * (D - D_ref)
        out.append(BoundarySymbolSample(x0, float(rho), S0_val, S1_val))
    return out
