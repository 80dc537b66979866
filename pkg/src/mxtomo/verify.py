"""Fast invariant suites behind the `verify` subcommand.

Each suite is a function returning (check, ok, detail) rows and is meant
to finish in seconds: these are smoke-level guarantees (adjointness,
conservation, round trips), not the full acceptance runs.  Tolerances
scale by the MXT_VERIFY_TOL_SCALE environment variable so the failure
path of the driver can be exercised deliberately.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .fields import (
    ConstantField,
    GaussianBumpField,
    GridField,
    SplineField,
    sym6_quadratic_form,
    sym6_to_matrix,
)
from .media import Box, MediumSpec, ball_foliation
from .geometry import (
    BallDomain,
    FrameTransport,
    IntegratorConfig,
    JacobiInit,
    spreading_J,
    tangent_frame,
    trace_fan,
    trace_geodesic,
)
from .amplitude import (
    assemble_H0_E0,
    attenuation_I,
    boundary_symbol_S0,
    boundary_symbol_S1,
    closed_form_amplitude,
    transport_amplitude_ode,
)
from . import transforms as tf
from . import reconstruct as rc
from . import dataset as dsmod

__all__ = ["SUITES", "run_suites", "tol_scale"]


def tol_scale() -> float:
    try:
        return float(os.environ.get("MXT_VERIFY_TOL_SCALE", "1"))
    except ValueError:
        return 1.0


def _row(name, err, tol):
    tol = tol * tol_scale()
    return (name, bool(err < tol), f"err={err:.3e} tol={tol:.3e}")


def _lens_medium() -> MediumSpec:
    box = Box((-1.05, -1.05, -1.05), (1.05, 1.05, 1.05))
    c = GaussianBumpField(1.0, [0.10], [(0.25, -0.15, 0.10)], [0.35])
    return MediumSpec.from_speed(c, box=box)


def _some_rays(m, n=8, h=0.01, jacobi=None, seed_frames=True):
    dirs = dsmod._build_fan(
        dsmod.RunConfig(n_sources=n, rays_per_source=1, trace_h=h)
    )
    x0, v0 = dirs
    eta0 = None
    if seed_frames:
        c0 = m.speed(x0)
        t1, _ = tangent_frame(v0)
        eta0 = c0[:, None] * t1
    cfg = IntegratorConfig(method="rk4", h=h, store_every=1)
    rays = trace_fan(m, BallDomain(1.0), x0, v0, cfg=cfg,
                     eta0=eta0, jacobi=jacobi)
    return [r for r in rays if r.status == "exited"]


def suite_fields():
    rows = []
    rng = np.random.default_rng(11)

    xs = np.linspace(-1, 1, 9)
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    vals = (0.3 + 0.5 * X - 0.2 * Y * Z + 0.1 * Z**3)[..., None]
    g = GridField((-1, -1, -1), (0.25, 0.25, 0.25), vals)
    sp = SplineField(g)
    pts = rng.uniform(-0.9, 0.9, size=(64, 3))
    exact = 0.3 + 0.5 * pts[:, 0] - 0.2 * pts[:, 1] * pts[:, 2] + 0.1 * pts[:, 2] ** 3
    err = float(np.max(np.abs(sp.value(pts) - exact)))
    rows.append(_row("spline reproduces cubics", err, 1e-9))

    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "f.mxt"
        g.save(p)
        b1 = p.read_bytes()
        g2 = GridField.load(p)
        g2.save(p)
        ok = p.read_bytes() == b1 and np.array_equal(g.values, g2.values)
    rows.append(("field container round trip", ok,
                 "bit-exact" if ok else "payload changed"))

    t6 = rng.standard_normal(6)
    v = rng.standard_normal(3)
    err = abs(float(v @ sym6_to_matrix(t6) @ v) -
              float(sym6_quadratic_form(t6, v)))
    rows.append(_row("sym6 quadratic form", err, 1e-12))
    return rows


def suite_geometry():
    rows = []
    m = MediumSpec.vacuum()
    rays = _some_rays(m, n=6)
    err = max(
        abs(r.tau - np.linalg.norm(r.exit_point - r.entry_point))
        for r in rays
    )
    rows.append(_row("vacuum tau = chord", err, 1e-9))

    m = _lens_medium()
    rays = _some_rays(m, n=8)
    h_err = 0.0
    for r in rays:
        c = m.speed(r.x)
        H = 0.5 * (c**2 * np.sum(r.p**2, axis=1) - 1.0)
        h_err = max(h_err, float(np.max(np.abs(H))))
    rows.append(_row("Hamiltonian conservation", h_err, 1e-8))

    rev_err = 0.0
    dom = BallDomain(1.0)
    cfg = IntegratorConfig(method="rk4", h=0.01, store_every=1)
    for r in rays[:4]:
        back = trace_fan(
            m, dom,
            r.exit_point[None], -r.exit_dir[None] /
            np.linalg.norm(r.exit_dir),
            cfg=cfg,
        )[0]
        if back.status != "exited":
            rev_err = np.inf
            break
        rev_err = max(
            rev_err,
            float(np.linalg.norm(back.exit_point - r.entry_point)),
            abs(back.tau - r.tau),
        )
    rows.append(_row("time reversal", rev_err, 1e-6))

    drift = 0.0
    for r in rays:
        c2 = m.speed(r.x) ** 2
        g = lambda a, b: np.sum(a * b, axis=1) / c2
        drift = max(
            drift,
            float(np.max(np.abs(g(r.eta, r.eta) - 1.0))),
            float(np.max(np.abs(g(r.eta, r.v)))),
            float(np.max(np.abs(g(r.eta, r.zeta)))),
        )
    rows.append(_row("frame inner products", drift, 1e-8))
    return rows


def suite_amplitude():
    rows = []
    box = Box((-1.05,) * 3, (1.05,) * 3)
    m = MediumSpec(ConstantField(1.0), ConstantField(1.0),
                   ConstantField(0.5), box)
    rays = _some_rays(m, n=4, seed_frames=False)
    err = max(
        float(np.max(np.abs(attenuation_I(m, r) - np.exp(-0.25 * r.s))))
        for r in rays
    )
    rows.append(_row("attenuation closed form", err, 1e-10))

    m = _lens_medium()
    x0, v0 = dsmod._build_fan(dsmod.RunConfig(n_sources=4, rays_per_source=1))
    c0 = m.speed(x0)
    t1, _ = tangent_frame(v0)
    eta0 = c0[:, None] * t1
    cfg = IntegratorConfig(method="rk4", h=0.005, store_every=1)
    dom = BallDomain(1.0)
    ode_err = orth_err = 0.0
    for k in range(len(x0)):
        ji = JacobiInit(np.stack([t1[k], np.cross(v0[k], t1[k])]),
                        np.zeros((2, 3)))
        r = trace_geodesic(m, dom, x0[k], v0[k], cfg=cfg,
                           eta0=eta0[k], jacobi=ji)
        if r.status != "exited":
            continue
        J = spreading_J(m, r, ji)
        A_ode = transport_amplitude_ode(m, r, J)
        A_ref = closed_form_amplitude(m, r, J)
        ode_err = max(ode_err, float(np.max(np.abs(A_ode / A_ref - 1.0))))
        fr = FrameTransport(r.s, r.eta, r.zeta)
        tr = assemble_H0_E0(m, r, fr, A_ode)
        orth_err = max(orth_err, tr.orthogonality())
    rows.append(_row("amplitude ODE vs closed form", ode_err, 1e-6))
    rows.append(_row("polarization orthogonality", orth_err, 1e-8))
    return rows


def suite_transforms():
    rows = []
    m = MediumSpec.vacuum()
    rays = _some_rays(m, n=6, seed_frames=False)
    vals = tf.xray_forward(ConstantField(0.7), rays)
    err = max(abs(v - 0.7 * r.s[-1]) for v, r in zip(vals, rays))
    rows.append(_row("x-ray of a constant", err, 1e-6))

    rng = np.random.default_rng(3)
    grid = tf._grid_template(((-1.0,) * 3, (2.0 / 7,) * 3, (8, 8, 8)))
    pts = rng.uniform(-0.8, 0.8, size=(40, 3))
    op = tf.TrilinearOp(grid, pts, rng.uniform(0.5, 1.0, 40),
                        rng.integers(0, 5, 40), 5)
    x = rng.standard_normal(8 * 8 * 8)
    y = rng.standard_normal(5)
    lhs = float(op.apply(x) @ y)
    rhs = float(x @ op.adjoint(y))
    err = abs(lhs - rhs) / max(abs(lhs), 1e-30)
    rows.append(_row("trilinear adjoint", err, 1e-12))

    gop = tf.GradOp((8, 8, 8), (0.1, 0.1, 0.1))
    d = gop.apply(x)
    w = rng.standard_normal(d.shape)
    err = abs(float(d @ w) - float(x @ gop.adjoint(w))) / abs(float(d @ w))
    rows.append(_row("gradient adjoint", err, 1e-12))

    m = _lens_medium()
    rays = _some_rays(m, n=4, h=0.005)
    t6 = rng.standard_normal(6) * 0.1

    def tensor_at(x):
        return np.broadcast_to(t6, x.shape[:-1] + (6,))

    err = 0.0
    for r in rays:
        fr = FrameTransport(r.s, r.eta, r.zeta)
        quad = tf.trt_forward(tensor_at, m, [r], [fr], ds=0.004)[0, 0]
        xi_a = 0.3 * r.eta[0]
        _, xi_b = tf.synthesize_xi_endpoint(
            m, r, fr, tensor_at, C=0.25,
            pairing_a=float(r.eta[0] @ xi_a) / m.speed(r.x[:1])[0] ** 2,
        )
        p = tf.trt_endpoint_extract(r, fr, xi_a, xi_b)
        err = max(err, abs(2.0 * p - 0.25 * r.s[-1] - quad))
    rows.append(_row("endpoint datum vs quadrature", err, 1e-6))
    return rows


def suite_reconstruct():
    rows = []
    rng = np.random.default_rng(7)
    err0 = err1 = 0.0
    for _ in range(200):
        eps = rng.uniform(0.5, 3.0)
        mu = rng.uniform(0.5, 3.0)
        sig = rng.uniform(0.0, 1.0)
        dne = rng.uniform(-1.0, 1.0)
        dnm = rng.uniform(-1.0, 1.0)
        rhos = dsmod._chebyshev_rho(eps, mu, 6)
        f0 = rc.recover_boundary_order0(
            [(r, float(boundary_symbol_S0(eps, mu, r))) for r in rhos]
        )
        f1 = rc.recover_boundary_order1(
            [(r, float(boundary_symbol_S1(eps, mu, sig, dne, dnm, r)))
             for r in rhos],
            f0.eps, f0.mu,
        )
        err0 = max(err0, abs(f0.eps - eps), abs(f0.mu - mu))
        err1 = max(err1, abs(f1.dn_eps - dne), abs(f1.dn_mu - dnm),
                   abs(f1.sigma - sig))
    rows.append(_row("order-0 boundary round trip", err0, 1e-10))
    rows.append(_row("order-1 boundary round trip", err1, 1e-10))

    b = np.linspace(0.05, 0.999, 40)
    tau = 2.0 * np.sqrt(1.0 - b**2)
    r, c = rc.herglotz_invert(b, tau)
    err = float(np.max(np.abs(c - 1.0)))
    rows.append(_row("radial profile, constant speed", err, 1e-3))
    return rows


def suite_io():
    rows = []
    cfg = dsmod.RunConfig(
        phantom="lossy_vacuum",
        n_sources=6,
        rays_per_source=3,
        n_boundary_points=4,
        n_rho=3,
        trace_h=0.02,
        levels=(0.0, 1.0),
    )
    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "run.cfg"
        cfg.to_file(p)
        ok = dsmod.RunConfig.from_file(p) == cfg
        rows.append(("config round trip", ok, "equal" if ok else "drifted"))

        m = dsmod.make_phantom(cfg.phantom)
        ds = dsmod.gen_synthetic(m, cfg)
        d1 = Path(td) / "a"
        d2 = Path(td) / "b"
        ds.save(d1)
        dsmod.Dataset.load(d1).save(d2)
        same = all(
            (d1 / f.name).read_bytes() == (d2 / f.name).read_bytes()
            for f in sorted(d1.iterdir())
        )
        rows.append(("dataset round trip", same,
                     "bit-exact" if same else "files differ"))

    try:
        dsmod.RunConfig(n_sources=0)
        rows.append(("config validation", False, "no error raised"))
    except ConfigError:
        rows.append(("config validation", True, "rejects bad counts"))

    try:
        GridField.load(__file__)
        rows.append(("container header check", False, "no error raised"))
    except FormatError:
        rows.append(("container header check", True, "rejects bad header"))
    return rows


SUITES = {
    "fields": suite_fields,
    "geometry": suite_geometry,
    "amplitude": suite_amplitude,
    "transforms": suite_transforms,
    "reconstruct": suite_reconstruct,
    "io": suite_io,
}


def run_suites(names=None):
    """Run the named suites (all by default); rows are (suite, check, ok, detail)."""
    if names is None:
        names = list(SUITES)
    rows = []
    for name in names:
        if name not in SUITES:
            raise ConfigError(
                f"unknown suite '{name}' (have {', '.join(sorted(SUITES))})"
            )
        for check, ok, detail in SUITES[name]():
            rows.append((name, check, bool(ok), detail))
    return rows
