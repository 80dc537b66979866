"""Acceptance gate: the ten headline guarantees at their stated scales.

Each test prints one summary line (visible with -s or in failure output)
and enforces the tolerance and the runtime budget.  These run minutes,
not seconds; everything above desk scale lives here and nowhere else.
"""

import dataclasses
import time

import numpy as np
import pytest

from mxtomo import (
    BallDomain,
    Box,
    ConstantField,
    GaussianBumpField,
    GridField,
    IntegratorConfig,
    MediumSpec,
    RunConfig,
    TomographyConfig,
    ball_foliation,
    boundary_symbol_S0,
    boundary_symbol_S1,
    closed_form_amplitude,
    gen_synthetic,
    herglotz_invert,
    main,
    make_phantom,
    phase_hessian_at_boundary,
    pipeline,
    plane_wave_jacobi_init,
    recover_boundary_order0,
    recover_boundary_order1,
    recover_epsilon,
    recover_sigma_over_eps,
    synthesize_boundary_symbols,
    synthesize_xi_endpoint,
    tangent_frame,
    trace_fan,
    trace_geodesic,
    traveltime_tomography,
    transport_amplitude_ode,
    trt_endpoint_extract,
    trt_forward,
)
from mxtomo.dataset import _build_fan, _chebyshev_rho
from mxtomo.geometry import FrameTransport, LensRecord
from mxtomo.reconstruct import PipelineConfig, _fit_jets
from mxtomo.transforms import TrilinearOp, _ray_quadrature

BOX_LO = np.full(3, -1.05)


def report(num, ok, detail):
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_l2(rec, ref, mask):
    return float(
        np.linalg.norm((rec - ref)[mask]) / np.linalg.norm(ref[mask])
    )


def grid64():
    return BOX_LO, np.full(3, 2.1 / 63), (64, 64, 64)


@pytest.fixture(scope="module")
def flagship():
    return make_phantom("flagship", eps_ref=2.0)


@pytest.fixture(scope="module")
def flagship_dataset(flagship):
    cfg = RunConfig(
        phantom="flagship", eps_ref=2.0, n_sources=144, rays_per_source=144
    )
    ds = gen_synthetic(flagship, cfg)
    assert ds.n_rays() > 18000
    return ds


@pytest.fixture(scope="module")
def lens_fan_10k():
    """10^4 rays with transported frames in the Gaussian-lens medium."""
    m = make_phantom("lens")
    x0, d0 = _build_fan(RunConfig(n_sources=100, rays_per_source=100))
    x0, d0 = x0[:10000], d0[:10000]
    t1, _ = tangent_frame(d0)
    eta0 = m.speed(x0)[:, None] * t1
    cfg = IntegratorConfig(method="rk4", h=0.01, store_every=2)
    rays = trace_fan(m, BallDomain(1.0), x0, d0, cfg, eta0=eta0)
    assert all(r.status == "exited" for r in rays)
    return m, rays


def random_medium(seed=20):
    rng = np.random.default_rng(seed)

    def bumps(base, n, lo, hi):
        return GaussianBumpField(
            base,
            rng.uniform(lo, hi, n),
            rng.uniform(-0.45, 0.45, (n, 3)),
            rng.uniform(0.35, 0.6, n),
        )

    eps = bumps(1.25, 3, -0.22, 0.22)
    mu = bumps(0.95, 2, -0.12, 0.12)
    sigma = bumps(0.12, 2, 0.0, 0.25)
    from mxtomo import Box

    return MediumSpec(eps, mu, sigma, Box(tuple(BOX_LO), tuple(-BOX_LO)))


def test_c01_boundary_symbol_roundtrip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        eps = rng.uniform(0.5, 3.0)
        mu = rng.uniform(0.5, 3.0)
        sig = rng.uniform(0.0, 1.0)
        dne = rng.uniform(-1.0, 1.0)
        dnm = rng.uniform(-1.0, 1.0)
        rho = _chebyshev_rho(eps, mu, 6)
        f0 = recover_boundary_order0(
            np.stack([rho, boundary_symbol_S0(eps, mu, rho)], axis=1)
        )
        s1 = boundary_symbol_S1(eps, mu, sig, dne, dnm, rho)
        f1 = recover_boundary_order1(
            np.stack([rho, s1], axis=1), f0.eps, f0.mu
        )
        worst = max(
            worst,
            abs(f0.eps - eps) / eps,
            abs(f0.mu - mu) / mu,
            abs(f1.sigma - sig) / max(1, sig),
            abs(f1.dn_eps - dne) / max(1, abs(dne)),
            abs(f1.dn_mu - dnm) / max(1, abs(dnm)),
        )
    dt = time.perf_counter() - t0
    report(
        1,
        worst < 1e-10 and dt < 5.0,
        f"boundary round trip: worst={worst:.3e} (tol 1e-10), {dt:.1f}s (<5s)",
    )


def test_c02_symbol_synthesis_matches_closed_forms():
    m = random_medium()
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst0 = worst1 = 0.0
    for _ in range(50):
        nu = rng.standard_normal(3)
        nu /= np.linalg.norm(nu)
        x0 = nu
        ev = m.evaluate(x0[None])
        eps0, mu0, sg0 = float(ev.eps[0]), float(ev.mu[0]), float(ev.sigma[0])
        rho = rng.uniform(0.25, 0.7) * np.sqrt(eps0 * mu0)
        smp = synthesize_boundary_symbols(m, x0, nu, [rho])[0]
        dne = float(ev.grad_eps[0] @ nu)
        dnm = float(ev.grad_mu[0] @ nu)
        s0_ref = float(boundary_symbol_S0(eps0, mu0, rho))
        s1_ref = float(boundary_symbol_S1(eps0, mu0, sg0, dne, dnm, rho))
        worst0 = max(worst0, abs(smp.S0 - s0_ref) / max(1, abs(s0_ref)))
        worst1 = max(worst1, abs(smp.S1 - s1_ref) / max(1, abs(s1_ref)))
    dt = time.perf_counter() - t0
    report(
        2,
        worst0 < 1e-4 and worst1 < 1e-4 and dt < 60.0,
        f"symbol synthesis at 50 points: S0={worst0:.3e} S1={worst1:.3e} "
        f"(tol 1e-4), {dt:.0f}s (<60s)",
    )


def test_c03_geometric_invariants_10k_rays(lens_fan_10k):
    m, rays = lens_fan_10k
    t0 = time.perf_counter()
    ham = drift = 0.0
    for r in rays:
        c2 = m.speed(r.x) ** 2
        ham = max(ham, float(np.max(np.abs(
            c2 * np.sum(r.p * r.p, axis=1) - 1.0
        ))))
        ee = np.sum(r.eta * r.eta, axis=1) / c2
        ev = np.sum(r.eta * r.v, axis=1) / c2
        ez = np.sum(r.eta * r.zeta, axis=1) / c2
        drift = max(
            drift,
            float(np.max(np.abs(ee - 1.0))),
            float(np.max(np.abs(ev))),
            float(np.max(np.abs(ez))),
        )
    x_back = np.stack([r.exit_point for r in rays])
    v_back = -np.stack([r.exit_dir for r in rays])
    cfg = IntegratorConfig(method="rk4", h=0.01, store_every=2)
    back = trace_fan(m, BallDomain(1.0), x_back, v_back, cfg)
    rev = 0.0
    for r, b in zip(rays, back):
        assert b.status == "exited"
        rev = max(
            rev,
            float(np.linalg.norm(b.exit_point - r.entry_point)),
            abs(b.tau - r.tau),
        )
    dt = time.perf_counter() - t0
    report(
        3,
        ham < 1e-8 and rev < 1e-6 and drift < 1e-8 and dt < 120.0,
        f"invariants on {len(rays)} rays: H={ham:.2e} (<1e-8) "
        f"reversal={rev:.2e} (<1e-6) frame={drift:.2e} (<1e-8), "
        f"{dt:.0f}s (<120s)",
    )


def test_c04_amplitude_law():
    m = random_medium()
    dom = BallDomain(1.0)
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()

    def one(nu, h):
        t1, t2 = tangent_frame(nu)
        W = phase_hessian_at_boundary(m, nu, nu, (0.0, 0.0))
        init = plane_wave_jacobi_init(t1, t2, W, (0.0, 0.0))
        cfg = IntegratorConfig(method="rk4", h=h, store_every=1)
        r = trace_geodesic(m, dom, nu, -nu, cfg, jacobi=init)
        A_cf = closed_form_amplitude(m, r, r.jacobi)
        A_ode = transport_amplitude_ode(m, r, r.jacobi)
        return float(np.max(np.abs(A_ode - A_cf) / A_cf))

    worst = 0.0
    for _ in range(5):
        nu = rng.standard_normal(3)
        nu /= np.linalg.norm(nu)
        worst = max(worst, one(nu, 0.01))
    nu = np.array([0.3, -0.5, 0.8])
    nu /= np.linalg.norm(nu)
    errs = np.array([one(nu, h) for h in (0.04, 0.02, 0.01)])
    orders = np.log2(errs[:-1] / errs[1:])
    dt = time.perf_counter() - t0
    report(
        4,
        worst < 1e-6 and np.all(orders > 3.8) and dt < 60.0,
        f"amplitude law: err={worst:.2e} (<1e-6) orders={orders.round(2)} "
        f"(>3.8), {dt:.0f}s (<60s)",
    )


def test_c05_polarization_orthogonality(lens_fan_10k):
    m, rays = lens_fan_10k
    worst = 0.0
    for r in rays:
        eps = m.epsilon.value(r.x)
        mu = m.mu.value(r.x)
        c = m.speed(r.x)
        H0 = (np.sqrt(eps) / c)[:, None] * r.eta
        E0 = -(np.sqrt(mu) / c)[:, None] * r.zeta
        p = r.p

        def pair(a, b):
            num = np.abs(np.sum(a * b, axis=1))
            den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            return float(np.max(num / den))

        worst = max(worst, pair(p, H0), pair(p, E0), pair(E0, H0))
    report(
        5,
        worst < 1e-8,
        f"orthogonality on {len(rays)} rays: worst pairing={worst:.2e} (<1e-8)",
    )


def test_c06_adjoint_and_endpoint_identity(lens_fan_10k):
    m, rays = lens_fan_10k
    rays = rays[:1000]
    t0 = time.perf_counter()

    tpl = GridField(BOX_LO, np.full(3, 2.1 / 32), np.zeros((33,) * 3))
    rows, _, w, xq, _ = _ray_quadrature(rays, ds=0.03)
    op = TrilinearOp(tpl, xq, w, rows, len(rays))
    rng = np.random.default_rng(6)
    f = rng.standard_normal(op.n_nodes)
    y = rng.standard_normal(len(rays))
    lhs = float(op.apply(f) @ y)
    rhs = float(f @ op.adjoint(y))
    adj = abs(lhs - rhs) / max(abs(lhs), 1e-30)

    def tensor_at(x):
        g = np.exp(-np.sum((x - [0.1, -0.05, 0.2]) ** 2, axis=-1) / 0.35)
        out = np.zeros(x.shape[:-1] + (6,))
        for k, a in enumerate((0.3, -0.2, 0.25, 0.1, -0.12, 0.08)):
            out[..., k] = a * g
        return out

    frames = [FrameTransport(r.s, r.eta, r.zeta) for r in rays]
    half = 0.5 * trt_forward(tensor_at, m, rays, frames, ds=0.005)[:, 0]
    C = 0.4
    endp = 0.0
    for k, (r, fr) in enumerate(zip(rays, frames)):
        xi_a, xi_b = synthesize_xi_endpoint(
            m, r, fr, tensor_at, C=C, pairing_a=0.2
        )
        got = trt_endpoint_extract(r, fr, xi_a, xi_b)
        endp = max(endp, abs(got - half[k] - 0.5 * C * r.tau))
    dt = time.perf_counter() - t0
    report(
        6,
        adj < 1e-6 and endp < 1e-6,
        f"adjoint={adj:.2e} (<1e-6), endpoint identity on {len(rays)} rays: "
        f"{endp:.2e} (<1e-6), {dt:.0f}s",
    )


def test_c07_stage_reconstructions(flagship, flagship_dataset):
    m, ds = flagship, flagship_dataset
    fol = ball_foliation(1.0)

    # stage 1: wave speed from exact travel times
    t0 = time.perf_counter()
    L = ds.lens
    recs = [
        LensRecord(
            L["x_in"][i], L["v_in"][i], L["x_out"][i], L["v_out"][i],
            L["tau"][i],
        )
        for i in range(len(L["tau"]))
    ]
    tres = traveltime_tomography(
        recs, fol, ConstantField(1.0), TomographyConfig(dims=(64,) * 3)
    )
    t_c = time.perf_counter() - t0
    nodes = tres.c.node_points()
    inside = np.linalg.norm(nodes, axis=1) < 1.0
    err_c = rel_l2(
        tres.c.values[..., 0].reshape(-1), m.speed(nodes), inside
    )

    # stage 2: sigma/eps from exact attenuation data, exact speed upstream
    t0 = time.perf_counter()
    x0 = np.asarray(ds.acquisition.entries)
    d0 = np.asarray(ds.acquisition.directions)
    cfg = IntegratorConfig(method="rk4", h=0.01, store_every=2)
    rays = trace_fan(m, BallDomain(1.0), x0, d0, cfg)
    c_exact = GridField.from_function(lambda x: m.speed(x), *grid64())
    soe = recover_sigma_over_eps(
        rays, np.asarray(ds.attenuation["value"]), c_exact
    )
    t_soe = time.perf_counter() - t0
    err_soe = rel_l2(
        soe.field.values[..., 0].reshape(-1),
        m.sigma_over_eps(nodes),
        inside,
    )

    # stage 3: permittivity from exact tensor data, exact upstream
    t0 = time.perf_counter()
    stride = max(1, int(np.ceil(len(rays) / 4000)))
    sel = np.arange(0, len(rays), stride)
    seeds = np.asarray(ds.trt["seed"])[sel]
    rays_t = trace_fan(
        m, BallDomain(1.0), x0[sel], d0[sel], cfg, eta0=seeds
    )
    frames = [FrameTransport(r.s, r.eta, r.zeta) for r in rays_t]
    perm = recover_epsilon(
        np.asarray(ds.trt["values"])[sel],
        rays_t,
        frames,
        m,
        eps_ref=2.0,
        inv_dims=(33,) * 3,
        out_dims=(64,) * 3,
    )
    t_eps = time.perf_counter() - t0
    err_eps = rel_l2(
        perm.eps.values[..., 0].reshape(-1), m.epsilon.value(nodes), inside
    )

    ok = (
        err_c < 0.03
        and err_soe < 0.05
        and err_eps < 0.06
        and max(t_c, t_soe, t_eps) < 600.0
    )
    report(
        7,
        ok,
        f"stages at 64^3, {len(rays)} rays: c={err_c:.3f} (<0.03, {t_c:.0f}s) "
        f"sigma/eps={err_soe:.3f} (<0.05, {t_soe:.0f}s) "
        f"eps={err_eps:.3f} (<0.06, {t_eps:.0f}s); each <600s",
    )


def test_c08_flagship_pipeline(flagship, flagship_dataset):
    t0 = time.perf_counter()
    rep = pipeline(
        flagship_dataset,
        PipelineConfig(
            dims=(64,) * 3, inv_dims=(33,) * 3, truth=flagship,
            eval_level=0.2,
        ),
    )
    dt = time.perf_counter() - t0
    assert rep.failed_stage is None, rep.notes
    err = rep.errors["eps_deep"]
    report(
        8,
        err < 0.15 and dt < 2700.0,
        f"flagship pipeline: eps (kappa>=0.2) = {err:.3f} (<0.15), "
        f"{dt:.0f}s (<2700s)",
    )


def test_c09_radial_cross_validation():
    m = make_phantom("radial")
    cfg = RunConfig(
        phantom="radial", radial=True, n_sources=72, rays_per_source=48
    )
    ds = gen_synthetic(m, cfg)
    jets, _, _ = _fit_jets(ds.symbols)
    c_bdy = float(np.mean(jets.speed()))

    L = ds.lens
    x_in = np.asarray(L["x_in"])
    v_in = np.asarray(L["v_in"])
    vhat = v_in / np.linalg.norm(v_in, axis=1, keepdims=True)
    b = np.linalg.norm(np.cross(x_in, vhat), axis=1)
    r_prof, c_prof = herglotz_invert(
        b, np.asarray(L["tau"]), c_boundary=c_bdy
    )

    recs = [
        LensRecord(
            L["x_in"][i], L["v_in"][i], L["x_out"][i], L["v_out"][i],
            L["tau"][i],
        )
        for i in range(len(L["tau"]))
    ]
    tres = traveltime_tomography(
        recs,
        ball_foliation(1.0),
        ConstantField(c_bdy),
        TomographyConfig(dims=(48,) * 3, outer=6, inner=60),
    )
    nodes = tres.c.node_points()
    rr = np.linalg.norm(nodes, axis=1)
    inside = rr < 1.0
    c_herglotz = np.interp(rr, r_prof, c_prof, left=c_prof[0], right=c_bdy)
    c_tomo = tres.c.values[..., 0].reshape(-1)
    diff = rel_l2(c_tomo, c_herglotz, inside)
    truth = rel_l2(c_herglotz, m.speed(nodes), inside)
    report(
        9,
        diff < 0.01,
        f"radial cross-validation: |tomography - herglotz| = {diff:.4f} "
        f"(<0.01); herglotz vs truth {truth:.2e}",
    )


def test_c10_determinism(tmp_path):
    cfg = RunConfig(
        phantom="lens",
        n_sources=10,
        rays_per_source=4,
        n_boundary_points=5,
        n_rho=6,
        trace_h=0.02,
        grid_dims=(17,) * 3,
        inv_dims=(9,) * 3,
        noise_level=0.02,
        seed=13,
    )
    p = tmp_path / "run.cfg"
    cfg.to_file(p)

    def run_all(tag):
        data = tmp_path / f"data_{tag}"
        rep = tmp_path / f"rep_{tag}"
        assert main(["synth", "--config", str(p), "--out", str(data)]) == 0
        assert main(
            ["reconstruct", "--data", str(data), "--config", str(p),
             "--out", str(rep)]
        ) == 0
        return data, rep

    d1, r1 = run_all("a")
    d2, r2 = run_all("b")

    def same(a, b):
        names = sorted(q.name for q in a.iterdir())
        return names == sorted(q.name for q in b.iterdir()) and all(
            (a / n).read_bytes() == (b / n).read_bytes() for n in names
        )

    report(
        10,
        same(d1, d2) and same(r1, r2),
        "identical config+seed: dataset and report byte-identical twice",
    )
