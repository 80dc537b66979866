"""Command-line driver.

Thin orchestration over the library: every subcommand parses flags,
calls one library entry point, writes plain files, and returns an exit
status (0 success, 1 runtime or verification failure, 2 usage error).
No numerics live here.
"""

from __future__ import annotations

import argparse
import os
import sys
import dataclasses
from pathlib import Path

import numpy as np

from .errors import ConfigError, MxtomoError
from .media import log_sqrt_eps_field, tensor_A_of_u
from .geometry import (
    BallDomain,
    FrameTransport,
    IntegratorConfig,
    tangent_frame,
    trace_fan,
)
from .amplitude import attenuation_I
from .transforms import trt_forward
from . import dataset as dsmod
from . import reconstruct as rc
from . import verify as vf

__all__ = ["main"]


def _set_threads(n: int) -> None:
    # Best effort: caps BLAS pools that honor the variables at call time.
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


def _load_cfg(args) -> dsmod.RunConfig:
    if args.config is None:
        raise ConfigError("this subcommand requires --config")
    cfg = dsmod.RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _traced_fan(cfg: dsmod.RunConfig):
    m = dsmod.make_phantom(cfg.phantom, cfg.eps_ref, cfg.radius)
    x0, d0 = dsmod._build_fan(cfg)
    c0 = m.speed(x0)
    t1, _ = tangent_frame(d0)
    icfg = IntegratorConfig(
        method="rk4",
        h=cfg.trace_h,
        store_every=cfg.store_every,
        max_length=cfg.max_length,
    )
    rays = trace_fan(
        m, BallDomain(cfg.radius), x0, d0, cfg=icfg, eta0=c0[:, None] * t1
    )
    return m, rays


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("this subcommand requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_trace(args) -> int:
    cfg = _load_cfg(args)
    _, rays = _traced_fan(cfg)
    out = _out_dir(args)
    with open(out / "rays.csv", "w") as fh:
        fh.write("ray_id,status,tau,xout1,xout2,xout3,vout1,vout2,vout3\n")
        for i, r in enumerate(rays):
            if r.status == "exited":
                tail = [r.tau, *r.exit_point, *r.exit_dir]
            else:
                tail = [float("nan")] * 7
            fh.write(
                f"{i},{r.status}," + ",".join("%.17g" % v for v in tail) + "\n"
            )
    counts = {}
    for r in rays:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(
        f"traced {len(rays)} rays: "
        + ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    )
    return 0


def _cmd_lens(args) -> int:
    cfg = _load_cfg(args)
    _, rays = _traced_fan(cfg)
    rays = [r for r in rays if r.status == "exited"]
    out = _out_dir(args)
    with open(out / "lens.csv", "w") as fh:
        fh.write(dsmod._LENS_HEADER + "\n")
        for r in rays:
            row = [*r.entry_point, *r.entry_dir, *r.exit_point, *r.exit_dir,
                   r.tau]
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    print(f"wrote {len(rays)} lens rows")
    return 0


def _cmd_xray(args) -> int:
    cfg = _load_cfg(args)
    m, rays = _traced_fan(cfg)
    rays = [r for r in rays if r.status == "exited"]
    out = _out_dir(args)
    with open(out / "attenuation.csv", "w") as fh:
        fh.write("ray_id,value\n")
        for i, r in enumerate(rays):
            v = -2.0 * np.log(attenuation_I(m, r)[-1])
            fh.write(f"{i},%.17g\n" % v)
    print(f"wrote {len(rays)} attenuation rows")
    return 0


def _cmd_trt(args) -> int:
    cfg = _load_cfg(args)
    m, rays = _traced_fan(cfg)
    rays = [r for r in rays if r.status == "exited"]
    frames = [FrameTransport(r.s, r.eta, r.zeta) for r in rays]
    u = log_sqrt_eps_field(m)
    vals = 0.5 * trt_forward(
        lambda x: tensor_A_of_u(m, u, x), m, rays, frames, ds=0.01
    )
    out = _out_dir(args)
    with open(out / "trt.csv", "w") as fh:
        fh.write("ray_id,pol,value\n")
        for i in range(len(rays)):
            for k in range(vals.shape[1]):
                fh.write(f"{i},{k},%.17g\n" % vals[i, k])
    print(f"wrote {len(rays)}x{vals.shape[1]} tensor data rows")
    return 0


def _cmd_boundary_id(args) -> int:
    if args.data is None:
        raise ConfigError("boundary-id requires --data")
    ds = dsmod.Dataset.load(args.data)
    jets, diag, notes = rc._fit_jets(ds.symbols)
    out = _out_dir(args)
    with open(out / "jets.csv", "w") as fh:
        fh.write("x1,x2,x3,eps,mu,sigma,dn_eps,dn_mu\n")
        for j in range(len(jets)):
            row = [*jets.points[j], jets.eps[j], jets.mu[j], jets.sigma[j],
                   jets.dn_eps[j], jets.dn_mu[j]]
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    print(
        f"fitted {len(jets)} boundary points "
        f"(max condition {diag['jets_max_cond']:.3e})"
    )
    return 0


def _cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    m = dsmod.make_phantom(cfg.phantom, cfg.eps_ref, cfg.radius)
    ds = dsmod.gen_synthetic(m, cfg)
    ds.save(out)
    print(
        f"dataset written to {out} "
        f"({ds.n_rays()} rays, {len(ds.symbols['rho'])} symbol samples)"
    )
    return 0


def _pipeline_config(ds: dsmod.Dataset, cfg: dsmod.RunConfig | None
                     ) -> rc.PipelineConfig:
    meta = ds.meta
    radius = float(meta.get("radius", 1.0))
    noise = float(meta.get("noise_level", 0.0))
    kw = dict(
        domain_radius=radius,
        radial_speed=bool(meta.get("radial", False)),
        noise_level=noise if noise > 0 else None,
    )
    if cfg is not None:
        kw.update(
            dims=tuple(cfg.grid_dims),
            inv_dims=tuple(cfg.inv_dims),
            reg_xray=cfg.reg_xray,
            reg_trt=cfg.reg_trt,
            trt_ray_limit=cfg.trt_ray_limit,
            trace_h=cfg.trace_h,
            tomography=rc.TomographyConfig(
                dims=tuple(cfg.grid_dims),
                domain_radius=radius,
                shells=tuple(cfg.shells),
                trace_h=cfg.trace_h,
            ),
        )
    phantom = str(meta.get("phantom", ""))
    if phantom:
        try:
            kw["truth"] = dsmod.make_phantom(
                phantom, float(meta.get("eps_ref", 1.0)), radius
            )
        except ConfigError:
            pass
    return rc.PipelineConfig(**kw)


def _cmd_reconstruct(args) -> int:
    if args.data is None:
        raise ConfigError("reconstruct requires --data")
    ds = dsmod.Dataset.load(args.data)
    cfg = dsmod.RunConfig.from_file(args.config) if args.config else None
    pc = _pipeline_config(ds, cfg)
    report = rc.pipeline(ds, pc)
    out = _out_dir(args)
    for name in ("c", "sigma_over_eps", "eps", "mu", "sigma"):
        fld = getattr(report, name)
        if fld is not None:
            fld.save(out / f"{name}.mxt")
    # Timings go to stdout: the written report must be byte-stable
    # across reruns of the same dataset and config.
    with open(out / "summary.txt", "w") as fh:
        for line in report.summary_lines(timings=False):
            fh.write(line + "\n")
    for k in sorted(report.timings):
        print(f"time_{k}={report.timings[k]:.3f}")
    hist = report.residuals.get("tomography_misfit_history")
    if hist is not None:
        with open(out / "misfit_history.csv", "w") as fh:
            fh.write("iteration,misfit\n")
            for i, v in enumerate(np.asarray(hist)):
                fh.write(f"{i},%.17g\n" % v)
    if report.failed_stage:
        print(f"stage '{report.failed_stage}' failed; partial report "
              f"written to {out}", file=sys.stderr)
    else:
        print(f"report written to {out}")
    return 0


def _cmd_verify(args) -> int:
    names = None
    if args.suite:
        names = [s.strip() for s in args.suite.split(",") if s.strip()]
    rows = vf.run_suites(names)
    wide = max(len(r[1]) for r in rows)
    failures = 0
    for suite, check, ok, detail in rows:
        status = "PASS" if ok else "FAIL"
        failures += not ok
        print(f"{suite:<12} {check:<{wide}}  {status}  {detail}")
    print(f"{len(rows) - failures}/{len(rows)} checks passed")
    return 1 if failures else 0


_COMMANDS = {
    "trace": (_cmd_trace, "trace an acquisition fan, write ray statuses"),
    "lens": (_cmd_lens, "write the lens relation table for a phantom"),
    "xray": (_cmd_xray, "forward attenuation line integrals for a phantom"),
    "trt": (_cmd_trt, "forward transverse tensor data for a phantom"),
    "boundary-id": (
        _cmd_boundary_id,
        "fit boundary jets from a dataset's symbol table",
    ),
    "synth": (_cmd_synth, "generate a synthetic dataset directory"),
    "reconstruct": (
        _cmd_reconstruct,
        "run the staged inversion on a dataset directory",
    ),
    "verify": (_cmd_verify, "run invariant suites, print a pass/fail table"),
}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mxtomo",
        description="ray-based synthesis and staged inversion toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (fn, help_) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", metavar="PATH", help="run config file")
        p.add_argument("--data", metavar="DIR", help="input dataset directory")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the config RNG seed")
        p.add_argument("--threads", type=int, metavar="N",
                       help="thread cap (default: MXT_THREADS)")
        p.add_argument("--suite", metavar="NAME",
                       help="comma-separated verify suites (default: all)")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = args.threads
    if threads is None and os.environ.get("MXT_THREADS"):
        try:
            threads = int(os.environ["MXT_THREADS"])
        except ValueError:
            print("error: MXT_THREADS is not an integer", file=sys.stderr)
            return 2
    if threads is not None:
        if threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        _set_threads(threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MxtomoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
