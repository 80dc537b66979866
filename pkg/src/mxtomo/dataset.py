"""Synthetic acquisition datasets: generation, layout, serialization.

A dataset is a directory of CSV tables plus a key=value metadata file.
All rays that appear in any table exited the domain; trapped, truncated
and grazing launches are dropped at generation time (and counted, with a
hard failure when they exceed a tenth of the fan).  Floats are printed
with 17 significant digits so that save/load round trips are bit exact.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

import numpy as np

from .errors import (
    AcquisitionError,
    ConfigError,
    FormatError,
    InconsistentDataError,
)
from .fields import (
    ConstantField,
    ExpScaledField,
    GaussianBumpField,
    PowerField,
    ProductField,
    RadialField,
)
from .media import (
    Box,
    MediumSpec,
    _fibonacci_directions,
    ball_foliation,
    check_foliation_convexity,
    log_sqrt_eps_field,
    tensor_A_of_u,
)
from .geometry import (
    BallDomain,
    FrameTransport,
    IntegratorConfig,
    tangent_frame,
    trace_fan,
)
from .amplitude import attenuation_I, boundary_symbol_S0, boundary_symbol_S1
from .transforms import AcquisitionSet, trt_forward

import warnings

__all__ = [
    "RunConfig",
    "Dataset",
    "make_phantom",
    "gen_synthetic",
    "FORMAT_VERSION",
]

FORMAT_VERSION = "MXT-DS v1"

_LENS_HEADER = (
    "xin1,xin2,xin3,vin1,vin2,vin3,"
    "xout1,xout2,xout3,vout1,vout2,vout3,tau"
)
_SYMBOL_HEADER = "x1,x2,x3,rho,S0,S1"
_ACQ_HEADER = "ray_id,x1,x2,x3,d1,d2,d3,eta1,eta2,eta3"


# ----------------------------------------------------------------------
# Run configuration.


def _parse_tuple(s, cast=float):
    return tuple(cast(v) for v in str(s).split())


@dataclasses.dataclass
class RunConfig:
    """Everything a synthetic run needs, round-trippable to key=value text."""

    phantom: str = "vacuum"
    eps_ref: float = 1.0
    radius: float = 1.0
    radial: bool = False
    n_sources: int = 36
    rays_per_source: int = 16
    min_cos: float = 0.25
    n_boundary_points: int = 20
    n_rho: int = 8
    trace_h: float = 0.01
    store_every: int = 2
    max_length: float = 40.0
    grid_dims: tuple = (64, 64, 64)
    inv_dims: tuple = (33, 33, 33)
    shells: tuple = (0.5, 1.0)
    levels: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    trt_ray_limit: int = 4000
    reg_xray: float | None = None
    reg_trt: float | None = None
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1 or self.rays_per_source < 1:
            raise ConfigError("acquisition counts must be >= 1")
        if self.n_boundary_points < 1 or self.n_rho < 2:
            raise ConfigError("need boundary points and >= 2 rho samples")
        if self.trace_h <= 0 or self.max_length <= 0:
            raise ConfigError("integrator steps and budgets must be > 0")
        if self.noise_level < 0:
            raise ConfigError("noise level must be >= 0")
        if self.radius <= 0:
            raise ConfigError("radius must be > 0")

    # section -> {key: (attr, parse, format)}
    _SCHEMA = {
        "phantom": {
            "name": ("phantom", str, str),
            "eps_ref": ("eps_ref", float, "%.17g"),
            "radius": ("radius", float, "%.17g"),
            "radial": ("radial", lambda s: s.lower() in ("1", "true", "yes"),
                       lambda v: "true" if v else "false"),
        },
        "acquisition": {
            "n_sources": ("n_sources", int, "%d"),
            "rays_per_source": ("rays_per_source", int, "%d"),
            "min_cos": ("min_cos", float, "%.17g"),
            "n_boundary_points": ("n_boundary_points", int, "%d"),
            "n_rho": ("n_rho", int, "%d"),
        },
        "integrator": {
            "trace_h": ("trace_h", float, "%.17g"),
            "store_every": ("store_every", int, "%d"),
            "max_length": ("max_length", float, "%.17g"),
        },
        "recon": {
            "grid_dims": ("grid_dims", lambda s: _parse_tuple(s, int),
                          lambda v: " ".join("%d" % d for d in v)),
            "inv_dims": ("inv_dims", lambda s: _parse_tuple(s, int),
                         lambda v: " ".join("%d" % d for d in v)),
            "shells": ("shells", _parse_tuple,
                       lambda v: " ".join("%.17g" % d for d in v)),
            "levels": ("levels", _parse_tuple,
                       lambda v: " ".join("%.17g" % d for d in v)),
            "trt_ray_limit": ("trt_ray_limit", int, "%d"),
            "reg_xray": ("reg_xray",
                         lambda s: None if s == "" else float(s),
                         lambda v: "" if v is None else "%.17g" % v),
            "reg_trt": ("reg_trt",
                        lambda s: None if s == "" else float(s),
                        lambda v: "" if v is None else "%.17g" % v),
        },
        "noise": {
            "seed": ("seed", int, "%d"),
            "level": ("noise_level", float, "%.17g"),
        },
    }

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config {path}")
        kw = {}
        for section in cp.sections():
            if section not in cls._SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            table = cls._SCHEMA[section]
            for key, raw in cp[section].items():
                if key not in table:
                    raise ConfigError(
                        f"unknown key '{key}' in section [{section}]"
                    )
                attr, parse, _ = table[key]
                try:
                    kw[attr] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for {section}.{key}: {raw!r}"
                    ) from exc
        return cls(**kw)

    def to_file(self, path) -> None:
        cp = configparser.ConfigParser()
        for section, table in self._SCHEMA.items():
            cp[section] = {}
            for key, (attr, _, fmt) in table.items():
                v = getattr(self, attr)
                cp[section][key] = fmt % v if isinstance(fmt, str) else fmt(v)
        with open(path, "w") as fh:
            cp.write(fh)


# ----------------------------------------------------------------------
# Phantoms.


def _bump_window(amp: float) -> RadialField:
    """amp*(1-r^2)^3 inside the unit ball, identically zero outside.

    The cubic power makes value and first two radial derivatives vanish
    at r = 1, so boundary jets of the carrying medium are untouched.
    """

    def f(r):
        r = np.asarray(r, dtype=float)
        w = np.maximum(1.0 - r * r, 0.0)
        return amp * w**3

    def df(r):
        r = np.asarray(r, dtype=float)
        w = np.maximum(1.0 - r * r, 0.0)
        return -6.0 * amp * r * w**2

    def d2f(r):
        r = np.asarray(r, dtype=float)
        w = np.maximum(1.0 - r * r, 0.0)
        return -6.0 * amp * w * (w - 4.0 * r * r)

    return RadialField(f, df, d2f)


def make_phantom(name: str, eps_ref: float = 1.0, radius: float = 1.0
                 ) -> MediumSpec:
    """Named ground-truth media used by the synthetic generator.

    vacuum: eps = mu = 1, sigma = 0.
    lossy_vacuum: vacuum with sigma = 0.5.
    lens: Gaussian speed lens (mu = 1).
    radial: radial speed 1 + 0.2(1 - r^2) (satisfies the turning-point
        monotonicity condition), mu = 1.
    flagship: offset speed lens, Gaussian conductivity, and a
        permittivity bump eps_ref e^(2u) with u vanishing to first order
        on the boundary sphere; mu completes the speed identity.
    """
    lo = -1.05 * radius
    box = Box((lo, lo, lo), (-lo, -lo, -lo))
    name = name.strip().lower()
    if name == "vacuum":
        return MediumSpec.vacuum(box)
    if name == "lossy_vacuum":
        return MediumSpec(
            ConstantField(1.0), ConstantField(1.0), ConstantField(0.5), box
        )
    if name == "lens":
        c = GaussianBumpField(1.0, [0.10], [(0.25, -0.15, 0.10)], [0.35])
        return MediumSpec.from_speed(c, box=box)
    if name == "radial":
        c = RadialField(
            lambda r: 1.0 + 0.2 * (1.0 - np.asarray(r) ** 2),
            lambda r: -0.4 * np.asarray(r, dtype=float),
            lambda r: np.full_like(np.asarray(r, dtype=float), -0.4),
        )
        return MediumSpec.from_speed(c, box=box)
    if name in ("flagship", "lens_lossy_bump"):
        c = GaussianBumpField(1.0, [0.10], [(0.25, -0.15, 0.10)], [0.35])
        u = _bump_window(0.12)
        eps = ExpScaledField(u, 2.0) * eps_ref
        mu = PowerField(ProductField(ProductField(c, c), eps), -1.0)
        sigma = GaussianBumpField(0.0, [0.4], [(-0.20, 0.25, -0.05)], [0.30])
        return MediumSpec(eps, mu, sigma, box)
    raise ConfigError(f"unknown phantom '{name}'")


# ----------------------------------------------------------------------
# Acquisition fan.


def _build_fan(cfg: RunConfig):
    """Deterministic boundary fan: Fibonacci sources x Fibonacci targets.

    Each source keeps its first rays_per_source chords whose inward
    cosine clears min_cos, so the fan needs no random numbers and is
    identical across runs by construction.
    """
    srcs = _fibonacci_directions(cfg.n_sources) * cfg.radius
    tgts = _fibonacci_directions(max(3 * cfg.rays_per_source, 64)) * cfg.radius
    entries, dirs = [], []
    for x0 in srcs:
        nu = x0 / np.linalg.norm(x0)
        d = tgts - x0
        nrm = np.linalg.norm(d, axis=1)
        ok = nrm > 1e-9
        d = d[ok] / nrm[ok][:, None]
        inward = -(d @ nu)
        sel = np.flatnonzero(inward >= cfg.min_cos)[: cfg.rays_per_source]
        for j in sel:
            entries.append(x0)
            dirs.append(d[j])
    return np.asarray(entries), np.asarray(dirs)


# ----------------------------------------------------------------------
# Dataset container and disk layout.


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return "%d" % v
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _write_csv(path, header, columns):
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(n):
            fh.write(",".join(_fmt(c[i]) for c in cols) + "\n")


def _read_csv(path, header):
    with open(path) as fh:
        first = fh.readline().strip()
        if first != header:
            raise FormatError(f"{path}: expected header {header!r}, got {first!r}")
        body = fh.read()
    if not body.strip():
        return np.zeros((0, len(header.split(","))))
    rows = np.array(
        [
            [float(v) for v in line.split(",")]
            for line in body.strip().splitlines()
        ]
    )
    if rows.shape[1] != len(header.split(",")):
        raise FormatError(f"{path}: wrong column count")
    return rows


@dataclasses.dataclass
class Dataset:
    """In-memory mirror of a dataset directory.

    Table dictionaries hold plain arrays; trt values are wide (one row
    per ray, one column per polarization) in memory and long
    (ray_id, pol, value) on disk.
    """

    meta: dict
    acquisition: AcquisitionSet
    symbols: dict
    lens: dict
    attenuation: dict
    trt: dict

    def n_rays(self) -> int:
        return len(self.acquisition)

    def validate(self) -> None:
        n = self.n_rays()
        for name in ("attenuation", "trt"):
            ids = np.asarray(getattr(self, name)["ray_id"], dtype=int)
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                raise InconsistentDataError(
                    f"{name} table references ray ids outside 0..{n - 1}"
                )
        if str(self.meta.get("format", "")) != FORMAT_VERSION:
            raise FormatError(
                f"dataset format {self.meta.get('format')!r} != "
                f"{FORMAT_VERSION!r}"
            )

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metadata.txt", "w") as fh:
            for k in sorted(self.meta):
                fh.write(f"{k}={_fmt(self.meta[k])}\n")
        acq = self.acquisition
        n = len(acq)
        seeds = (
            acq.frame_seeds
            if acq.frame_seeds is not None
            else np.zeros((n, 3))
        )
        _write_csv(
            out / "acquisition.csv",
            _ACQ_HEADER,
            [np.arange(n)]
            + [acq.entries[:, k] for k in range(3)]
            + [acq.directions[:, k] for k in range(3)]
            + [seeds[:, k] for k in range(3)],
        )
        L = self.lens
        _write_csv(
            out / "lens.csv",
            _LENS_HEADER,
            [L["x_in"][:, k] for k in range(3)]
            + [L["v_in"][:, k] for k in range(3)]
            + [L["x_out"][:, k] for k in range(3)]
            + [L["v_out"][:, k] for k in range(3)]
            + [L["tau"]],
        )
        S = self.symbols
        _write_csv(
            out / "boundary_symbols.csv",
            _SYMBOL_HEADER,
            [S["x"][:, k] for k in range(3)] + [S["rho"], S["S0"], S["S1"]],
        )
        _write_csv(
            out / "attenuation.csv",
            "ray_id,value",
            [self.attenuation["ray_id"], self.attenuation["value"]],
        )
        vals = np.asarray(self.trt["values"])
        ids = np.asarray(self.trt["ray_id"], dtype=int)
        n_pol = vals.shape[1]
        _write_csv(
            out / "trt.csv",
            "ray_id,pol,value",
            [
                np.repeat(ids, n_pol),
                np.tile(np.arange(n_pol), len(ids)),
                vals.reshape(-1),
            ],
        )

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        d = Path(data_dir)
        if not (d / "metadata.txt").exists():
            raise FormatError(f"{d}: missing metadata.txt")
        meta = {}
        with open(d / "metadata.txt") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                k, sep, v = line.partition("=")
                if not sep:
                    raise FormatError(f"metadata.txt: bad line {line!r}")
                meta[k] = _coerce_meta(v)
        if str(meta.get("format", "")) != FORMAT_VERSION:
            raise FormatError(
                f"dataset format {meta.get('format')!r} != {FORMAT_VERSION!r}"
            )

        acq_rows = _read_csv(d / "acquisition.csv", _ACQ_HEADER)
        ids = acq_rows[:, 0].astype(int)
        if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
            raise FormatError("acquisition.csv: ray ids must be 0..n-1 in order")
        acquisition = AcquisitionSet(
            entries=acq_rows[:, 1:4],
            directions=acq_rows[:, 4:7],
            frame_seeds=acq_rows[:, 7:10],
        )

        lens_rows = _read_csv(d / "lens.csv", _LENS_HEADER)
        if len(lens_rows) != len(ids):
            raise InconsistentDataError(
                "lens.csv row count does not match acquisition.csv"
            )
        lens = {
            "x_in": lens_rows[:, 0:3],
            "v_in": lens_rows[:, 3:6],
            "x_out": lens_rows[:, 6:9],
            "v_out": lens_rows[:, 9:12],
            "tau": lens_rows[:, 12],
        }

        sym_rows = _read_csv(d / "boundary_symbols.csv", _SYMBOL_HEADER)
        symbols = {
            "x": sym_rows[:, 0:3],
            "rho": sym_rows[:, 3],
            "S0": sym_rows[:, 4],
            "S1": sym_rows[:, 5],
        }

        att_rows = _read_csv(d / "attenuation.csv", "ray_id,value")
        attenuation = {
            "ray_id": att_rows[:, 0].astype(int),
            "value": att_rows[:, 1],
        }

        trt_rows = _read_csv(d / "trt.csv", "ray_id,pol,value")
        if len(trt_rows):
            rids = trt_rows[:, 0].astype(int)
            pols = trt_rows[:, 1].astype(int)
            uids = np.unique(rids)
            n_pol = int(pols.max()) + 1
            vals = np.full((len(uids), n_pol), np.nan)
            pos = np.searchsorted(uids, rids)
            vals[pos, pols] = trt_rows[:, 2]
            if np.isnan(vals).any():
                raise InconsistentDataError(
                    "trt.csv: missing polarization entries for some rays"
                )
            if uids.min() < 0 or (len(ids) and uids.max() >= len(ids)):
                raise InconsistentDataError("trt.csv references unknown rays")
            seeds = acquisition.frame_seeds[uids]
        else:
            uids = np.zeros(0, dtype=int)
            vals = np.zeros((0, 3))
            seeds = np.zeros((0, 3))
        trt = {"ray_id": uids, "values": vals, "seed": seeds}

        ds = cls(meta, acquisition, symbols, lens, attenuation, trt)
        ds.validate()
        return ds


def _coerce_meta(v: str):
    s = v.strip()
    if s in ("true", "false"):
        return s == "true"
    try:
        iv = int(s)
        return iv
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


# ----------------------------------------------------------------------
# Synthetic generation.


def _chebyshev_rho(eps: float, mu: float, n: int) -> np.ndarray:
    """Chebyshev nodes for rho^2 in (0.1, 0.9) * eps*mu, mapped to rho."""
    k = np.arange(n)
    t = np.cos((2 * k + 1) * np.pi / (2 * n))
    lo, hi = 0.1 * eps * mu, 0.9 * eps * mu
    rho2 = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t
    return np.sqrt(np.sort(rho2))


def _symbol_tables(m: MediumSpec, cfg: RunConfig):
    """Closed-form S0/S1 samples at Fibonacci boundary points."""
    pts = _fibonacci_directions(cfg.n_boundary_points) * cfg.radius
    xs, rhos, s0s, s1s = [], [], [], []
    for x in pts:
        nu = x / np.linalg.norm(x)
        ev = m.evaluate(x[None, :])
        eps = float(ev.eps[0])
        mu = float(ev.mu[0])
        sig = float(ev.sigma[0])
        dn_eps = float(ev.grad_eps[0] @ nu)
        dn_mu = float(ev.grad_mu[0] @ nu)
        for rho in _chebyshev_rho(eps, mu, cfg.n_rho):
            s0 = boundary_symbol_S0(eps, mu, rho)
            s1 = boundary_symbol_S1(eps, mu, sig, dn_eps, dn_mu, rho)
            xs.append(x)
            rhos.append(rho)
            s0s.append(s0)
            s1s.append(s1)
    return {
        "x": np.asarray(xs),
        "rho": np.asarray(rhos),
        "S0": np.asarray(s0s),
        "S1": np.asarray(s1s),
    }


def gen_synthetic(m: MediumSpec, cfg: RunConfig) -> Dataset:
    """Trace a boundary fan through a known medium and tabulate its data.

    Produces the four observation tables the inversion chain consumes:
    travel times and exit states (lens), path-integrated loss
    (attenuation), polarization-averaged tensor integrals (trt), and
    closed-form boundary symbol samples.  Raises AcquisitionError when
    more than a tenth of the fan fails to exit cleanly.
    """
    domain = BallDomain(cfg.radius)
    fol = ball_foliation(cfg.radius)
    for level in cfg.levels:
        if level <= 0.0 or level >= 1.0:
            continue
        rep = check_foliation_convexity(m, fol, level, domain=domain)
        if rep.min_eig < 0:
            warnings.warn(
                f"foliation level {level:g} not convex "
                f"(min eig {rep.min_eig:.3e} at {rep.argmin_point})",
                RuntimeWarning,
            )

    x0, d0 = _build_fan(cfg)
    c0 = m.speed(x0)
    t1, _ = tangent_frame(d0)
    eta0 = c0[:, None] * t1
    icfg = IntegratorConfig(
        method="rk4",
        h=cfg.trace_h,
        store_every=cfg.store_every,
        max_length=cfg.max_length,
    )
    rays = trace_fan(m, domain, x0, d0, cfg=icfg, eta0=eta0)

    good = [i for i, r in enumerate(rays) if r.status == "exited"]
    dropped = len(rays) - len(good)
    if dropped > 0.10 * len(rays):
        raise AcquisitionError(
            f"{dropped}/{len(rays)} rays failed to exit the domain"
        )
    rays = [rays[i] for i in good]
    x0, d0, eta0 = x0[good], d0[good], eta0[good]

    acquisition = AcquisitionSet(
        entries=x0, directions=d0, frame_seeds=eta0
    )
    lens = {
        "x_in": np.array([r.entry_point for r in rays]),
        "v_in": np.array([r.entry_dir for r in rays]),
        "x_out": np.array([r.exit_point for r in rays]),
        "v_out": np.array([r.exit_dir for r in rays]),
        "tau": np.array([r.tau for r in rays]),
    }

    att = np.array(
        [-2.0 * np.log(attenuation_I(m, r)[-1]) for r in rays]
    )
    attenuation = {"ray_id": np.arange(len(rays)), "value": att}

    frames = [FrameTransport(r.s, r.eta, r.zeta) for r in rays]
    u = log_sqrt_eps_field(m)
    trt_vals = 0.5 * trt_forward(
        lambda x: tensor_A_of_u(m, u, x), m, rays, frames, ds=0.01
    )
    trt = {
        "ray_id": np.arange(len(rays)),
        "values": trt_vals,
        "seed": eta0,
    }

    symbols = _symbol_tables(m, cfg)

    if cfg.noise_level > 0:
        rng = np.random.default_rng(cfg.seed)
        lv = cfg.noise_level
        lens["tau"] = lens["tau"] * (1.0 + lv * rng.standard_normal(len(rays)))
        attenuation["value"] = attenuation["value"] * (
            1.0 + lv * rng.standard_normal(len(rays))
        )
        for key in ("S0", "S1"):
            tab = symbols[key]
            rms = float(np.sqrt(np.mean(tab**2)))
            symbols[key] = tab + lv * rms * rng.standard_normal(tab.shape)
        rms = float(np.sqrt(np.mean(trt_vals**2)))
        trt["values"] = trt_vals + lv * rms * rng.standard_normal(
            trt_vals.shape
        )

    meta = {
        "format": FORMAT_VERSION,
        "phantom": cfg.phantom,
        "eps_ref": cfg.eps_ref,
        "radius": cfg.radius,
        "radial": cfg.radial,
        "seed": cfg.seed,
        "noise_level": cfg.noise_level,
        "T": cfg.max_length,
        "levels": " ".join("%.17g" % v for v in cfg.levels),
        "n_rays": len(rays),
        "dropped": dropped,
    }
    return Dataset(meta, acquisition, symbols, lens, attenuation, trt)
