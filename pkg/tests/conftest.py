"""Shared fixtures: a couple of smooth media and a traced ray fan.

Everything here is deterministic; tests that need randomness draw from
their own seeded generators so failures reproduce.
"""

import numpy as np
import pytest

from mxtomo import (
    BallDomain,
    Box,
    ConstantField,
    GaussianBumpField,
    IntegratorConfig,
    MediumSpec,
    tangent_frame,
    trace_fan,
)

BOX = Box((-1.05, -1.05, -1.05), (1.05, 1.05, 1.05))


@pytest.fixture(scope="session")
def vacuum():
    return MediumSpec.from_speed(ConstantField(1.0), box=BOX)


@pytest.fixture(scope="session")
def lens_speed():
    return GaussianBumpField(
        1.0, [0.10], [(0.25, -0.15, 0.10)], [0.35]
    )


@pytest.fixture(scope="session")
def lens_medium(lens_speed):
    return MediumSpec.from_speed(lens_speed, box=BOX)


@pytest.fixture(scope="session")
def smooth_medium():
    """Full (eps, mu, sigma) medium with independent bumps, no symmetry."""
    eps = GaussianBumpField(
        1.3, [0.25, -0.15], [(0.2, 0.1, -0.3), (-0.4, 0.2, 0.3)], [0.45, 0.5]
    )
    mu = GaussianBumpField(
        0.9, [0.12], [(-0.1, -0.3, 0.2)], [0.55]
    )
    sigma = GaussianBumpField(
        0.0, [0.35], [(0.1, -0.2, 0.15)], [0.4]
    )
    return MediumSpec(epsilon=eps, mu=mu, sigma=sigma, box=BOX)


@pytest.fixture(scope="session")
def ball():
    return BallDomain(1.0)


def fibonacci_fan(n_src, per_src, min_cos=0.35):
    """Boundary points and inward directions, deterministic."""
    from mxtomo.dataset import _build_fan, RunConfig

    return _build_fan(
        RunConfig(n_sources=n_src, rays_per_source=per_src, min_cos=min_cos)
    )


@pytest.fixture(scope="session")
def lens_rays(lens_medium, ball):
    x0, d0 = fibonacci_fan(24, 8)
    c0 = lens_medium.speed(x0)
    t1, _ = tangent_frame(d0)
    cfg = IntegratorConfig(method="rk4", h=0.01, store_every=2)
    rays = trace_fan(
        lens_medium, ball, x0, d0, cfg=cfg, eta0=c0[:, None] * t1
    )
    assert all(r.status == "exited" for r in rays)
    return rays
