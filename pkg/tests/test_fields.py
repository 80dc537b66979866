"""Field classes: derivative consistency, spline accuracy, container IO."""

import numpy as np
import pytest

from mxtomo import (
    CallableField,
    ConstantField,
    DomainError,
    ExpLinearField,
    ExpScaledField,
    FormatError,
    GaussianBumpField,
    GridField,
    ProjectedField,
    QuadraticField,
    RadialField,
    SplineField,
    sym6_quadratic_form,
    sym6_to_matrix,
    matrix_to_sym6,
)

RNG = np.random.default_rng(101)


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    return g


def fd_hessian(f, x, h=1e-5):
    H = np.zeros(x.shape[:-1] + (3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        H[..., k, :] = (f.gradient(x + e) - f.gradient(x - e)) / (2 * h)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


ANALYTIC_FIELDS = [
    ConstantField(2.5),
    ExpLinearField((0.3, -0.2, 0.5), 0.1),
    QuadraticField(
        ((1.0, 0.2, -0.1), (0.2, 0.8, 0.3), (-0.1, 0.3, 1.2)),
        (0.4, -0.1, 0.2),
        0.7,
    ),
    GaussianBumpField(1.0, [0.5, -0.3], [(0.2, 0.1, -0.3), (-0.1, 0.4, 0.2)], [0.5, 0.7]),
    RadialField(
        lambda r: 1.0 + 0.2 * (1 - r**2),
        lambda r: -0.4 * r,
        lambda r: -0.4 * np.ones_like(r),
    ),
]


@pytest.mark.parametrize("f", ANALYTIC_FIELDS, ids=lambda f: type(f).__name__)
def test_gradient_matches_finite_differences(f):
    x = RNG.uniform(-0.8, 0.8, size=(40, 3))
    assert np.allclose(f.gradient(x), fd_gradient(f, x), atol=1e-8)


@pytest.mark.parametrize("f", ANALYTIC_FIELDS, ids=lambda f: type(f).__name__)
def test_hessian_matches_finite_differences(f):
    x = RNG.uniform(-0.8, 0.8, size=(40, 3))
    assert np.allclose(f.hessian(x), fd_hessian(f, x), atol=1e-6)


def test_field_algebra_values_and_derivatives():
    a = GaussianBumpField(1.0, [0.4], [(0.1, 0.0, -0.2)], [0.6])
    b = ExpLinearField((0.2, -0.1, 0.3))
    x = RNG.uniform(-0.7, 0.7, size=(30, 3))

    combos = [
        (a + b, lambda x: a.value(x) + b.value(x)),
        (a + 2.0, lambda x: a.value(x) + 2.0),
        (3.0 * a, lambda x: 3.0 * a.value(x)),
        (a * b, lambda x: a.value(x) * b.value(x)),
        (a**-2.0, lambda x: a.value(x) ** -2.0),
        (ExpScaledField(a, 2.0), lambda x: np.exp(2.0 * a.value(x))),
    ]
    for f, direct in combos:
        assert np.allclose(f.value(x), direct(x), rtol=1e-14)
        assert np.allclose(f.gradient(x), fd_gradient(f, x), atol=1e-7)
        assert np.allclose(f.hessian(x), fd_hessian(f, x), atol=1e-5)


def test_value_and_gradient_default_agrees():
    f = GaussianBumpField(1.0, [0.4], [(0.1, 0.0, -0.2)], [0.6])
    x = RNG.uniform(-0.7, 0.7, size=(25, 3))
    v, g = f.value_and_gradient(x)
    assert np.array_equal(v, f.value(x))
    assert np.array_equal(g, f.gradient(x))


def test_projected_field_constant_along_normal():
    base = GaussianBumpField(0.5, [0.8], [(0.2, -0.1, 0.3)], [0.5])
    x0 = np.array([0.0, 0.0, -1.0])
    n = np.array([0.0, 0.0, -1.0])
    f = ProjectedField(base, x0, n)
    x = RNG.uniform(-0.5, 0.5, size=(20, 3))
    shifted = x + RNG.uniform(-0.3, 0.3, size=(20, 1)) * n
    assert np.allclose(f.value(x), f.value(shifted), rtol=1e-14)
    # values on the plane itself match the base field
    on_plane = x - ((x - x0) @ n)[:, None] * n
    assert np.allclose(f.value(on_plane), base.value(on_plane), rtol=1e-14)
    # normal derivative vanishes identically
    assert np.allclose(f.gradient(x) @ n, 0.0, atol=1e-15)
    assert np.allclose(f.gradient(x), fd_gradient(f, x), atol=1e-8)
    assert np.allclose(f.hessian(x), fd_hessian(f, x), atol=1e-6)


def test_callable_field_adapts_closures():
    f = CallableField(
        lambda x: np.sum(x**2, axis=-1),
        lambda x: 2.0 * x,
        lambda x: np.broadcast_to(2.0 * np.eye(3), x.shape[:-1] + (3, 3)),
    )
    x = RNG.uniform(-1, 1, size=(10, 3))
    assert np.allclose(f.value(x), np.sum(x**2, axis=-1))
    assert np.allclose(f.gradient(x), fd_gradient(f, x), atol=1e-8)


# ----------------------------------------------------------------------
# sym6 packing


def test_sym6_roundtrip_and_quadratic_form():
    M = RNG.normal(size=(17, 3, 3))
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    t6 = matrix_to_sym6(M)
    assert t6.shape == (17, 6)
    assert np.allclose(sym6_to_matrix(t6), M, rtol=1e-15)
    v = RNG.normal(size=(17, 3))
    direct = np.einsum("nij,ni,nj->n", M, v, v)
    assert np.allclose(sym6_quadratic_form(t6, v), direct, rtol=1e-13)


# ----------------------------------------------------------------------
# Grid container and spline interpolation


def make_grid(fn, n=12, ncomp=1):
    origin = np.full(3, -1.0)
    spacing = np.full(3, 2.0 / (n - 1))
    return GridField.from_function(fn, origin, spacing, (n, n, n), ncomp=ncomp)


def test_gridfield_save_load_roundtrip(tmp_path):
    g = make_grid(lambda x: np.sin(x @ np.array([1.0, 2.0, -1.0])))
    p = tmp_path / "f.mxt"
    g.save(p)
    h = GridField.load(p)
    assert np.array_equal(g.values, h.values)
    assert np.array_equal(g.origin, h.origin)
    assert np.array_equal(g.spacing, h.spacing)
    # header is a single ascii line with magic + version
    first = p.read_bytes().split(b"\n", 1)[0].decode()
    assert first.startswith("MXT-FIELD v1 12 12 12 1")
    # byte-identical re-save
    p2 = tmp_path / "g.mxt"
    h.save(p2)
    assert p.read_bytes() == p2.read_bytes()


def test_gridfield_load_rejects_corruption(tmp_path):
    g = make_grid(lambda x: x[:, 0])
    p = tmp_path / "f.mxt"
    g.save(p)
    raw = p.read_bytes()
    (tmp_path / "trunc.mxt").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        GridField.load(tmp_path / "trunc.mxt")
    (tmp_path / "magic.mxt").write_bytes(b"NOT-A-FIELD v1\n" + raw)
    with pytest.raises(FormatError):
        GridField.load(tmp_path / "magic.mxt")


def test_spline_reproduces_cubic_polynomials():
    def cubic(x):
        return (
            0.3 * x[:, 0] ** 3
            - x[:, 0] * x[:, 1] * x[:, 2]
            + 0.5 * x[:, 2] ** 2
            + x[:, 1]
            - 2.0
        )

    f = SplineField(make_grid(cubic, n=9))
    x = RNG.uniform(-0.99, 0.99, size=(200, 3))
    assert np.allclose(f.value(x), cubic(x), atol=1e-12)


def test_spline_interpolates_nodes_exactly():
    g = make_grid(lambda x: np.cos(2 * x[:, 0]) * np.exp(x[:, 1] - x[:, 2]))
    f = SplineField(g)
    nodes = g.node_points()
    assert np.allclose(f.value(nodes), g.values[..., 0].reshape(-1), atol=1e-13)


def test_spline_fourth_order_convergence():
    fn = lambda x: np.sin(2.0 * x[:, 0]) * np.cos(1.5 * x[:, 1]) * np.exp(0.5 * x[:, 2])
    x = RNG.uniform(-0.8, 0.8, size=(500, 3))
    errs = []
    for n in (9, 17, 33):
        f = SplineField(make_grid(fn, n=n))
        errs.append(np.max(np.abs(f.value(x) - fn(x))))
    order1 = np.log2(errs[0] / errs[1])
    order2 = np.log2(errs[1] / errs[2])
    assert order1 > 3.5 and order2 > 3.5


def test_spline_derivatives_match_finite_differences():
    fn = lambda x: np.sin(x[:, 0] + 0.5 * x[:, 1]) * np.cos(x[:, 2])
    f = SplineField(make_grid(fn, n=25))
    x = RNG.uniform(-0.8, 0.8, size=(50, 3))
    assert np.allclose(f.gradient(x), fd_gradient(f, x), atol=1e-7)
    assert np.allclose(f.hessian(x), fd_hessian(f, x), atol=1e-5)


def test_spline_value_and_gradient_fused_path():
    fn = lambda x: np.sin(x[:, 0]) + x[:, 1] ** 2 * x[:, 2]
    f = SplineField(make_grid(fn, n=15))
    x = RNG.uniform(-0.9, 0.9, size=(300, 3))
    v, g = f.value_and_gradient(x)
    assert np.allclose(v, f.value(x), rtol=1e-14, atol=1e-15)
    assert np.allclose(g, f.gradient(x), rtol=1e-13, atol=1e-14)


def test_spline_rejects_points_outside_box():
    f = SplineField(make_grid(lambda x: x[:, 0], n=8))
    with pytest.raises(DomainError):
        f.value(np.array([[0.0, 0.0, 1.5]]))


def test_spline_tensor_components_sampled_together():
    def six(x):
        cols = [x[:, 0], x[:, 1], x[:, 2], x[:, 0] * x[:, 1], 0 * x[:, 0], 1 + 0 * x[:, 0]]
        return np.stack(cols, axis=-1)

    f = SplineField(make_grid(six, n=9, ncomp=6))
    x = RNG.uniform(-0.9, 0.9, size=(40, 3))
    assert np.allclose(f.sample(x), six(x), atol=1e-12)
