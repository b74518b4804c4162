import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_spline_table
from scheddev.flows import CallableFlow, GaussianMixtureModel, MixtureFlow, imcf_flow
from scheddev.interpolants import (
    DegenerateSupportError,
    GuidanceKernel,
    KernelGuidedFlow,
    SplineGuidedFlow,
    kernel_guided_flow,
    solve_spline_weights,
    spline_guided_flow,
    thomas_solve,
    variance_blend_beta,
    variance_blend_score,
)
from scheddev.schedules import LogLinearVE

SCH = LogLinearVE(5e-4, 5.0)


def const_flow(value):
    return CallableFlow(SCH, lambda x, z, s: np.full_like(np.asarray(x, float), value),
                        lambda x, z, s: np.zeros(np.shape(x)[0]))


def random_knots(rng, n):
    return np.sort(rng.uniform(-2, 3, size=n))


# --- spline weights ------------------------------------------------------


def test_two_knots_give_linear_weights():
    sw = solve_spline_weights([0.0, 1.0])
    z = np.linspace(-0.5, 1.5, 41)
    w = sw.evaluate(z)
    np.testing.assert_array_equal(w[0], 1 - z)
    np.testing.assert_array_equal(w[1], z)


def test_cardinality_on_three_knots():
    sw = solve_spline_weights([0.0, 0.5, 1.0])
    np.testing.assert_array_equal(sw.evaluate(np.array([0.0, 0.5, 1.0]))[1], [0.0, 1.0, 0.0])


def test_coefficients_match_dense_lu_on_fixed_knots():
    knots = [0.0, 0.3, 0.7, 1.0]
    sw = solve_spline_weights(knots)
    for i in range(4):
        np.testing.assert_allclose(sw.coef[i], dense_spline_table(knots, np.eye(4)[i]), atol=1e-10, rtol=0)


@pytest.mark.parametrize("n", [4, 5, 6, 7, 8])
def test_random_knots_match_oracle_and_invariants(n):
    rng = np.random.default_rng(n)
    knots = random_knots(rng, n)
    sw = solve_spline_weights(knots)
    for i in range(n):
        np.testing.assert_allclose(sw.coef[i], dense_spline_table(knots, np.eye(n)[i]), atol=1e-10, rtol=0)
    z = rng.uniform(knots[0] - 1, knots[-1] + 1, size=500)
    np.testing.assert_allclose(sw.evaluate(z).sum(axis=0), 1.0, atol=1e-10)
    # C2 at interior knots: evaluate each adjacent piece at the shared knot
    a, b, c, d = np.moveaxis(sw.coef, -1, 0)
    h = np.diff(knots)
    left = [a[:, :-1] + b[:, :-1] * h[:-1] + c[:, :-1] * h[:-1] ** 2 + d[:, :-1] * h[:-1] ** 3,
            b[:, :-1] + 2 * c[:, :-1] * h[:-1] + 3 * d[:, :-1] * h[:-1] ** 2,
            2 * c[:, :-1] + 6 * d[:, :-1] * h[:-1]]
    right = [a[:, 1:], b[:, 1:], 2 * c[:, 1:]]
    for lv, rv in zip(left, right):
        np.testing.assert_allclose(lv, rv, atol=1e-10)
    # natural ends
    np.testing.assert_allclose(sw.evaluate(knots[0], 2), 0.0, atol=1e-10)
    np.testing.assert_allclose(2 * c[:, -1] + 6 * d[:, -1] * h[-1], 0.0, atol=1e-10)
    # cardinality
    np.testing.assert_allclose(sw.evaluate(knots), np.eye(n), atol=1e-12)


def test_linear_extrapolation_is_slope_continuous():
    knots = [0.0, 0.4, 1.0, 1.5]
    sw = solve_spline_weights(knots)
    eps = 1e-7
    for edge in (knots[0], knots[-1]):
        inside = sw.evaluate(edge - eps if edge == knots[-1] else edge + eps, 1)
        outside = sw.evaluate(edge + eps if edge == knots[-1] else edge - eps, 1)
        np.testing.assert_allclose(inside, outside, atol=1e-5)
    np.testing.assert_allclose(sw.evaluate(-1.0, 2), 0.0)
    np.testing.assert_allclose(sw.evaluate(-1.0), np.eye(4)[0] - sw.left_slope, atol=1e-14)


def test_bad_knots_rejected():
    with pytest.raises(DegenerateSupportError):
        solve_spline_weights([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError):
        solve_spline_weights([0.0, 1.0, 0.5])
    with pytest.raises(ValueError):
        solve_spline_weights([0.0])


def test_thomas_solver_against_dense():
    rng = np.random.default_rng(9)
    n = 12
    diag = rng.uniform(4, 5, n)
    lower = np.concatenate([[0.0], rng.uniform(-1, 1, n - 1)])
    upper = np.concatenate([rng.uniform(-1, 1, n - 1), [0.0]])
    rhs = rng.normal(size=(n, 3))
    A = np.diag(diag) + np.diag(lower[1:], -1) + np.diag(upper[:-1], 1)
    np.testing.assert_allclose(thomas_solve(lower, diag, upper, rhs), np.linalg.solve(A, rhs), atol=1e-12)


def test_spline_table_csv(tmp_path):
    sw = solve_spline_weights([0.0, 0.5, 1.0])
    p = tmp_path / "w.csv"
    sw.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0].startswith("basis,interval")
    assert len(rows) == 1 + 3 * 2


# --- guided flows --------------------------------------------------------


def test_guided_flow_at_knot_is_the_base_flow():
    gm = [GaussianMixtureModel.single(m, 0.05) for m in (-1.0, 0.0, 2.0)]
    flows = [MixtureFlow(g, SCH) for g in gm]
    x = np.linspace(-2, 2, 7)[:, None]
    for j, zj in enumerate([0.0, 0.5, 1.0]):
        got = spline_guided_flow(x, zj, 0.4, flows, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(got, flows[j].velocity(x, zj, 0.4))


def test_two_knot_midpoint_is_the_average():
    u, w = const_flow(2.0), const_flow(-5.0)
    got = spline_guided_flow(np.zeros((3, 1)), 0.5, 0.3, [u, w], [0.0, 1.0])
    np.testing.assert_allclose(got, (u.velocity(np.zeros((3, 1)), 0, 0.3) + w.velocity(np.zeros((3, 1)), 1, 0.3)) / 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0))
def test_constant_base_flows_give_constant_output(z):
    flows = [const_flow(3.0)] * 5
    got = SplineGuidedFlow([0.0, 0.2, 0.5, 0.6, 1.0], flows).epsilon(np.zeros((2, 1)), z, 0.5)
    np.testing.assert_allclose(got, 3.0, atol=1e-10)


def test_guidance_is_linear_in_base_flows():
    rng = np.random.default_rng(10)
    f = [MixtureFlow(GaussianMixtureModel.single(m, 0.1), SCH) for m in (-1.0, 1.0, 2.0)]
    g = [MixtureFlow(GaussianMixtureModel([0.5, 0.5], [[m], [m + 1]], [0.2, 0.1]), SCH) for m in (0.0, -2.0, 1.0)]
    a, b = 1.7, -0.6
    combo = [CallableFlow(SCH, (lambda fi, gi: lambda x, z, s: a * fi.epsilon(x, z, s) + b * gi.epsilon(x, z, s))(fi, gi))
             for fi, gi in zip(f, g)]
    knots = [0.0, 0.4, 1.0]
    x = rng.normal(size=(20, 1))
    for z in (0.1, 0.7, 1.3):
        lhs = SplineGuidedFlow(knots, combo).epsilon(x, z, 0.5)
        rhs = a * SplineGuidedFlow(knots, f).epsilon(x, z, 0.5) + b * SplineGuidedFlow(knots, g).epsilon(x, z, 0.5)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-13)


def test_dimension_mismatch_rejected():
    f1 = MixtureFlow(GaussianMixtureModel.single([0.0], 0.1), SCH)
    f2 = CallableFlow(SCH, lambda x, z, s: np.zeros((np.shape(x)[0], 2)))
    with pytest.raises(ValueError):
        SplineGuidedFlow([0.0, 1.0], [f1, f2]).epsilon(np.zeros((3, 1)), 0.5, 0.5)


def test_divergence_delegates_linearly():
    f = [MixtureFlow(GaussianMixtureModel.single(m, 0.1), SCH) for m in (-1.0, 1.0)]
    g = SplineGuidedFlow([0.0, 1.0], f)
    x = np.linspace(-1, 1, 5)[:, None]
    np.testing.assert_allclose(g.divergence(x, 0.25, 0.5),
                               0.75 * f[0].divergence(x, 0, 0.5) + 0.25 * f[1].divergence(x, 1, 0.5))


# --- kernel --------------------------------------------------------------


def test_kernel_properties():
    k = GuidanceKernel()
    u = np.linspace(-30, 30, 601)
    assert np.all(k(u) > 0)
    np.testing.assert_array_equal(k(u), k(-u))
    ratio = k(10.0) / k(20.0)
    assert abs(ratio / 8.0 - 1.0) < 0.2


def test_kernel_weights():
    k = GuidanceKernel()
    np.testing.assert_allclose(k.weights(0.5), [0.5, 0.5])
    g0, g1 = 1.5, 1.5 * 17 ** -1.5
    assert k.weights(0.0)[0] == pytest.approx(g0 / (g0 + g1), rel=1e-15)
    assert k.weights(0.0)[0] == pytest.approx(0.9859, abs=5e-5)
    z = np.random.default_rng(11).uniform(-2, 3, 1000)
    np.testing.assert_allclose(k.weights(z).sum(axis=0), 1.0, atol=1e-15)


def test_kernel_guided_flow_combination():
    f0, f1 = const_flow(1.0), const_flow(3.0)
    w0, w1 = GuidanceKernel().weights(0.2)
    got = kernel_guided_flow(np.zeros((2, 1)), 0.2, 0.5, f0, f1)
    np.testing.assert_allclose(got, SCH.sigma_dot(0.5) * (w0 * 1.0 + w1 * 3.0))
    assert isinstance(KernelGuidedFlow(f0, f1), KernelGuidedFlow)


def test_kernel_constants_must_be_positive():
    with pytest.raises(ValueError):
        GuidanceKernel(c1=0.0)


# --- score-combination consequences --------------------------------------


def test_equal_variance_guidance_is_the_interpolated_mean_flow():
    rng = np.random.default_rng(12)
    mu0, mu1, sb2 = -1.0, 1.0, 0.01
    g = SplineGuidedFlow([0.0, 1.0], [MixtureFlow(GaussianMixtureModel.single(mu0, sb2), SCH),
                                      MixtureFlow(GaussianMixtureModel.single(mu1, sb2), SCH)])
    worst = 0.0
    for _ in range(1000):
        z, s = rng.uniform(0, 1), rng.uniform(0.01, 0.99)
        x = rng.normal(scale=2.0, size=(1, 1))
        want = imcf_flow(x, None, s, GaussianMixtureModel.single((1 - z) * mu0 + z * mu1, sb2), SCH)
        worst = max(worst, float(np.max(np.abs(g.velocity(x, z, s) - want))))
    assert worst <= 1e-10


@pytest.mark.parametrize("z", [0.2, 0.5, 0.8])
def test_variance_guidance_matches_beta_closed_form(z):
    sb, k = 0.5, 2.0
    g = SplineGuidedFlow([0.0, 1.0], [MixtureFlow(GaussianMixtureModel.single(0.0, sb**2), SCH),
                                      MixtureFlow(GaussianMixtureModel.single(0.0, (k * sb) ** 2), SCH)])
    x = np.linspace(-3, 3, 25)[:, None]
    for s in np.linspace(0.02, 0.98, 25):
        score = -g.epsilon(x, z, s) / SCH.sigma(s)
        np.testing.assert_allclose(score, variance_blend_score(x, s, 1 - z, sb, k, SCH), rtol=1e-8, atol=1e-12)


def test_beta_limits():
    # beta -> 1 as sigma dominates; c = 1 keeps only the narrow Gaussian
    assert variance_blend_beta(1.0, 0.5, 1e-3, 2.0, SCH) == pytest.approx(1.0, abs=1e-6)
    x = np.array([[0.7]])
    np.testing.assert_allclose(variance_blend_score(x, 0.4, 1.0, 0.3, 2.0, SCH),
                               -x / (0.09 + SCH.sigma(0.4) ** 2), rtol=1e-14)
