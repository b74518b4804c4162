import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_divergence, fd_gradient, mixture_log_density
from scheddev.flows import (
    AnalyticIMCF,
    CallableFlow,
    DivergenceUnavailable,
    EmpiricalIMCF,
    GaussianMixtureModel,
    MixtureFlow,
    Provenance,
    SampleSet,
    empirical_epsilon_imcf,
    imcf_flow,
    mixture_divergence,
    mixture_score,
)
from scheddev.schedules import LogLinearVE

SCH = LogLinearVE(5e-4, 5.0)
THREE = GaussianMixtureModel([0.2, 0.5, 0.3], [[-1.0], [0.4], [2.0]], [0.05, 0.2, 0.1])
TWO_D = GaussianMixtureModel([0.3, 0.7], [[0.0, 1.0], [1.5, -0.5]], [0.1, 0.4])


def s_with_sigma(sch, sigma):
    return np.log(sigma / sch.sigma_min) / sch.log_ratio


# --- mixture container ---------------------------------------------------


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        GaussianMixtureModel([0.5, 0.5 + 1e-10], [[0.0], [1.0]], [1.0, 1.0])
    GaussianMixtureModel([0.5, 0.5 + 1e-13], [[0.0], [1.0]], [1.0, 1.0])


def test_variances_must_be_positive():
    with pytest.raises(ValueError):
        GaussianMixtureModel([1.0], [[0.0]], [0.0])


def test_config_round_trip():
    back = GaussianMixtureModel.from_config(TWO_D.to_config())
    np.testing.assert_array_equal(back.means, TWO_D.means)
    np.testing.assert_array_equal(back.weights, TWO_D.weights)
    np.testing.assert_array_equal(back.variances, TWO_D.variances)


def test_sample_set_invariants():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((0, 1)))
    ss = SampleSet([1.0, 2.0, 3.0], condition=0.5, provenance=Provenance.DatasetDraw)
    assert len(ss) == 3 and ss.dim == 1


# --- mixture_score -------------------------------------------------------


def test_single_component_score_value():
    gmm = GaussianMixtureModel.single(-1.0, 0.01)
    s = s_with_sigma(SCH, 0.3)
    assert mixture_score(0.0, s, gmm, SCH)[0, 0] == pytest.approx(-10.0, rel=1e-12)


def test_symmetric_midpoint_score_is_zero():
    gmm = GaussianMixtureModel([0.5, 0.5], [[0.0], [1.0]], [0.04, 0.04])
    for s in (0.1, 0.5, 0.9):
        assert abs(mixture_score(0.5, s, gmm, SCH)[0, 0]) < 1e-12


@pytest.mark.parametrize("gmm", [THREE, TWO_D])
def test_score_matches_fd_of_log_density(gmm):
    rng = np.random.default_rng(0)
    for s in (0.3, 0.6, 0.9):
        sig = SCH.sigma(s)
        for x in rng.normal(size=(10, gmm.dim)):
            f = lambda y: mixture_log_density(y, gmm.weights, gmm.means, gmm.variances, sig)  # noqa: E731
            fd = fd_gradient(f, x, h=1e-5)
            an = mixture_score(x[None, :], s, gmm, SCH)[0]
            assert np.linalg.norm(an - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_log_density_matches_direct_sum():
    x = np.array([[0.3, -0.2]])
    got = TWO_D.log_density(x, 1.0, 0.7)[0]
    want = mixture_log_density(x[0], TWO_D.weights, TWO_D.means, TWO_D.variances, 0.7)
    assert got == pytest.approx(want, rel=1e-13)


# --- imcf_flow -----------------------------------------------------------


def test_zero_score_point_gives_zero_velocity():
    gmm = GaussianMixtureModel([0.5, 0.5], [[-1.0], [1.0]], [0.1, 0.1])
    assert abs(imcf_flow(0.0, None, 0.5, gmm, SCH)[0, 0]) < 1e-14


def test_single_gaussian_velocity_closed_form_and_denoise_form():
    gmm = GaussianMixtureModel.single(0.0, 0.01)
    x = np.linspace(-2, 2, 9)[:, None]
    for s in (0.2, 0.5, 0.8):
        sig, sd = SCH.sigma(s), SCH.sigma_dot(s)
        v = imcf_flow(x, None, s, gmm, SCH)
        np.testing.assert_allclose(v, sd * sig * x / (0.01 + sig**2), rtol=1e-13)
        # denoising form: c2 * (x - E[X0 | x]) with E[X0 | x] = x sb^2 / (sb^2 + sigma^2)
        post = x * 0.01 / (0.01 + sig**2)
        np.testing.assert_allclose(v, (sd / sig) * (x - post), rtol=1e-12)
        assert np.all(np.sign(v[x[:, 0] != 0]) == np.sign(x[x[:, 0] != 0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_epsilon_velocity_round_trip(seed):
    rng = np.random.default_rng(seed)
    flow = MixtureFlow(THREE, SCH)
    x = rng.normal(size=(100, 1))
    s = float(rng.uniform(0.01, 0.99))
    v = flow.velocity(x, None, s)
    eps = flow.epsilon(x, None, s)
    np.testing.assert_allclose(v, SCH.sigma_dot(s) * eps, rtol=1e-13, atol=1e-300)


@pytest.mark.parametrize("normalized", [False, True])
def test_score_form_equals_denoising_form(normalized):
    sch = SCH.normalized() if normalized else SCH
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        s = float(rng.uniform(0.02, 0.98))
        x = rng.normal(scale=2.0, size=(1, 2))
        co = sch.coefficients(s)
        a, sig = sch.alpha(s), sch.sigma(s)
        score_form = co.gamma1 * TWO_D.score(x, a, sig) + co.gamma2 * x
        denoise_form = co.c1 * TWO_D.posterior_mean(x, a, sig) + co.c2 * x
        # relative to the size of the summands: c2 x and c1 E[X0|x] nearly cancel at small sigma
        scale = np.maximum(np.abs(co.c2 * x), np.abs(co.c1 * TWO_D.posterior_mean(x, a, sig)))
        worst = max(worst, np.max(np.abs(score_form - denoise_form) / scale))
        np.testing.assert_allclose(imcf_flow(x, None, s, TWO_D, sch), score_form, rtol=1e-14)
    assert worst <= 1e-10


# --- divergence ----------------------------------------------------------


def test_single_gaussian_divergence():
    gmm = GaussianMixtureModel.single(0.3, 0.01)
    x = np.linspace(-1, 1, 5)[:, None]
    for s in (0.1, 0.5):
        sig, sd = SCH.sigma(s), SCH.sigma_dot(s)
        np.testing.assert_allclose(mixture_divergence(x, None, s, gmm, SCH), sd * sig / (0.01 + sig**2), rtol=1e-12)


def test_isotropic_divergence_scales_with_dimension():
    d = 5
    gmm = GaussianMixtureModel.single(np.zeros(d), 0.2)
    x = np.random.default_rng(2).normal(size=(4, d))
    s = 0.6
    sig, sd = SCH.sigma(s), SCH.sigma_dot(s)
    np.testing.assert_allclose(mixture_divergence(x, None, s, gmm, SCH), d * sd * sig / (0.2 + sig**2), rtol=1e-12)


@pytest.mark.parametrize("gmm", [GaussianMixtureModel([0.5, 0.5], [[-1.0], [1.0]], [0.1, 0.1]), THREE, TWO_D])
def test_divergence_matches_fd_trace(gmm):
    rng = np.random.default_rng(3)
    pts = np.vstack([np.zeros((1, gmm.dim)), rng.normal(size=(20, gmm.dim))])
    for s in (0.4, 0.7, 0.95):
        f = lambda y: imcf_flow(y[None, :], None, s, gmm, SCH)[0]  # noqa: E731
        for x in pts:
            fd = fd_divergence(f, x, h=1e-5)
            an = mixture_divergence(x[None, :], None, s, gmm, SCH)[0]
            assert abs(an - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_divergence_unavailable_by_default():
    flow = CallableFlow(SCH, lambda x, z, s: x)
    assert not flow.has_divergence
    with pytest.raises(DivergenceUnavailable):
        flow.divergence(np.zeros((1, 1)), None, 0.5)


# --- empirical oracle ------------------------------------------------------


def test_single_sample_oracle_is_zero_at_that_point():
    ss = SampleSet([[0.7]])
    assert empirical_epsilon_imcf([[0.7]], 0.5, ss, SCH)[0, 0] == 0.0
    assert EmpiricalIMCF(ss, SCH).degenerate


def test_two_symmetric_samples_cancel():
    ss = SampleSet([[0.0], [1.0]])
    for s in (0.1, 0.5, 0.9):
        assert abs(empirical_epsilon_imcf([[0.5]], s, ss, SCH)[0, 0]) < 1e-15


def test_empirical_oracle_converges_to_analytic():
    rng = np.random.default_rng(4)
    mu, sb2 = 0.5, 0.04
    pts = mu + np.sqrt(sb2) * rng.standard_normal((2000, 1))
    ss = SampleSet(pts)
    for s in np.linspace(0.7, 0.95, 5):
        sig = SCH.sigma(s)
        assert sig >= np.sqrt(sb2)
        x = rng.normal(mu, np.sqrt(sb2 + sig**2), size=(50, 1))
        want = sig * (x - mu) / (sb2 + sig**2)
        got = empirical_epsilon_imcf(x, s, ss, SCH)
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 0.1


def test_empirical_oracle_rms_error_halves_with_four_times_samples():
    rng = np.random.default_rng(5)
    gmm = GaussianMixtureModel.single(0.0, 0.04)
    s = s_with_sigma(SCH, 0.3)
    x = rng.normal(0, np.sqrt(0.04 + 0.09), size=(200, 1))
    want = AnalyticIMCF(gmm, SCH).epsilon(x, s)
    sizes = [250, 1000, 4000, 16000]
    rms = []
    for n in sizes:
        errs = [np.sqrt(np.mean((EmpiricalIMCF(SampleSet(gmm.sample(n, rng)), SCH).epsilon(x, s) - want) ** 2))
                for _ in range(8)]
        rms.append(np.sqrt(np.mean(np.square(errs))))
    slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
    assert -0.5 * 1.3 <= slope <= -0.5 * 0.7


def test_empirical_oracle_stable_at_smallest_sigma():
    pts = np.array([[-500.0], [0.0], [500.0]])
    ss = SampleSet(pts)
    x = np.array([[-500.0], [-250.0], [0.1], [250.0], [499.0]])
    out = empirical_epsilon_imcf(x, 0.0, ss, SCH)
    div = EmpiricalIMCF(ss, SCH).epsilon_divergence(x, 0.0)
    assert np.all(np.isfinite(out)) and np.all(np.isfinite(div))


def test_empirical_divergence_matches_fd():
    rng = np.random.default_rng(6)
    ss = SampleSet(rng.normal(size=(300, 2)))
    orc = EmpiricalIMCF(ss, SCH)
    for s in (0.5, 0.8):
        for x in rng.normal(size=(5, 2)):
            fd = fd_divergence(lambda y: orc.epsilon(y[None, :], s)[0], x, h=1e-5)
            assert orc.epsilon_divergence(x[None, :], s)[0] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_analytic_oracle_matches_mixture_flow():
    orc = AnalyticIMCF(THREE, SCH)
    flow = MixtureFlow(THREE, SCH)
    x = np.linspace(-2, 3, 11)[:, None]
    np.testing.assert_array_equal(orc.epsilon(x, 0.4), flow.epsilon(x, None, 0.4))
    np.testing.assert_array_equal(orc.epsilon_divergence(x, 0.4), flow.epsilon_divergence(x, None, 0.4))


def test_mixture_flow_accepts_condition_dependent_mixture():
    flow = MixtureFlow(lambda z: GaussianMixtureModel.single(z, 0.01), SCH)
    a = flow.velocity([[0.0]], 1.0, 0.5)
    b = imcf_flow([[0.0]], None, 0.5, GaussianMixtureModel.single(1.0, 0.01), SCH)
    np.testing.assert_array_equal(a, b)


def test_flow_evaluation_is_deterministic():
    flow = MixtureFlow(TWO_D, SCH)
    x = np.random.default_rng(7).normal(size=(10, 2))
    np.testing.assert_array_equal(flow.velocity(x, None, 0.3), flow.velocity(x.copy(), None, 0.3))
