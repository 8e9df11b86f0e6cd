import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disback.diffusion import (NoiseSchedule, ScoreNetwork, dsm_loss_and_grads, dsm_loss_from_scores,
                               dsm_step, dsm_target, new_score_network, perturb, score_to_eps, score_to_x0,
                               sigma_at, train_score_network)
from disback.nncore import AdamState, MlpSpec, NonFiniteError, ShapeError, finite_diff_grad
from disback.scorefield import MixtureSpec, analytic_mixture_score, grid_points

from conftest import rel_err


def test_sigma_endpoints_and_midpoint(schedule):
    assert sigma_at(schedule, 0.0) == pytest.approx(0.01, rel=1e-15)
    assert sigma_at(schedule, 1.0) == pytest.approx(10.0, rel=1e-15)
    assert sigma_at(schedule, 0.5) == pytest.approx(np.sqrt(0.01 * 10.0), rel=1e-14)
    assert sigma_at(schedule, 0.5) == pytest.approx(0.31623, abs=1e-5)


def test_sigma_domain(schedule):
    for t in (-1e-9, 1.0 + 1e-9, np.nan):
        with pytest.raises(ValueError):
            sigma_at(schedule, t)


def test_sigma_monotone(schedule):
    s = schedule.sigma(np.linspace(0, 1, 1000))
    assert np.all(np.diff(s) > 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        NoiseSchedule(t_min=1.0)


def test_sample_t_range(schedule):
    t = schedule.sample_t(np.random.default_rng(0), 10_000)
    assert t.min() >= schedule.t_min and t.max() <= 1.0


def test_perturb_examples():
    x0 = np.array([[3.0, -2.0]])
    assert np.array_equal(perturb(x0, 0.01, np.zeros((1, 2))), x0)
    np.testing.assert_array_equal(perturb(np.zeros((1, 2)), 1.0, np.array([[1.0, -1.0]])), [[1.0, -1.0]])
    np.testing.assert_array_equal(perturb(np.ones((1, 2)), 2.0, np.array([[0.5, 0.0]])), [[2.0, 1.0]])
    with pytest.raises(ShapeError):
        perturb(np.zeros((2, 2)), 1.0, np.zeros((3, 2)))


def test_dsm_loss_examples():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(8, 2))
    sig = np.exp(rng.normal(size=8))
    xt = perturb(x0, sig, rng.normal(size=(8, 2)))
    assert dsm_loss_from_scores(dsm_target(x0, xt, sig), x0, xt, sig) == 0.0
    loss = dsm_loss_from_scores(np.zeros((1, 2)), np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0, weight=1.0)
    assert loss == 1.0
    np.testing.assert_array_equal(dsm_target(np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0), [[-1.0, 0.0]])


@pytest.mark.parametrize("widths", [(3, 2), (3, 12, 2), (3, 10, 10, 2), (3, 8, 8, 8, 2)])
@pytest.mark.parametrize("scaling", ["inv_sigma", "none"])
def test_dsm_grads_match_finite_differences(widths, scaling, schedule):
    rng = np.random.default_rng(len(widths))
    net = new_score_network(MlpSpec(widths), schedule, rng)
    net = ScoreNetwork(net.params.with_flat(net.params.flat() + 0.05 * rng.normal(size=net.params.size)),
                       schedule, output_scaling=scaling)
    x0 = rng.normal(size=(6, 2))
    t = rng.uniform(0.1, 0.9, size=6)
    eps = rng.normal(size=(6, 2))
    loss, grads = dsm_loss_and_grads(net, x0, t, eps)
    analytic = np.concatenate([g.ravel() for g in grads])

    def f(v):
        return dsm_loss_and_grads(net.with_params(net.params.with_flat(v)), x0, t, eps)[0]

    assert rel_err(analytic, finite_diff_grad(f, net.params.flat())) <= 1e-4
    # the reported loss is the closed-form one
    sig = schedule.sigma(t)
    xt = perturb(x0, sig, eps)
    assert loss == pytest.approx(dsm_loss_from_scores(net.score(xt, t), x0, xt, sig), rel=1e-13)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_dsm_non_finite_reports_index(schedule):
    net = new_score_network(MlpSpec((3, 4, 2)), schedule, 0)
    x0 = np.zeros((4, 2))
    x0[2, 0] = np.inf
    with pytest.raises(NonFiniteError, match="index 2"):
        dsm_loss_and_grads(net, x0, np.full(4, 0.5), np.zeros((4, 2)))


def test_train_steps_contract(schedule):
    spec = MlpSpec((3, 8, 2))
    mix = MixtureSpec.from_components([((0.0, 0.0), 1.0, 1.0)])
    with pytest.raises(ValueError):
        train_score_network(mix.sample, spec, schedule, 0, 1e-3, 0)
    one = train_score_network(mix.sample, spec, schedule, 1, 1e-3, 5, batch_size=16)
    # replay the same draws by hand
    rng = np.random.default_rng(5)
    init = new_score_network(spec, schedule, rng)
    x0 = mix.sample(rng, 16)
    manual, _, _ = dsm_step(init, AdamState.zeros_like(init.params), x0, rng, 1e-3)
    assert one.params.equals(manual.params)
    assert not one.params.equals(init.params)
    again = train_score_network(mix.sample, spec, schedule, 1, 1e-3, 5, batch_size=16)
    assert again.params.equals(one.params)


def test_train_ema(schedule):
    spec = MlpSpec((3, 8, 2))
    mix = MixtureSpec.from_components([((0.0, 0.0), 1.0, 1.0)])
    last = train_score_network(mix.sample, spec, schedule, 3, 1e-2, 5, batch_size=16)
    assert train_score_network(mix.sample, spec, schedule, 3, 1e-2, 5, batch_size=16,
                               ema_decay=0.0).params.equals(last.params)
    # replay: the average starts at the init and mixes in each iterate
    rng = np.random.default_rng(5)
    net = new_score_network(spec, schedule, rng)
    adam = AdamState.zeros_like(net.params)
    avg = net.params.flat()
    for _ in range(3):
        net, adam, _ = dsm_step(net, adam, mix.sample(rng, 16), rng, 1e-2)
        avg = 0.9 * avg + 0.1 * net.params.flat()
    got = train_score_network(mix.sample, spec, schedule, 3, 1e-2, 5, batch_size=16, ema_decay=0.9)
    np.testing.assert_allclose(got.params.flat(), avg, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        train_score_network(mix.sample, spec, schedule, 3, 1e-2, 5, ema_decay=1.0)


def test_train_single_gaussian_matches_analytic(schedule):
    mu, s0 = np.array([0.5, -0.25]), 1.0
    mix = MixtureSpec.from_components([(mu, s0 ** 2, 1.0)])
    net = train_score_network(mix.sample, MlpSpec((3, 64, 64, 2)), schedule, 20_000, 1e-3, 0)
    x = grid_points(-3, 3, 21)
    sigma = schedule.sigma(0.5)
    got = net.score(x, 0.5)
    want = (mu - x) / (s0 ** 2 + sigma ** 2)
    rel = np.linalg.norm(got - want, axis=1) / np.linalg.norm(want, axis=1)
    assert np.median(rel) <= 0.10
    np.testing.assert_allclose(analytic_mixture_score(mix, x, sigma), want, rtol=1e-12)


def test_conversions():
    assert np.all(score_to_eps(np.zeros(2), 3.0) == 0)
    np.testing.assert_array_equal(score_to_eps([1.0, -1.0], 2.0), [-2.0, 2.0])
    np.testing.assert_array_equal(score_to_x0([-1.0, 0.0], [2.0, 2.0], 1.0), [1.0, 2.0])
    xt = np.array([0.3, -4.0])
    np.testing.assert_array_equal(score_to_x0(np.zeros(2), xt, 0.7), xt)
    x0, sig = np.array([1.5, 2.0]), 0.5
    np.testing.assert_allclose(score_to_x0((x0 - xt) / sig ** 2, xt, sig), x0, rtol=1e-15)


@settings(max_examples=100)
@given(s=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       xt=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       sigma=st.floats(1e-2, 10.0))
def test_conversion_consistency(s, xt, sigma):
    s, xt = np.array(s), np.array(xt)
    lhs = score_to_eps(s, sigma)
    rhs = (xt - score_to_x0(s, xt, sigma)) / sigma
    scale = max(np.max(np.abs(lhs)), np.max(np.abs(xt)) / sigma, 1e-300)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


@pytest.mark.parametrize("sigma", [0.1, 1.0, 4.0])
def test_dsm_population_optimum(sigma):
    """Oracle score on a single Gaussian leaves exactly the residual-variance floor.

    For x0 ~ N(mu, s0^2 I) in d dims the sigma^2-weighted loss of the true
    noisy score has expectation d * s0^2 / (s0^2 + sigma^2).
    """
    rng = np.random.default_rng(42)
    n, d, s0 = 100_000, 2, 0.8
    mu = np.array([0.5, -1.0])
    x0 = mu + s0 * rng.standard_normal((n, d))
    xt = perturb(x0, sigma, rng.standard_normal((n, d)))
    oracle = (mu - xt) / (s0 ** 2 + sigma ** 2)
    per = sigma ** 2 * np.sum((oracle - dsm_target(x0, xt, sigma)) ** 2, axis=1)
    floor = d * s0 ** 2 / (s0 ** 2 + sigma ** 2)
    assert dsm_loss_from_scores(oracle, x0, xt, sigma) == pytest.approx(per.mean(), rel=1e-12)
    assert abs(per.mean() - floor) <= 2 * per.std() / np.sqrt(n)


def test_score_network_input_width(schedule):
    with pytest.raises(ShapeError):
        new_score_network(MlpSpec((2, 4, 2)), schedule, 0)
    net = new_score_network(MlpSpec((3, 4, 2)), schedule, 0)
    with pytest.raises(ShapeError):
        net.score(np.zeros((2, 3)), 0.5)
