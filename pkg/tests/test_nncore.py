import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disback.nncore import (AdamState, CacheError, MlpParams, MlpSpec, NonFiniteError, ShapeError,
                            adam_step, finite_diff_grad, init_scale, mlp_forward, mlp_init, mlp_vjp)

from conftest import rel_err


def hand_forward(params, x):
    """Straight-line tanh MLP, written without the library loop."""
    h = x
    n = len(params.weights)
    for i in range(n):
        z = np.einsum("ij,bj->bi", params.weights[i], h) + params.biases[i]
        h = z if i == n - 1 else np.tanh(z)
    return h


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((2, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((2, 2), "gelu")
    spec = MlpSpec([2, 8, 3])
    assert spec.layer_widths == (2, 8, 3)
    assert spec.shapes() == [((8, 2), (8,)), ((3, 8), (3,))]


def test_params_shape_check():
    spec = MlpSpec((2, 3))
    with pytest.raises(ShapeError):
        MlpParams(spec, [np.zeros((2, 3))], [np.zeros(3)])


def test_init_biases_zero_and_deterministic():
    spec = MlpSpec((2, 2))
    p = mlp_init(spec, 7)
    assert all(np.all(b == 0.0) for b in p.biases)
    assert p.equals(mlp_init(spec, 7))
    assert not p.equals(mlp_init(spec, 8))


def test_init_weight_std_matches_fan_in_scale():
    spec = MlpSpec((2, 64, 64, 2))
    draws = {i: [] for i in range(spec.n_layers)}
    seed = 1
    while sum(len(v) for v in draws.values()) < 3 * 10_000:
        p = mlp_init(spec, seed)
        for i, w in enumerate(p.weights):
            draws[i].extend(w.ravel())
        seed += 1
    for i, ((_, fan_in), _) in enumerate(spec.shapes()):
        want = init_scale(fan_in) / np.sqrt(3.0)
        got = np.std(draws[i])
        assert abs(got - want) <= 0.2 * want


def test_forward_zero_and_identity():
    spec = MlpSpec((3, 5, 2))
    zero = MlpParams.from_arrays(spec, [np.zeros(s) for pair in spec.shapes() for s in pair])
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.all(mlp_forward(zero, x)[0] == 0.0)
    ident = MlpParams(MlpSpec((3, 3)), [np.eye(3)], [np.zeros(3)])
    assert np.array_equal(mlp_forward(ident, x)[0], x)


def test_forward_matches_hand_rolled():
    p = mlp_init(MlpSpec((2, 8, 2)), 3)
    x = np.random.default_rng(1).normal(size=(10, 2))
    np.testing.assert_allclose(mlp_forward(p, x)[0], hand_forward(p, x), rtol=1e-13, atol=1e-15)


def test_forward_shape_error():
    p = mlp_init(MlpSpec((2, 4, 2)), 0)
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros(2))


def test_vjp_zero_upstream():
    p = mlp_init(MlpSpec((2, 6, 2)), 0)
    x = np.ones((5, 2))
    _, cache = mlp_forward(p, x)
    gx, grads = mlp_vjp(p, cache, np.zeros((5, 2)))
    assert np.all(gx == 0) and all(np.all(g == 0) for g in grads)


def test_vjp_linear_layer():
    rng = np.random.default_rng(2)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    p = MlpParams(MlpSpec((4, 3)), [w], [b])
    x, u = rng.normal(size=(1, 4)), rng.normal(size=(1, 3))
    _, cache = mlp_forward(p, x)
    gx, (gw, gb) = mlp_vjp(p, cache, u)
    np.testing.assert_allclose(gw, np.outer(u[0], x[0]), rtol=1e-14)
    np.testing.assert_allclose(gb, u[0], rtol=1e-14)
    np.testing.assert_allclose(gx[0], w.T @ u[0], rtol=1e-14)


def test_vjp_stale_cache():
    p = mlp_init(MlpSpec((2, 4, 2)), 0)
    _, cache = mlp_forward(p, np.ones((2, 2)))
    with pytest.raises(CacheError):
        mlp_vjp(p.copy(), cache, np.ones((2, 2)))
    with pytest.raises(ShapeError):
        mlp_vjp(p, cache, np.ones((3, 2)))


def _fd_check(spec, seed, batch=5):
    rng = np.random.default_rng(seed)
    p = mlp_init(spec, rng)
    # non-zero biases so every path is exercised
    p = p.with_flat(p.flat() + 0.1 * rng.normal(size=p.size))
    x = rng.normal(size=(batch, spec.in_width))
    u = rng.normal(size=(batch, spec.out_width))
    _, cache = mlp_forward(p, x)
    gx, grads = mlp_vjp(p, cache, u)
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = finite_diff_grad(lambda v: float(np.sum(u * mlp_forward(p.with_flat(v), x)[0])), p.flat())
    num_x = finite_diff_grad(lambda v: float(np.sum(u * mlp_forward(p, v)[0])), x)
    return analytic, numeric, gx, num_x, p


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_vjp_matches_finite_differences(activation):
    analytic, numeric, gx, num_x, p = _fd_check(MlpSpec((2, 16, 2), activation), 0)
    assert rel_err(analytic, numeric) <= 1e-4
    assert rel_err(gx, num_x) <= 1e-4
    # per array, not just globally
    pos = 0
    for a in p.arrays():
        assert rel_err(analytic[pos:pos + a.size], numeric[pos:pos + a.size]) <= 1e-4
        pos += a.size


@settings(max_examples=15, deadline=None)
@given(widths=st.lists(st.integers(1, 6), min_size=1, max_size=3), seed=st.integers(0, 2**31),
       activation=st.sampled_from(["tanh", "softplus"]))
def test_vjp_fd_property(widths, seed, activation):
    analytic, numeric, *_ = _fd_check(MlpSpec((3, *widths, 2), activation), seed, batch=3)
    assert rel_err(analytic, numeric) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(-100, 100, allow_nan=False))
def test_vjp_linear_in_upstream(seed, alpha):
    rng = np.random.default_rng(seed)
    p = mlp_init(MlpSpec((2, 7, 7, 2)), rng)
    x, u = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, cache = mlp_forward(p, x)
    g1 = np.concatenate([g.ravel() for g in mlp_vjp(p, cache, u)[1]])
    g2 = np.concatenate([g.ravel() for g in mlp_vjp(p, cache, alpha * u)[1]])
    assert np.max(np.abs(g2 - alpha * g1)) <= 1e-12 * max(np.max(np.abs(alpha * g1)), 1e-300)


def test_determinism_of_outputs_and_grads():
    spec = MlpSpec((2, 9, 2))
    x = np.random.default_rng(5).normal(size=(6, 2))
    outs = []
    for _ in range(2):
        p = mlp_init(spec, 11)
        y, cache = mlp_forward(p, x)
        outs.append((y.tobytes(), b"".join(g.tobytes() for g in mlp_vjp(p, cache, y)[1])))
    assert outs[0] == outs[1]


def test_adam_zero_grads_keeps_params():
    p = mlp_init(MlpSpec((2, 3, 2)), 0)
    st_ = AdamState.zeros_like(p)
    p2, st2 = adam_step(st_, p, [np.zeros_like(a) for a in p.arrays()], 0.1)
    assert p2.equals(p) and st2.step == 1 and st_.step == 0


def test_adam_first_step_is_signed_lr():
    spec = MlpSpec((1, 1))
    p = MlpParams(spec, [np.zeros((1, 1))], [np.zeros(1)])
    s = AdamState.zeros_like(p)
    p2, _ = adam_step(s, p, [np.ones((1, 1)), np.zeros(1)], 0.1)
    assert p2.weights[0][0, 0] == pytest.approx(-0.1 * 1 / (1 + 1e-8), rel=1e-12)


def test_adam_minimises_quadratic():
    spec = MlpSpec((1, 1))
    p = MlpParams(spec, [np.ones((1, 1))], [np.zeros(1)])
    s = AdamState.zeros_like(p)
    for k in range(100):
        p, s = adam_step(s, p, [2 * p.weights[0], np.zeros(1)], 0.05)
        assert s.step == k + 1
    assert abs(p.weights[0][0, 0]) < 0.1


def test_adam_rejects_non_finite():
    p = mlp_init(MlpSpec((2, 2)), 0)
    g = [np.zeros_like(a) for a in p.arrays()]
    g[0][0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.zeros_like(p), p, g, 0.1)


def test_finite_diff_trivial():
    v = np.random.default_rng(0).normal(size=7)
    assert np.all(np.abs(finite_diff_grad(lambda p: 3.0, v)) <= 1e-10)
    np.testing.assert_allclose(finite_diff_grad(lambda p: float(p.sum()), v), 1.0, atol=1e-9)


def test_flat_round_trip_is_bit_exact():
    p = mlp_init(MlpSpec((3, 5, 2)), 4)
    assert p.with_flat(p.flat()).equals(p)
    with pytest.raises(ShapeError):
        p.with_flat(np.zeros(p.size + 1))
