import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qdiff import tensor as T
from qdiff.checks import tiny_model_config
from qdiff.diffusion import (IncompatibleCheckpoint, TrainingDivergence, adam_init, adam_step, ddpm_sample,
                             ema_init, ema_rate, ema_update, make_schedule, p2_weight, q_sample, q_step,
                             training_loss, transfer_weights)
from qdiff.tensor import ParamTree
from qdiff.unet import VERTEX_PREFIX, ModelConfig, UNet


def zero_model(x, t):
    return T.constant(np.zeros(x.shape))


# ------------------------------------------------------------ schedule


def test_schedule_endpoints():
    s = make_schedule(1000)
    assert s.T == 1000 and s.beta[0] == 1e-4 and s.beta[-1] == 0.02
    assert s.alpha_bar[0] == 1 - 1e-4
    assert s.alpha_bar[-1] < 1e-4


def test_schedule_against_independent_product():
    s = make_schedule(300)
    np.testing.assert_allclose(s.alpha_bar, np.exp(np.cumsum(np.log1p(-np.linspace(1e-4, 0.02, 300)))),
                               rtol=1e-12)


@given(st.integers(1, 1500))
def test_schedule_invariants(n):
    s = make_schedule(n)
    assert ((s.beta > 0) & (s.beta < 1)).all()
    assert (np.diff(s.alpha_bar) < 0).all()
    np.testing.assert_array_equal(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:])


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_schedule_rejects_bad_T(bad):
    with pytest.raises(ValueError):
        make_schedule(bad)


# ------------------------------------------------------------ forward process


def test_q_sample_zero_noise(rng):
    s = make_schedule(50)
    x0 = rng.standard_normal((3, 1, 4, 4))
    out = q_sample(x0, [0, 10, 49], np.zeros_like(x0), s)
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bar[[0, 10, 49]])[:, None, None, None] * x0)


def test_q_sample_identity_limit(rng):
    s = make_schedule(5)
    ident = type(s)(s.beta, s.alpha, np.ones(5))
    x0 = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(q_sample(x0, [1, 4], rng.standard_normal((2, 3)), ident), x0)


def test_q_sample_errors(rng):
    s = make_schedule(10)
    x0 = np.zeros((2, 3))
    with pytest.raises(ValueError):
        q_sample(x0, [0, 10], x0, s)
    with pytest.raises(ValueError):
        q_sample(x0, [0, 1], np.zeros((2, 4)), s)
    with pytest.raises(ValueError):
        q_sample(x0, [0], x0, s)


def within_3se(samples, mean, var):
    n = samples.shape[0]
    mean_ok = np.abs(samples.mean(0) - mean) <= 3 * np.sqrt(var / n)
    var_ok = np.abs(samples.var(0, ddof=1) - var) <= 3 * var * np.sqrt(2 / (n - 1))
    return mean_ok.all() and var_ok.all()


@pytest.mark.parametrize("t", [1, 10, 200])
def test_q_sample_moments(t):
    s, rng, n = make_schedule(200), np.random.default_rng(t), 100_000
    x0 = np.array([0.8, -0.3, 0.0, 1.0])
    xt = q_sample(np.broadcast_to(x0, (n, 4)), np.full(n, t - 1), rng.standard_normal((n, 4)), s)
    ab = s.alpha_bar[t - 1]
    assert within_3se(xt, np.sqrt(ab) * x0, 1 - ab)


@pytest.mark.parametrize("t", [1, 10, 200])
def test_iterated_single_steps_match_closed_form(t):
    s, rng, n = make_schedule(200), np.random.default_rng(100 + t), 100_000
    x0 = np.array([0.8, -0.3, 0.0, 1.0])
    x = np.broadcast_to(x0, (n, 4)).copy()
    for step in range(t):
        x = q_step(x, step, rng.standard_normal((n, 4)), s)
    ab = s.alpha_bar[t - 1]
    assert within_3se(x, np.sqrt(ab) * x0, 1 - ab)


# ------------------------------------------------------------ loss


def test_p2_weight_examples():
    s = make_schedule(1000)
    assert p2_weight([0], s)[0] < 1e-3
    snr = s.snr(np.arange(1000))
    t1 = int(np.argmin(np.abs(snr - 1)))
    np.testing.assert_allclose(p2_weight([t1], s)[0], 1 / (1 + snr[t1]))
    np.testing.assert_allclose(p2_weight([999], s)[0], 1.0, atol=1e-4)
    ident = type(s)(s.beta, s.alpha, np.full(1000, 0.5))
    assert p2_weight([3], ident)[0] == 0.5
    assert p2_weight([3], ident, k=1, gamma=2)[0] == 0.25


def test_oracle_model_has_zero_loss(rng):
    s = make_schedule(100)
    x0 = rng.uniform(-1, 1, (8, 1, 3, 3))
    # replay the loss's own draws (time steps first, then noise) to recover the true noise
    seq = np.random.default_rng(9)
    seq.integers(0, s.T, size=8)
    eps = seq.standard_normal(x0.shape)
    assert float(training_loss(lambda x, t: T.constant(eps), x0, np.random.default_rng(9), s).data) == 0.0


def test_zero_model_loss_expectation():
    s, B, D = make_schedule(200), 20_000, 16
    loss = float(training_loss(zero_model, np.zeros((B, 1, 4, 4)), np.random.default_rng(3), s).data)
    w = p2_weight(np.arange(200), s)
    mean = w.mean() * D
    var = (w**2).mean() * (D * D + 2 * D) - mean**2
    assert abs(loss - mean) <= 3 * np.sqrt(var / B)


@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_loss_is_non_negative(seed, shift):
    s = make_schedule(20)
    loss = training_loss(lambda x, t: T.constant(x.data + shift), np.zeros((3, 1, 2, 2)),
                         np.random.default_rng(seed), s)
    assert float(loss.data) >= 0


def test_non_finite_loss_raises(rng):
    with pytest.raises(TrainingDivergence):
        training_loss(lambda x, t: T.constant(np.full(x.shape, np.nan)), np.zeros((2, 1, 2, 2)), rng,
                      make_schedule(10))


def test_adam_step_decreases_batch_loss():
    cfg = tiny_model_config()
    model = UNet(cfg)
    params = model.init(0)
    x0 = np.random.default_rng(1).uniform(-1, 1, (2, 1, 28, 28))
    s = make_schedule(50)

    def loss_of(p, grad=False):
        P = p.leaves() if grad else p.constants()
        loss = training_loss(lambda x, t: model(P, x, t), x0, np.random.default_rng(4), s)
        return loss, P

    before, P = loss_of(params, grad=True)
    grads = T.backward(before, P)
    after, _ = loss_of(adam_step(params, grads, adam_init(params, lr=1e-4))[0])
    assert float(after.data) < float(before.data)


# ------------------------------------------------------------ sampling


def test_sampling_variance_recursion_at_two_steps():
    s, n = make_schedule(2), 20_000
    out = ddpm_sample(zero_model, n, s, seed=5, shape=(1,), batch_size=5000, clip=False)
    var = (1 / s.alpha[1] + s.beta[1]) / s.alpha[0]
    assert within_3se(out, 0.0, var)


def test_sampling_empty_and_clipped():
    s = make_schedule(5)
    assert ddpm_sample(zero_model, 0, s).shape == (0, 1, 28, 28)
    out = ddpm_sample(zero_model, 3, s, shape=(1, 4, 4))
    assert out.min() >= -1 and out.max() <= 1


def test_sampling_bit_identical_across_runs_and_batch_sizes():
    s = make_schedule(8)

    def fn(x, t):
        return T.constant(np.sin(x.data) * 0.1 + t[:, None, None, None] * 1e-3)

    a = ddpm_sample(fn, 5, s, seed=11, shape=(1, 3, 3), batch_size=5)
    b = ddpm_sample(fn, 5, s, seed=11, shape=(1, 3, 3), batch_size=5)
    c = ddpm_sample(fn, 5, s, seed=11, shape=(1, 3, 3), batch_size=2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    np.testing.assert_array_equal(ddpm_sample(fn, 2, s, seed=11, shape=(1, 3, 3), start=3), a[3:])
    assert not np.array_equal(a, ddpm_sample(fn, 5, s, seed=12, shape=(1, 3, 3)))


def test_sampling_with_network_is_batch_independent():
    model = UNet(tiny_model_config())
    P = model.init(0).constants()
    s = make_schedule(3)
    a = ddpm_sample(lambda x, t: model(P, x, t), 3, s, seed=2, batch_size=3)
    b = ddpm_sample(lambda x, t: model(P, x, t), 3, s, seed=2, batch_size=1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_posterior_variance_option(rng):
    s = make_schedule(4)
    a = ddpm_sample(zero_model, 2, s, shape=(1,), clip=False)
    b = ddpm_sample(zero_model, 2, s, shape=(1,), clip=False, variance="posterior")
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_sample(zero_model, 2, s, variance="learned")


# ------------------------------------------------------------ optimizer and EMA


def tree(**kw):
    return ParamTree({k: np.asarray(v, dtype=float) for k, v in kw.items()})


def test_adam_zero_gradient_keeps_params():
    p = tree(a=[1.0, -2.0], b=[[3.0]])
    new, st_ = adam_step(p, {"a": np.zeros(2), "b": np.zeros((1, 1))}, adam_init(p))
    assert st_.step == 1
    assert all(np.array_equal(new[k], p[k]) for k in p)


def test_adam_first_step_magnitude():
    p = tree(w=[0.5])
    new, _ = adam_step(p, {"w": np.array([1.0])}, adam_init(p))
    np.testing.assert_allclose(new["w"] - p["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_against_hand_recursion(rng):
    p = tree(w=rng.standard_normal(3))
    state = adam_init(p, lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6)
    w, m, v = p["w"].copy(), np.zeros(3), np.zeros(3)
    for step in range(1, 6):
        g = rng.standard_normal(3)
        p, state = adam_step(p, {"w": g}, state)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        w = w - 0.01 * (m / (1 - 0.8**step)) / (np.sqrt(v / (1 - 0.95**step)) + 1e-6)
        np.testing.assert_allclose(p["w"], w, rtol=1e-13)


def test_adam_is_stateful():
    p = tree(w=[0.0])
    g = {"w": np.array([1.0])}
    one, s1 = adam_step(p, g, adam_init(p))
    twice, _ = adam_step(one, g, s1)
    double, _ = adam_step(p, {"w": np.array([2.0])}, adam_init(p))
    assert not np.allclose(twice["w"], double["w"])


def test_adam_rejects_mismatched_trees():
    p = tree(w=[0.0])
    with pytest.raises(ValueError):
        adam_step(p, {"v": np.zeros(1)}, adam_init(p))
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, adam_init(p))


def test_ema_rate_policy():
    assert ema_rate(0) == 0.1
    assert ema_rate(10**7) == 0.999
    rates = [ema_rate(s) for s in range(0, 20000, 97)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_ema_fixed_point_and_update(rng):
    p = tree(a=rng.standard_normal(4))
    e = ema_init(p)
    np.testing.assert_array_equal(ema_update(e, p, 5).shadow["a"], p["a"])
    q = tree(a=np.zeros(4))
    np.testing.assert_allclose(ema_update(e, q, 0).shadow["a"], 0.1 * p["a"])
    with pytest.raises(ValueError):
        ema_update(e, tree(b=np.zeros(4)), 0)


# ------------------------------------------------------------ transfer


@pytest.fixture(scope="module")
def classical_source():
    return UNet(ModelConfig()).init(21)


def test_transfer_classical_to_classical(classical_source):
    new, report = transfer_weights(classical_source, ModelConfig(), seed=99)
    vertex = {k for k in new if k.startswith(VERTEX_PREFIX)}
    assert set(report["reinitialized"]) == vertex and vertex
    assert set(report["copied"]).isdisjoint(vertex)
    for k in report["copied"]:
        assert new[k].tobytes() == classical_source[k].tobytes()
    assert all(not np.array_equal(new[k], classical_source[k]) for k in vertex if classical_source[k].std() > 0)


def test_transfer_to_fqconv_scalar_counts(classical_source):
    cfg = ModelConfig(variant="qvu", n_circuits=1, ansatz="fqconv")
    new, report = transfer_weights(classical_source, cfg)
    classical_vertex = sum(v.size for k, v in classical_source.items() if k.startswith(VERTEX_PREFIX))
    assert report["copied_scalars"] == 483241 - classical_vertex
    assert report["copied_scalars"] + report["reinitialized_scalars"] == 475201
    assert new.count() == 475201
    assert any(k.endswith(".theta") for k in report["reinitialized"])


def test_transfer_is_deterministic(classical_source):
    cfg = ModelConfig(variant="qvu", n_circuits=7)
    a, _ = transfer_weights(classical_source, cfg, seed=3)
    b, _ = transfer_weights(classical_source, cfg, seed=3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_transfer_rejects_non_classical_layouts(classical_source):
    quanvu = UNet(ModelConfig(variant="quanvu")).init(0)
    with pytest.raises(IncompatibleCheckpoint):
        transfer_weights(quanvu, ModelConfig(variant="qvu"))
    with pytest.raises(IncompatibleCheckpoint):
        transfer_weights(classical_source, ModelConfig(variant="quanvu"))
    broken = classical_source.copy()
    broken["stem.w"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(IncompatibleCheckpoint):
        transfer_weights(broken, ModelConfig())
