import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distilkit import optim


def test_adadelta_zero_grad_fresh_state():
    upd = optim.Adadelta([(3,)])
    (delta,) = upd.step([np.zeros(3)])
    assert np.all(delta == 0)


def test_adadelta_matches_scalar_recurrence_oracle():
    # independent 1-D simulation of the published update rule
    rho, eps = 0.95, 1e-6
    g = 0.37
    acc_g = acc_d = 0.0
    expected = []
    for _ in range(500):
        acc_g = rho * acc_g + (1 - rho) * g * g
        d = -np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * g
        acc_d = rho * acc_d + (1 - rho) * d * d
        expected.append(d)

    upd = optim.Adadelta([()])
    for exp in expected:
        (delta,) = upd.step([np.float64(g)])
        assert np.sign(delta) == -np.sign(g)
        np.testing.assert_allclose(float(delta), exp, rtol=1e-12)
    # magnitudes climb toward the |g| fixed point without overshooting it
    mags = np.abs(expected)
    assert np.all(np.diff(mags) > 0)
    assert mags[-1] < abs(g)


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=1e-3, max_value=10.0), st.integers(min_value=1, max_value=50))
def test_adadelta_sign_property(g, steps):
    upd = optim.Adadelta([()])
    for _ in range(steps):
        (delta,) = upd.step([np.float64(g)])
        assert delta < 0


def test_adadelta_per_parameter_adaptivity():
    # two parameters with gradients (g, 10g) take different step sizes
    upd = optim.Adadelta([(2,)])
    g = np.array([0.1, 1.0])
    last = None
    for _ in range(50):
        (last,) = upd.step([g])
    assert abs(last[0]) != abs(last[1])
    # but far less than 10x apart: the rule normalizes by RMS grad
    assert abs(last[1] / last[0]) < 5.0


def test_adadelta_rejects_nonfinite():
    upd = optim.Adadelta([(2,)])
    with pytest.raises(optim.NonFiniteError):
        upd.step([np.array([1.0, np.nan])])


def test_schedule_validation():
    with pytest.raises(ValueError):
        optim.PowerDecay(t0=0.0, beta=0.5)
    with pytest.raises(ValueError):
        optim.PowerDecay(t0=-1.0, beta=0.8)
    with pytest.raises(ValueError):
        optim.LinearDecay(alpha0=1.0, horizon=0)
    s = optim.PowerDecay(t0=0.0, beta=1.0)
    assert s.rate(0) == 1.0
    lin = optim.LinearDecay(alpha0=2.0, horizon=10)
    assert lin.rate(0) == 2.0
    assert lin.rate(10) == 0.0
    assert lin.rate(20) == 0.0


def test_sgd_quadratic_bowl_converges():
    theta0 = np.array([3.0, -2.0, 1.5])

    def grad_fn(params, t):
        (theta,) = params
        return 0.5 * float(theta @ theta), [theta.copy()]

    result = optim.sgd_train(
        [theta0],
        grad_fn,
        optim.ScheduledSGD(optim.LinearDecay(alpha0=1.0, horizon=2000)),
        n_iters=2000,
        log_every=500,
    )
    assert np.linalg.norm(result.params[0]) < 1e-3
    assert result.trace[0].loss > result.trace[-1].loss


def test_sgd_zero_gradient_leaves_params():
    theta0 = np.array([1.0, 2.0])

    def grad_fn(params, t):
        return 0.0, [np.zeros(2)]

    result = optim.sgd_train(
        [theta0], grad_fn, optim.Adadelta([(2,)]), n_iters=50, log_every=10
    )
    np.testing.assert_array_equal(result.params[0], theta0)


def test_sgd_aborts_on_repeated_nonfinite_loss():
    def grad_fn(params, t):
        return np.nan, [np.zeros(1)]

    with pytest.raises(optim.NonFiniteError):
        optim.sgd_train([np.zeros(1)], grad_fn, optim.Adadelta([(1,)]), n_iters=10)


def test_sgd_bit_reproducible():
    def run():
        rng = np.random.default_rng(123)

        def grad_fn(params, t):
            (theta,) = params
            noise = rng.normal(size=theta.shape)
            return float(theta @ theta), [2 * theta + 0.1 * noise]

        res = optim.sgd_train(
            [np.ones(4)],
            grad_fn,
            optim.Adadelta([(4,)]),
            n_iters=200,
            log_every=50,
        )
        return res.params[0].tobytes()

    assert run() == run()


def test_trace_csv_roundtrip(tmp_path):
    trace = [
        optim.TraceRecord(0, 20, 1.5, None),
        optim.TraceRecord(200, 4020, 0.25, 0.9),
    ]
    path = tmp_path / "trace.csv"
    optim.write_trace_csv(path, trace, header_lines=["seed=1"])
    text = path.read_text()
    assert text.startswith("# seed=1")
    assert "iteration,samples_seen,loss,metric" in text
    assert "200,4020,0.25,0.9" in text
