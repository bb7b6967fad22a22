import numpy as np
import pytest
from scipy import stats

from distilkit import nade, optim, rbm
from tests import oracles


def random_model(I, J, seed, scale=None):
    rng = np.random.default_rng(seed)
    m = nade.init_nade(I, J, rng)
    if scale is not None:
        m.U = rng.normal(scale=scale, size=m.U.shape)
        m.W = rng.normal(scale=scale, size=m.W.shape)
        m.b = rng.normal(scale=0.3, size=m.b.shape)
        m.c = rng.normal(scale=0.3, size=m.c.shape)
    return m


def all_states(I):
    return np.concatenate(list(rbm.enumerate_states(I)))


def test_zero_parameters_symmetric():
    I = 7
    m = nade.NadeModel(
        U=np.zeros((I, 4)), b=np.zeros(I), W=np.zeros((I - 1, 4)), c=np.zeros(4)
    )
    x = (np.arange(I) % 2).astype(np.float64)
    L, trace = nade.log_prob(m, x)
    assert L == pytest.approx(-I * np.log(2.0), abs=1e-12)
    np.testing.assert_allclose(trace.XHAT, 0.5)


def test_normalizes_by_construction():
    for I, seed in ((6, 0), (12, 1)):
        m = random_model(I, 5, seed, scale=1.0)
        L = nade.log_prob_only(m, all_states(I))
        assert abs(np.exp(L).sum() - 1.0) <= 1e-10


def test_nonbinary_rejected():
    m = random_model(4, 3, 2)
    with pytest.raises(ValueError, match="binary"):
        nade.log_prob(m, np.array([0.2, 1.0, 0.0, 1.0]))


def test_conditionals_match_bruteforce():
    I = 8
    m = random_model(I, 4, 3, scale=0.8)
    states = all_states(I)
    probs = np.exp(nade.log_prob_only(m, states))
    rng = np.random.default_rng(4)
    x = (rng.random(I) < 0.5).astype(np.float64)
    got = nade.conditionals(m, x)
    for i in range(I):
        match_prefix = np.all(states[:, :i] == x[:i], axis=1)
        num = probs[match_prefix & (states[:, i] == 1.0)].sum()
        den = probs[match_prefix].sum()
        assert got[i] == pytest.approx(num / den, abs=1e-9)


def test_sampling_zero_model_bernoulli_half():
    I = 6
    m = nade.NadeModel(
        U=np.zeros((I, 3)), b=np.zeros(I), W=np.zeros((I - 1, 3)), c=np.zeros(3)
    )
    X, XHAT = nade.sample(m, 100000, np.random.default_rng(5))
    assert np.abs(X.mean(axis=0) - 0.5).max() < 0.01
    np.testing.assert_allclose(XHAT, 0.5)


def test_sample_entropy_consistency():
    I = 8
    m = random_model(I, 4, 6, scale=0.7)
    states = all_states(I)
    L = nade.log_prob_only(m, states)
    entropy = -(np.exp(L) * L).sum()
    X, _ = nade.sample(m, 50000, np.random.default_rng(7))
    Ls = nade.log_prob_only(m, X)
    se = Ls.std() / np.sqrt(len(Ls))
    assert abs(-Ls.mean() - entropy) < 3 * se + 1e-6


def test_sample_reproducible():
    m = random_model(5, 3, 8)
    X1, _ = nade.sample(m, 40, np.random.default_rng(9))
    X2, _ = nade.sample(m, 40, np.random.default_rng(9))
    np.testing.assert_array_equal(X1, X2)


def test_sample_conditionals_equal_trace():
    m = random_model(6, 4, 10, scale=0.6)
    X, XHAT = nade.sample(m, 25, np.random.default_rng(11))
    _, trace = nade.log_prob(m, X)
    np.testing.assert_allclose(XHAT, trace.XHAT, atol=1e-12)


def test_gradients_finite_difference():
    rng = np.random.default_rng(12)
    m = random_model(6, 4, 13, scale=0.8)
    X = (rng.random((3, 6)) < 0.5).astype(np.float64)
    g = nade.grad_log_prob(m, X)
    fd_blocks, fd_x = oracles.nade_fd_grads(m, X)
    for a, b in zip(g.param_list(), fd_blocks):
        assert oracles.rel_err(a, b) <= 1e-5
    assert oracles.rel_err(g.dx, fd_x) <= 1e-5


def test_grad_db_zero_when_xhat_matches():
    # dL/db_i = x_i - xhat_i vanishes wherever the conditional equals the bit
    m = random_model(5, 3, 14)
    X = (np.random.default_rng(15).random((4, 5)) < 0.5).astype(np.float64)
    _, trace = nade.log_prob(m, X)
    g = nade.grad_log_prob(m, trace=trace)
    np.testing.assert_allclose(g.delta, X - trace.XHAT, atol=1e-12)


def test_grad_dx_last_equals_z():
    m = random_model(7, 3, 16, scale=0.5)
    rng = np.random.default_rng(17)
    X = (rng.random((5, 7)) < 0.5).astype(np.float64)
    _, trace = nade.log_prob(m, X)
    g = nade.grad_log_prob(m, trace=trace)
    np.testing.assert_allclose(g.dx[:, -1], trace.Z[:, -1], atol=1e-12)


def test_hvp_zero_direction():
    m = random_model(5, 3, 18)
    X = (np.random.default_rng(19).random((2, 5)) < 0.5).astype(np.float64)
    hv = nade.hvp_log_prob(m, nade.NadeDirection(), x=X)
    for arr in hv.param_list() + [hv.dx]:
        np.testing.assert_allclose(arr, 0.0, atol=1e-12)


def test_hvp_finite_difference():
    rng = np.random.default_rng(20)
    m = random_model(6, 4, 21, scale=0.8)
    X = (rng.random((3, 6)) < 0.5).astype(np.float64)
    v = oracles.nade_random_direction(m, 3, rng)
    hv = nade.hvp_log_prob(m, v, x=X)
    fd_blocks, fd_x = oracles.nade_fd_hvp(m, X, v)
    for a, b in zip(hv.param_list(), fd_blocks):
        assert oracles.rel_err(a, b) <= 1e-4
    assert oracles.rel_err(hv.dx, fd_x) <= 1e-4


def test_hvp_input_only_direction():
    rng = np.random.default_rng(22)
    m = random_model(6, 3, 23, scale=0.8)
    X = (rng.random((2, 6)) < 0.5).astype(np.float64)
    v = oracles.nade_random_direction(m, 2, rng, include_params=False)
    hv = nade.hvp_log_prob(m, v, x=X)
    fd_blocks, fd_x = oracles.nade_fd_hvp(m, X, v)
    for a, b in zip(hv.param_list(), fd_blocks):
        assert oracles.rel_err(a, b) <= 1e-4
    assert oracles.rel_err(hv.dx, fd_x) <= 1e-4


def test_hvp_linearity():
    rng = np.random.default_rng(24)
    m = random_model(5, 3, 25, scale=0.7)
    X = (rng.random((2, 5)) < 0.5).astype(np.float64)
    v1 = oracles.nade_random_direction(m, 2, rng)
    v2 = oracles.nade_random_direction(m, 2, rng)
    a, b = 1.7, -0.4
    v3 = nade.NadeDirection(
        vU=a * v1.vU + b * v2.vU,
        vb=a * v1.vb + b * v2.vb,
        vW=a * v1.vW + b * v2.vW,
        vc=a * v1.vc + b * v2.vc,
        vx=a * v1.vx + b * v2.vx,
    )
    h1 = nade.hvp_log_prob(m, v1, x=X)
    h2 = nade.hvp_log_prob(m, v2, x=X)
    h3 = nade.hvp_log_prob(m, v3, x=X)
    for p1, p2, p3 in zip(
        h1.param_list() + [h1.dx], h2.param_list() + [h2.dx], h3.param_list() + [h3.dx]
    ):
        np.testing.assert_allclose(a * p1 + b * p2, p3, atol=1e-9)


def test_train_recovers_3bit_distribution():
    rng = np.random.default_rng(26)
    target = rng.dirichlet(np.ones(8) * 2.0)
    states = all_states(3)
    data = states[rng.choice(8, size=20000, p=target)]
    m = nade.init_nade(3, 8, rng)
    trained, _ = nade.train_mle(m, data, n_iters=4000, batch_size=50, rng=rng)
    model_probs = np.exp(nade.log_prob_only(trained, states))
    kl = float((target * (np.log(target) - np.log(model_probs))).sum())
    assert kl <= 0.01


def test_train_memorizes_single_point():
    rng = np.random.default_rng(27)
    point = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    data = np.tile(point, (64, 1))
    m = nade.init_nade(5, 8, rng)
    trained, _ = nade.train_mle(m, data, n_iters=3000, batch_size=16, rng=rng)
    L = nade.log_prob_only(trained, point)
    assert L >= -0.05


def test_sampling_frequencies_match_probs():
    I = 5
    m = random_model(I, 3, 28, scale=0.6)
    states = all_states(I)
    probs = np.exp(nade.log_prob_only(m, states))
    X, _ = nade.sample(m, 40000, np.random.default_rng(29))
    idx = (X * (2 ** np.arange(I))).sum(axis=1).astype(int)
    counts = np.bincount(idx, minlength=2**I)
    res = stats.chisquare(counts, probs * len(X))
    assert res.pvalue > 0.01


def test_ordering_boundary_maps():
    ordering = np.array([2, 0, 3, 1])
    m = random_model(4, 3, 30)
    m.ordering = ordering
    x_data = np.array([10.0, 20.0, 30.0, 40.0])
    x_model = m.to_model_order(x_data)
    np.testing.assert_array_equal(x_model, [30.0, 10.0, 40.0, 20.0])
    np.testing.assert_array_equal(m.to_data_order(x_model), x_data)


def test_serialization_embeds_ordering(tmp_path):
    m = random_model(6, 4, 31)
    m.ordering = np.array([5, 4, 3, 2, 1, 0])
    p = tmp_path / "model.nade"
    nade.save_nade(p, m)
    back = nade.load_nade(p)
    np.testing.assert_array_equal(back.ordering, m.ordering)
    assert back.U.tobytes() == m.U.tobytes()


def test_log_prob_runtime_scales_subquadratically():
    # informational O(I*J) check: 4x the inputs should cost well under 16x
    import time

    J = 16
    rng = np.random.default_rng(32)

    def timed(I, reps=5):
        m = random_model(I, J, 33)
        X = (rng.random((64, I)) < 0.5).astype(np.float64)
        nade.log_prob_only(m, X)  # warm up
        t0 = time.perf_counter()
        for _ in range(reps):
            nade.log_prob_only(m, X)
        return (time.perf_counter() - t0) / reps

    t1, t2 = timed(64), timed(256)
    assert t2 / t1 < 12.0
