import numpy as np
import pytest
from scipy.special import expit

from distilkit import rbm


def random_rbm(I, J, seed, scale=0.7):
    rng = np.random.default_rng(seed)
    return rbm.RbmModel(
        W=rng.normal(scale=scale, size=(I, J)),
        a=rng.normal(scale=0.5, size=I),
        b=rng.normal(scale=0.5, size=J),
    )


def test_zero_rbm_log_prob():
    m = rbm.RbmModel(W=np.zeros((5, 3)), a=np.zeros(5), b=np.zeros(3))
    x = np.array([1.0, 0, 1, 0, 1])
    assert rbm.unnorm_log_prob(m, x) == pytest.approx(3 * np.log(2))


def test_log_prob_sums_to_z():
    m = random_rbm(8, 4, seed=0)
    total = -np.inf
    for block in rbm.enumerate_states(8):
        total = np.logaddexp(total, rbm._logsumexp(rbm.unnorm_log_prob(m, block)))
    assert total == pytest.approx(rbm.exact_log_z(m), abs=1e-10)


def test_nonbinary_rejected():
    m = random_rbm(4, 2, seed=1)
    with pytest.raises(ValueError, match="binary"):
        rbm.unnorm_log_prob(m, np.array([0.5, 0, 1, 0]))


def test_conditionals_independent_of_x_when_w_zero():
    m = rbm.RbmModel(W=np.zeros((4, 3)), a=np.zeros(4), b=np.array([0.3, -0.2, 1.0]))
    p1 = rbm.cond_h_given_x(m, np.zeros(4))
    p2 = rbm.cond_h_given_x(m, np.ones(4))
    np.testing.assert_allclose(p1, p2)
    np.testing.assert_allclose(p1, expit(m.b))


def test_conditional_saturation():
    m = rbm.RbmModel(W=np.array([[30.0]]), a=np.zeros(1), b=np.zeros(1))
    p = rbm.cond_h_given_x(m, np.ones(1))
    assert p[0] > 1 - 1e-9


def test_conditional_matches_bayes_enumeration():
    # p(h|x) from the joint table over (x, h)
    m = random_rbm(4, 3, seed=2)
    x = np.array([1.0, 0.0, 1.0, 1.0])
    got = rbm.cond_h_given_x(m, x)
    joint = np.zeros((2,) * 3)
    for idx in np.ndindex(*joint.shape):
        h = np.array(idx, dtype=np.float64)
        joint[idx] = np.exp(x @ m.W @ h + x @ m.a + h @ m.b)
    joint /= joint.sum()
    for j in range(3):
        marginal = joint.sum(axis=tuple(k for k in range(3) if k != j))
        assert got[j] == pytest.approx(marginal[1], abs=1e-12)


def test_gibbs_marginals_match_enumeration():
    m = random_rbm(6, 3, seed=3, scale=0.5)
    probs, _ = rbm.exact_visible_probs(m)
    states = np.concatenate(list(rbm.enumerate_states(6)))
    true_marginal = probs @ states
    rng = np.random.default_rng(4)
    # 200 parallel chains x 5000 sweeps ~ 1e6 samples
    farm = rbm.GibbsFarm(m, n_chains=200, rng=rng, burn_in=100)
    acc = np.zeros(6)
    sweeps = 5000
    for _ in range(sweeps):
        farm.step()
        acc += farm.state.sum(axis=0)
    est = acc / (200 * sweeps)
    # generous 3-sigma-ish band given chain correlation
    assert np.abs(est - true_marginal).max() < 0.01


def test_gibbs_w_zero_ignores_input():
    m = rbm.RbmModel(W=np.zeros((3, 2)), a=np.array([2.0, -2.0, 0.0]), b=np.zeros(2))
    rng = np.random.default_rng(5)
    x = np.tile([1.0, 1.0, 1.0], (20000, 1))
    out = rbm.gibbs_step(m, x, rng)
    np.testing.assert_allclose(out.mean(axis=0), expit(m.a), atol=0.01)


def test_gibbs_reproducible():
    m = random_rbm(5, 3, seed=6)
    x0 = np.zeros(5)

    def run():
        rng = np.random.default_rng(7)
        x = x0
        for _ in range(50):
            x = rbm.gibbs_step(m, x, rng)
        return x.tobytes()

    assert run() == run()


def test_exact_log_z_factorized():
    rng = np.random.default_rng(8)
    a = rng.normal(size=6)
    b = rng.normal(size=3)
    m = rbm.RbmModel(W=np.zeros((6, 3)), a=a, b=b)
    expected = rbm.softplus(a).sum() + rbm.softplus(b).sum()
    assert rbm.exact_log_z(m) == pytest.approx(expected, abs=1e-10)


def test_exact_log_z_all_zero_params():
    m = rbm.RbmModel(W=np.zeros((10, 5)), a=np.zeros(10), b=np.zeros(5))
    assert rbm.exact_log_z(m) == pytest.approx(15 * np.log(2), abs=1e-12)


def test_exact_log_z_guard():
    m = rbm.RbmModel(W=np.zeros((21, 2)), a=np.zeros(21), b=np.zeros(2))
    with pytest.raises(ValueError):
        rbm.exact_log_z(m)


def test_normalization_invariant():
    m = random_rbm(8, 4, seed=9)
    probs, _ = rbm.exact_visible_probs(m)
    assert abs(probs.sum() - 1.0) <= 1e-10


def test_hidden_permutation_exchangeability():
    m = random_rbm(5, 4, seed=10)
    perm = np.array([2, 0, 3, 1])
    m2 = rbm.RbmModel(W=m.W[:, perm], a=m.a.copy(), b=m.b[perm])
    rng = np.random.default_rng(11)
    xs = (rng.random((10, 5)) < 0.5).astype(np.float64)
    np.testing.assert_allclose(
        rbm.unnorm_log_prob(m, xs), rbm.unnorm_log_prob(m2, xs), atol=1e-12
    )


def test_hill_climb_finds_max_on_small_rbm():
    m = random_rbm(8, 4, seed=12, scale=1.5)
    _, lps = rbm.exact_visible_probs(m)
    true_max = lps.max()
    best, best_x = rbm.hill_climb_max_log_prob(m, np.random.default_rng(13), n_restarts=50)
    assert best <= true_max + 1e-9
    assert best == pytest.approx(true_max, abs=1e-9)  # small instance: found exactly
    assert rbm.unnorm_log_prob(m, best_x) == pytest.approx(best)


def test_softplus_stable():
    assert rbm.softplus(np.array([800.0]))[0] == pytest.approx(800.0)
    assert rbm.softplus(np.array([-800.0]))[0] == pytest.approx(0.0, abs=1e-300)
    assert np.isfinite(rbm.softplus(np.array([-1e4, 1e4]))).all()


def test_rbm_file_roundtrip(tmp_path):
    m = random_rbm(6, 4, seed=14)
    p = tmp_path / "model.rbm"
    rbm.save_rbm(p, m)
    back = rbm.load_rbm(p)
    assert back.W.tobytes() == m.W.tobytes()
    assert back.a.tobytes() == m.a.tobytes()
    assert back.b.tobytes() == m.b.tobytes()


def test_rbm_text_import(tmp_path):
    m = random_rbm(3, 2, seed=15)
    p = tmp_path / "dump.txt"
    lines = [f"{m.n_visible} {m.n_hidden}"]
    for row in m.W:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(" ".join(repr(float(v)) for v in m.a))
    lines.append(" ".join(repr(float(v)) for v in m.b))
    p.write_text("\n".join(lines))
    black = rbm.unnorm_log_prob(m, np.zeros(3))
    back = rbm.import_rbm_text(p, expect_black_log_prob=black)
    np.testing.assert_allclose(back.W, m.W)
    with pytest.raises(ValueError, match="validation failed"):
        rbm.import_rbm_text(p, expect_black_log_prob=black + 5.0)
