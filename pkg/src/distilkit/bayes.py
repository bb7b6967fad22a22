"""Distilling MCMC posterior chains into compact predictive distributions.

Two problem families:

* density estimation -- a posterior over model parameters w is slice-sampled
  and the Monte-Carlo predictive (the bag average of p(x|w)) is fitted by a
  small mixture of Gaussians, either after collecting the whole bag (batch)
  or on the fly with online EM (a fresh minibatch of chain states per
  update);
* binary classification -- the bag-averaged predictor t(x) is distilled into
  a small average of sigmoids, by cross entropy (value matching) or
  derivative square error (tangent matching, one Hessian-vector pass per
  branch of the binary expectation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import mcmc, mog, nncore, optim


@dataclass
class PosteriorTarget:
    """Unnormalized log posterior handle for the samplers."""

    log_density: object  # callable w -> float
    dim: int

    def __call__(self, w):
        return self.log_density(w)


# ---------------------------------------------------------------------------
# Bayesian density estimation (unknown-means mixture toy)


@dataclass
class MogToyLikelihood:
    """p(x | w) = sum_i weight_i * N(x; w_i, var_i) over scalar x; the
    unknown parameter w is the vector of component means."""

    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.variances.shape != self.weights.shape:
            raise ValueError("variances and weights must align")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @property
    def n_components(self):
        return self.weights.shape[0]

    def loglik(self, w, xs):
        """(N,) log p(x_n | w) for scalar observations xs."""
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(w, dtype=np.float64)
        comp = (
            -0.5 * (xs - w) ** 2 / self.variances
            - 0.5 * np.log(2 * np.pi * self.variances)
            + np.log(self.weights)
        )
        mx = comp.max(axis=1)
        return mx + np.log(np.exp(comp - mx[:, None]).sum(axis=1))

    def sample(self, w, n, rng):
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        return rng.normal(loc=np.asarray(w)[comps], scale=np.sqrt(self.variances[comps]))

    def pmc_logpdf(self, bag_w, xs, chunk=256):
        """log of the bag-averaged density (1/S) - sum_s p(x | w_s)."""
        bag_w = np.asarray(bag_w, dtype=np.float64)
        xs = np.asarray(xs, dtype=np.float64).ravel()
        S = bag_w.shape[0]
        out = np.empty(xs.size)
        for start in range(0, xs.size, chunk):
            block = xs[start : start + chunk]
            # (S, G, C) component log densities
            comp = (
                -0.5 * (block[None, :, None] - bag_w[:, None, :]) ** 2 / self.variances
                - 0.5 * np.log(2 * np.pi * self.variances)
                + np.log(self.weights)
            )
            mx = comp.max(axis=(0, 2))
            out[start : start + chunk] = mx + np.log(
                np.exp(comp - mx[None, :, None]).sum(axis=(0, 2)) / S
            )
        return out


def paper_toy_likelihood() -> MogToyLikelihood:
    """The three-component unknown-means toy: variances 2/5/1, equal weights."""
    return MogToyLikelihood(variances=np.array([2.0, 5.0, 1.0]), weights=np.full(3, 1 / 3))


def paper_toy_true_means():
    return np.array([-3.0, 0.0, 2.0])


def mog_means_posterior(data, likelihood: MogToyLikelihood, prior_var=100.0):
    """Posterior over the unknown component means given scalar observations."""
    data = np.asarray(data, dtype=np.float64).ravel()

    def log_density(w):
        lp = -0.5 * float(np.dot(w, w)) / prior_var
        if data.size:
            lp += float(likelihood.loglik(w, data).sum())
        return lp

    return PosteriorTarget(log_density=log_density, dim=likelihood.n_components)


def sample_pmc(bag_w, likelihood, m, rng):
    """Exact draws from the bag-averaged predictive: pick a bag entry
    uniformly, then sample the likelihood at it."""
    bag_w = np.asarray(bag_w)
    idx = rng.integers(0, bag_w.shape[0], size=m)
    out = np.empty(m)
    for k, s in enumerate(idx):
        out[k] = likelihood.sample(bag_w[s], 1, rng)[0]
    return out


def density_distill_batch(
    target: PosteriorTarget,
    likelihood: MogToyLikelihood,
    n_chain_samples: int,
    n_fit_samples: int,
    n_components: int,
    seed: int = 0,
    burn_in: int = 1000,
    thinning: int = 1,
):
    """Collect the whole bag, draw predictive samples, fit by batch EM.

    Returns (MoGParams, bag, fit samples).
    """
    cfg = mcmc.ChainHarnessConfig(n_chains=1, burn_in=burn_in, thinning=thinning, seed=seed)
    bag = mcmc.run_chains(cfg, np.zeros(target.dim), target, n_chain_samples)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    xs = sample_pmc(bag.samples, likelihood, n_fit_samples, rng)
    params, _, _ = mog.em_batch(xs[:, None], C=n_components, seed=seed)
    return params, bag, xs


def density_distill_online(
    target: PosteriorTarget,
    likelihood: MogToyLikelihood,
    minibatch: int,
    n_iters: int,
    n_components: int,
    seed: int = 0,
    burn_in: int = 1000,
):
    """Advance the chain a minibatch at a time and blend online-EM statistics
    with a learning rate decaying linearly from 1 to 0."""
    seq = np.random.SeedSequence(seed)
    chain_stream, em_stream = seq.spawn(2)
    rng = np.random.default_rng(em_stream)
    state = mcmc.ChainState(
        position=np.zeros(target.dim), target=target, rng=np.random.default_rng(chain_stream)
    )
    for _ in range(burn_in):
        mcmc.slice_sweep(state)

    def batches():
        for _ in range(n_iters):
            xs = np.empty(minibatch)
            for k in range(minibatch):
                mcmc.slice_sweep(state)
                xs[k] = likelihood.sample(state.position, 1, rng)[0]
            yield xs[:, None]

    alphas = mog.linear_alpha_schedule(n_iters)
    gen = batches()
    first = next(gen)
    init, _, _ = mog.em_batch(first, C=n_components, seed=seed, max_iters=50)

    def rest():
        yield first
        yield from gen

    params, _ = mog.em_online(rest(), C=n_components, init=init, alphas=alphas, rng=rng)
    return params


def grid_l1_distance(logpdf_a, logpdf_b, grid):
    """Integral of |p_a - p_b| over the grid by the rectangle rule."""
    grid = np.asarray(grid)
    dx = grid[1] - grid[0]
    return float(np.abs(np.exp(logpdf_a) - np.exp(logpdf_b)).sum() * dx)


# ---------------------------------------------------------------------------
# Bayesian binary classification


def make_logreg_toy_dataset(seed: int = 0, n_per_class: int = 12, separation: float = 2.2):
    """Two 2-D blobs of n_per_class points each, labels 1 and 0."""
    rng = np.random.default_rng(seed)
    pos = rng.normal(loc=(+separation, +separation), scale=1.1, size=(n_per_class, 2))
    neg = rng.normal(loc=(-separation, -separation), scale=1.1, size=(n_per_class, 2))
    X = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(n_per_class), np.zeros(n_per_class)])
    return X, y


def augment_bias(X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)


def logreg_posterior(X, y, prior_var=100.0, add_bias=True):
    """Gaussian-prior logistic regression posterior; the intercept is
    absorbed by augmenting x with a constant-1 coordinate."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if add_bias:
        X = augment_bias(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.size:
        raise ValueError("data and labels disagree")

    def log_density(w):
        z = X @ w
        # y log sigma(z) + (1-y) log sigma(-z), stable via softplus
        ll = -(np.logaddexp(0.0, -z) * y + np.logaddexp(0.0, z) * (1.0 - y)).sum()
        return float(ll - 0.5 * np.dot(w, w) / prior_var)

    return PosteriorTarget(log_density=log_density, dim=X.shape[1])


def mc_predict(bag_w, X, chunk=2048):
    """Bag-averaged sigmoid predictor t(x) in strict (0, 1)."""
    bag_w = np.asarray(bag_w, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        block = X[start : start + chunk]
        out[start : start + chunk] = expit(block @ bag_w.T).mean(axis=1)
    eps = nncore.SIGMOID_CLAMP
    return np.clip(out, eps, 1.0 - eps)


def mc_predict_gradlog(bag_w, X):
    """(t, d log t/dx, d log(1-t)/dx) for the bag-averaged predictor."""
    bag_w = np.asarray(bag_w, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s = expit(X @ bag_w.T)  # (B, S)
    t = s.mean(axis=1)
    dt_dx = (s * (1.0 - s)) @ bag_w / bag_w.shape[0]  # (B, d)
    eps = nncore.SIGMOID_CLAMP
    t = np.clip(t, eps, 1.0 - eps)
    return t, dt_dx / t[:, None], -dt_dx / (1.0 - t)[:, None]


def single_sample_gradlog(w, X):
    """Teacher quantities when a single chain state stands in for the bag:
    t(x, w) = sigma(w.x), d log t/dx = (1-t) w, d log(1-t)/dx = -t w."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = expit(X @ np.asarray(w))
    eps = nncore.SIGMOID_CLAMP
    t = np.clip(t, eps, 1.0 - eps)
    return t, (1.0 - t)[:, None] * w, -t[:, None] * w


class CompactBinaryModel:
    """f(x) = (1/S') sum_s sigma(w_s . x): one fixed-average layer over S'
    trainable sigmoid units -- a single-hidden-layer network, so the
    standard passes provide its derivatives."""

    def __init__(self, weights):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))

    @property
    def n_units(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    def copy(self):
        return CompactBinaryModel(self.weights.copy())

    def network(self) -> nncore.Network:
        s = self.n_units
        return nncore.Network(
            [
                nncore.LayerSpec(W=self.weights, b=np.zeros(s), nonlinearity="logistic"),
                nncore.LayerSpec(
                    W=np.full((1, s), 1.0 / s), b=np.zeros(1), nonlinearity="linear"
                ),
            ]
        )

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.network().output(X).ravel()

    def ce_loss_grad(self, X, t):
        """Binary cross entropy against teacher values t; gradient is over
        the sigmoid weights only (the averaging head is fixed)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        B = X.shape[0]
        net = self.network()
        trace = nncore.forward(net, X)
        f = trace.xs[-1]
        E, dEdy = nncore.output_fn("binary_ce", f, t)
        grads = nncore.backprop(net, trace, -dEdy / B)
        return -float(E.mean()), grads.dW[0]

    def dse_loss_grad(self, X, t, dlogt_dx, dlog1mt_dx, raw_dims=None):
        """Derivative square error: t-weighted positive branch plus
        (1-t)-weighted negative branch, each one Hessian-vector pass.

        The tangent lives in the raw input space: when the inputs carry an
        appended constant-1 bias coordinate, pass ``raw_dims`` so the
        residual ignores derivatives along that coordinate.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64).ravel()
        B = X.shape[0]
        raw = X.shape[1] if raw_dims is None else raw_dims
        net = self.network()
        trace = nncore.forward(net, X)
        f = trace.xs[-1]

        loss = 0.0
        total = np.zeros_like(self.weights)
        for branch, weight_b, teacher_grad in (
            (1.0, t, dlogt_dx),
            (0.0, 1.0 - t, dlog1mt_dx),
        ):
            target = np.full((B, 1), branch)
            _, dEdy = nncore.output_fn("binary_ce", f, target)  # d log f or log(1-f)
            g = nncore.backprop(net, trace, dEdy)
            resid = g.dx - teacher_grad  # (B, d)
            resid[:, raw:] = 0.0
            loss += 0.5 * float(weight_b @ (resid * resid).sum(axis=1))
            v = nncore.RDirection(vx=weight_b[:, None] * resid)
            rtrace = nncore.r_forward(net, trace, v)
            r_seed = nncore.output_fn_r("binary_ce", f, target, rtrace.rxs[-1])
            hv = nncore.r_backprop(net, trace, g, rtrace, v, r_seed)
            total += hv.dW[0]
        return loss / B, total / B


@dataclass
class BinaryDistillConfig:
    loss: str = "ce"  # 'ce' | 'dse'
    mode: str = "batch"  # 'batch' | 'online'
    n_units: int = 10
    n_iters: int = 5000
    minibatch: int = 10
    input_var: float = 100.0
    init_scale: float = 1.0  # compact weights start i.i.d. N(0, init_scale^2)
    seed: int = 0
    burn_in: int = 1000


def binary_distill(
    config: BinaryDistillConfig,
    posterior: PosteriorTarget = None,
    bag_w: np.ndarray = None,
    input_dim: int = None,
):
    """Train the compact sigmoid-average model against the posterior.

    Batch mode requires ``bag_w`` (the collected chain samples); online mode
    requires ``posterior`` and simulates the chain as it trains. Input
    locations are drawn from N(0, input_var I) over ``input_dim`` raw
    coordinates and bias-augmented to the posterior dimension.
    """
    seq = np.random.SeedSequence(config.seed)
    s_init, s_x, s_chain = seq.spawn(3)
    if config.mode == "batch":
        if bag_w is None:
            raise ValueError("batch mode needs the sample bag")
        bag_w = np.asarray(bag_w, dtype=np.float64)
        w_dim = bag_w.shape[1]
    elif config.mode == "online":
        if posterior is None:
            raise ValueError("online mode needs the posterior target")
        w_dim = posterior.dim
    else:
        raise ValueError(f"unknown mode {config.mode!r}")
    if input_dim is None:
        input_dim = w_dim - 1  # bias-augmented convention
    raw_dims = input_dim if w_dim == input_dim + 1 else None
    if config.loss not in ("ce", "dse"):
        raise ValueError(f"unknown loss {config.loss!r}")

    rng_init = np.random.default_rng(s_init)
    model = CompactBinaryModel(
        rng_init.normal(scale=config.init_scale, size=(config.n_units, w_dim))
    )
    rng_x = np.random.default_rng(s_x)

    state = None
    if config.mode == "online":
        state = mcmc.ChainState(
            position=np.zeros(w_dim),
            target=posterior,
            rng=np.random.default_rng(s_chain),
        )
        for _ in range(config.burn_in):
            mcmc.slice_sweep(state)

    def sample_inputs():
        raw = rng_x.normal(scale=np.sqrt(config.input_var), size=(config.minibatch, input_dim))
        return augment_bias(raw) if w_dim == input_dim + 1 else raw

    def grad_fn(params, it):
        model.weights = params[0]
        X = sample_inputs()
        if config.mode == "batch":
            if config.loss == "ce":
                t = mc_predict(bag_w, X)
                return model.ce_loss_grad(X, t)
            t, dlt, dl1mt = mc_predict_gradlog(bag_w, X)
            return model.dse_loss_grad(X, t, dlt, dl1mt, raw_dims=raw_dims)
        # online: one fresh chain state per input location
        W = np.empty((config.minibatch, w_dim))
        for k in range(config.minibatch):
            mcmc.slice_sweep(state)
            W[k] = state.position
        if config.loss == "ce":
            t = np.clip(
                expit((X * W).sum(axis=1)), nncore.SIGMOID_CLAMP, 1 - nncore.SIGMOID_CLAMP
            )
            return model.ce_loss_grad(X, t)
        # per-sample teacher from its own chain state
        t = np.empty(config.minibatch)
        dlt = np.empty((config.minibatch, w_dim))
        dl1mt = np.empty((config.minibatch, w_dim))
        for k in range(config.minibatch):
            tk, g1, g0 = single_sample_gradlog(W[k], X[k])
            t[k], dlt[k], dl1mt[k] = tk[0], g1[0], g0[0]
        return model.dse_loss_grad(X, t, dlt, dl1mt, raw_dims=raw_dims)

    horizon = max(config.n_iters - 1, 1)
    update = optim.ScheduledSGD(optim.LinearDecay(alpha0=1.0, horizon=horizon))

    def wrapped_grad(params, it):
        loss, gW = grad_fn(params, it)
        return loss, [gW]

    result = optim.sgd_train(
        [model.weights],
        wrapped_grad,
        update,
        n_iters=config.n_iters,
        batch_size=config.minibatch,
        log_every=max(1, config.n_iters // 10),
    )
    model.weights = result.params[0]
    return model, result.trace


def probe_grid(extent=10.0, n=81):
    """(n*n, 2) uniform grid over [-extent, extent]^2, plus the axes."""
    axis = np.linspace(-extent, extent, n)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()]), axis


def predictive_grid_csv(path, grid_xy, t_values, f_values, header_lines=()):
    import csv

    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "t", "f"])
        for (x1, x2), tv, fv in zip(grid_xy, t_values, f_values):
            writer.writerow([repr(float(x1)), repr(float(x2)), repr(float(tv)), repr(float(fv))])
