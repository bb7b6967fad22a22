"""Mixture-of-Gaussians density, sampling, and batch + online EM fitting.

Online EM keeps a running average of the three per-component sufficient
statistics (responsibility mass, first moment, second moment) and blends in
each minibatch's statistics with a decaying rate before recomputing the
parameters from the blended statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

COLLAPSE_FRACTION = 1e-8  # of the effective sample count
JITTER_SCALE = 1e-8
DEFAULT_TOL = 1e-8


class CovarianceError(ValueError):
    """A covariance matrix stopped being symmetric positive definite."""


@dataclass
class MoGParams:
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    covs: np.ndarray  # (C, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if self.covs.ndim == 1:  # list of scalar variances for d = 1
            self.covs = self.covs.reshape(-1, 1, 1)
        C, d = self.means.shape
        if self.weights.shape != (C,) or self.covs.shape != (C, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def to_json(self, path=None, header=None):
        payload = {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }
        if header:
            payload["header"] = header
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            payload = json.load(f)
        return cls(
            weights=np.array(payload["weights"]),
            means=np.array(payload["means"]),
            covs=np.array(payload["covs"]),
        )


def _chol_with_jitter(cov):
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError:
        d = cov.shape[0]
        jitter = JITTER_SCALE * max(np.trace(cov) / d, 1e-300) * np.eye(d)
        fixed = cov + jitter
        try:
            return np.linalg.cholesky(fixed), fixed
        except np.linalg.LinAlgError:
            raise CovarianceError("covariance not positive definite even after jitter")


def component_logpdfs(theta: MoGParams, X):
    """(N, C) log N(x_n; m_i, S_i)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N, d = X.shape
    out = np.empty((N, theta.n_components))
    for i in range(theta.n_components):
        chol, _ = _chol_with_jitter(theta.covs[i])
        diff = X - theta.means[i]
        sol = np.linalg.solve(chol, diff.T)
        maha = (sol * sol).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, i] = -0.5 * (maha + logdet + d * np.log(2.0 * np.pi))
    return out


def mog_logpdf(theta: MoGParams, X):
    """Mixture log density; scalar for a single point."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim <= 1 and (X.ndim == 0 or X.shape in ((theta.dim,), (1,)))
    comp = component_logpdfs(theta, X.reshape(-1, theta.dim))
    lp = _logsumexp_rows(comp + np.log(theta.weights))
    return float(lp[0]) if single else lp


def mog_sample(theta: MoGParams, n: int, rng: np.random.Generator):
    comps = rng.choice(theta.n_components, size=n, p=theta.weights)
    out = np.empty((n, theta.dim))
    for i in range(theta.n_components):
        idx = np.flatnonzero(comps == i)
        if idx.size:
            chol, _ = _chol_with_jitter(theta.covs[i])
            out[idx] = theta.means[i] + rng.normal(size=(idx.size, theta.dim)) @ chol.T
    return out


def responsibilities(theta: MoGParams, X):
    """(N, C) posterior component memberships; rows sum to 1."""
    logw = component_logpdfs(theta, X) + np.log(theta.weights)
    logw -= _logsumexp_rows(logw)[:, None]
    return np.exp(logw)


def _logsumexp_rows(M):
    mx = M.max(axis=1)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


@dataclass
class SuffStats:
    """Per-component accumulators: mass, first and second moments."""

    phi1: np.ndarray  # (C,)
    phi2: np.ndarray  # (C, d)
    phi3: np.ndarray  # (C, d, d)

    @classmethod
    def from_batch(cls, theta, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        R = responsibilities(theta, X)
        phi1 = R.sum(axis=0)
        phi2 = R.T @ X
        phi3 = np.einsum("ni,nd,ne->ide", R, X, X)
        return cls(phi1=phi1, phi2=phi2, phi3=phi3)

    def blend(self, other, alpha):
        self.phi1 = (1.0 - alpha) * self.phi1 + alpha * other.phi1
        self.phi2 = (1.0 - alpha) * self.phi2 + alpha * other.phi2
        self.phi3 = (1.0 - alpha) * self.phi3 + alpha * other.phi3


def params_from_stats(stats: SuffStats, rng=None, data_for_reseed=None, log=None):
    """The maximization-phase update, with collapse reseeding.

    weights = phi1 normalized, means = phi2/phi1, covs = phi3/phi1 - m m^T.
    A component whose mass falls below COLLAPSE_FRACTION of the total is
    reseeded at a random data point (when data is available).
    """
    phi1 = stats.phi1.copy()
    total = phi1.sum()
    C, d = stats.phi2.shape
    means = np.empty((C, d))
    covs = np.empty((C, d, d))
    collapse_level = COLLAPSE_FRACTION * total
    for i in range(C):
        if phi1[i] <= collapse_level:
            if log is not None:
                log.append(f"component {i} collapsed (mass {phi1[i]:.3e}); reseeded")
            if data_for_reseed is not None and rng is not None:
                point = data_for_reseed[rng.integers(len(data_for_reseed))]
            else:
                point = stats.phi2.sum(axis=0) / total
            phi1[i] = max(collapse_level, 1e-12)
            means[i] = point
            scale = np.trace(stats.phi3.sum(axis=0)) / (total * d)
            covs[i] = np.eye(d) * max(scale, 1e-6)
        else:
            means[i] = stats.phi2[i] / phi1[i]
            covs[i] = stats.phi3[i] / phi1[i] - np.outer(means[i], means[i])
            covs[i] = 0.5 * (covs[i] + covs[i].T)
            _, covs[i] = _chol_with_jitter(covs[i])
    weights = phi1 / phi1.sum()
    return MoGParams(weights=weights, means=means, covs=covs)


def kmeanspp_init(X, C, rng: np.random.Generator) -> MoGParams:
    """Distance-weighted seeding on a subsample; covariances start at the
    data covariance, weights uniform."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sub = X[rng.permutation(len(X))[: min(len(X), 2000)]]
    centers = [sub[rng.integers(len(sub))]]
    for _ in range(C - 1):
        d2 = np.min(
            [(np.square(sub - c).sum(axis=1)) for c in centers], axis=0
        )
        if d2.sum() <= 0:
            centers.append(sub[rng.integers(len(sub))])
            continue
        centers.append(sub[rng.choice(len(sub), p=d2 / d2.sum())])
    d = X.shape[1]
    cov = np.cov(X.T).reshape(d, d) + 1e-6 * np.eye(d)
    return MoGParams(
        weights=np.full(C, 1.0 / C),
        means=np.array(centers),
        covs=np.tile(cov, (C, 1, 1)),
    )


def em_batch(
    X,
    C: int,
    init: MoGParams | None = None,
    max_iters: int = 500,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
):
    """Classic EM to a local maximum of the mean log likelihood.

    Returns (params, loglik trace, event log). The mean log likelihood is
    non-decreasing over iterations up to numerical slack.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) < C:
        raise ValueError("need at least C data points")
    rng = np.random.default_rng(seed)
    theta = init if init is not None else kmeanspp_init(X, C, rng)
    trace = []
    events = []
    prev = -np.inf
    for _ in range(max_iters):
        stats = SuffStats.from_batch(theta, X)
        theta = params_from_stats(stats, rng=rng, data_for_reseed=X, log=events)
        ll = float(mog_logpdf(theta, X).mean())
        trace.append(ll)
        if np.isfinite(prev) and abs(ll - prev) < tol * max(1.0, abs(prev)):
            break
        prev = ll
    return theta, trace, events


def em_online(
    batches,
    C: int,
    init: MoGParams,
    alphas,
    rng: np.random.Generator = None,
):
    """Online EM over an iterable of minibatches with rates ``alphas``.

    The running statistics are blended as (1-a)*old + a*new each iteration;
    parameters are recomputed from the blend via the batch update forms.
    Returns (params, event log).
    """
    theta = init
    running = None
    events = []
    rng = rng or np.random.default_rng(0)
    last_batch = None
    for batch, alpha in zip(batches, alphas):
        if not (0.0 <= alpha <= 1.0):
            raise ValueError("online EM rates must lie in [0, 1]")
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        last_batch = batch
        stats = SuffStats.from_batch(theta, batch)
        if running is None:
            running = stats
        else:
            running.blend(stats, alpha)
        theta = params_from_stats(running, rng=rng, data_for_reseed=batch, log=events)
    if last_batch is None:
        raise ValueError("no minibatches supplied")
    return theta, events


def linear_alpha_schedule(n_iters: int):
    """1 at the first iteration, decaying linearly to 0 at the last."""
    if n_iters == 1:
        return np.array([1.0])
    return 1.0 - np.arange(n_iters) / (n_iters - 1)
