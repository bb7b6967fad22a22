"""Stochastic optimization: minibatch loop, ADADELTA, learning-rate schedules.

Parameters travel as flat lists of float64 arrays; gradient callables return
``(loss, grads)`` with grads matching the parameter list. The training loop
owns no randomness of its own, so a run is bit-reproducible given a seeded
``grad_fn``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(RuntimeError):
    """A gradient or loss stopped being finite."""


# ---------------------------------------------------------------------------
# update rules


class Adadelta:
    """Per-parameter adaptive steps from running RMS of gradients and updates.

    Defaults rho=0.95, eps=1e-6 (the originally suggested values).
    """

    def __init__(self, shapes, rho=0.95, eps=1e-6):
        self.rho = float(rho)
        self.eps = float(eps)
        self.acc_grad = [np.zeros(s) for s in shapes]
        self.acc_step = [np.zeros(s) for s in shapes]

    @classmethod
    def for_params(cls, params, rho=0.95, eps=1e-6):
        return cls([np.shape(p) for p in params], rho=rho, eps=eps)

    def step(self, grads, t=None):
        """Return the parameter deltas; accumulators update in place."""
        deltas = []
        for i, g in enumerate(grads):
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter block {i}")
            self.acc_grad[i] = self.rho * self.acc_grad[i] + (1 - self.rho) * g * g
            delta = (
                -np.sqrt(self.acc_step[i] + self.eps)
                / np.sqrt(self.acc_grad[i] + self.eps)
                * g
            )
            self.acc_step[i] = self.rho * self.acc_step[i] + (1 - self.rho) * delta * delta
            deltas.append(delta)
        return deltas


@dataclass
class Constant:
    alpha: float

    def rate(self, t):
        return self.alpha


@dataclass
class LinearDecay:
    """alpha0 * (1 - t/horizon), clipped at 0; reaches 0 at t = horizon."""

    alpha0: float
    horizon: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    def rate(self, t):
        return self.alpha0 * max(0.0, 1.0 - t / self.horizon)


@dataclass
class PowerDecay:
    """(t0 + t + 1)^-beta; the Robbins-Monro conditions (divergent rate sum,
    convergent squared sum) hold exactly when 1/2 < beta <= 1."""

    t0: float
    beta: float

    def __post_init__(self):
        if not (0.5 < self.beta <= 1.0):
            raise ValueError("PowerDecay requires 1/2 < beta <= 1")
        if self.t0 < 0:
            raise ValueError("PowerDecay requires t0 >= 0")

    def rate(self, t):
        return (self.t0 + t + 1.0) ** (-self.beta)


class ScheduledSGD:
    """Plain gradient steps delta = -rate(t) * g."""

    def __init__(self, schedule):
        self.schedule = schedule

    def step(self, grads, t):
        alpha = self.schedule.rate(t)
        deltas = []
        for i, g in enumerate(grads):
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter block {i}")
            deltas.append(-alpha * g)
        return deltas


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TraceRecord:
    iteration: int
    samples_seen: int
    loss: float
    metric: float | None = None


@dataclass
class TrainResult:
    params: list
    trace: list = field(default_factory=list)
    iterations_run: int = 0


def sgd_train(
    params,
    grad_fn,
    update_rule,
    n_iters: int,
    batch_size: int = 1,
    log_every: int = 200,
    metric_fn=None,
    patience: int | None = None,
) -> TrainResult:
    """Run the minibatch loop for a fixed iteration budget.

    grad_fn(params, t) -> (loss, grads). The loss/metric are recorded every
    ``log_every`` iterations (and at the last one). Two consecutive
    non-finite losses abort with a diagnostic. If ``patience`` is set, stop
    early once the metric has failed to improve for that many probes.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    trace = []
    bad_streak = 0
    best_metric = -np.inf
    stale_probes = 0
    t = -1
    for t in range(n_iters):
        loss, grads = grad_fn(params, t)
        if not np.isfinite(loss):
            bad_streak += 1
            if bad_streak >= 2:
                raise NonFiniteError(
                    f"loss non-finite twice consecutively at iteration {t}"
                )
        else:
            bad_streak = 0
        deltas = update_rule.step(grads, t)
        for p, d in zip(params, deltas):
            p += d
        if t % log_every == 0 or t == n_iters - 1:
            metric = metric_fn(params) if metric_fn else None
            trace.append(
                TraceRecord(
                    iteration=t,
                    samples_seen=(t + 1) * batch_size,
                    loss=float(loss),
                    metric=metric,
                )
            )
            if patience is not None and metric is not None:
                if metric > best_metric + 1e-12:
                    best_metric = metric
                    stale_probes = 0
                else:
                    stale_probes += 1
                    if stale_probes >= patience:
                        break
    return TrainResult(params=params, trace=trace, iterations_run=t + 1)


def write_trace_csv(path, trace, header_lines=()):
    """Emit the loss trace as CSV with optional '#'-prefixed header lines."""
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["iteration", "samples_seen", "loss", "metric"])
        for rec in trace:
            writer.writerow(
                [
                    rec.iteration,
                    rec.samples_seen,
                    repr(float(rec.loss)),
                    "" if rec.metric is None else repr(float(rec.metric)),
                ]
            )
