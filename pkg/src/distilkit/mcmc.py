"""Univariate slice sampling with linear stepping out, and a chain harness.

The sampler draws a vertical level under the log density, brackets the
current point with an interval of width ``step_w`` placed at random, widens
it linearly until both ends fall below the level, then shrinks proposals
toward the current point until one is accepted. Updates are applied to each
coordinate in turn; a sweep over all coordinates counts as one iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

MAX_STEP_OUT = 10**6  # safety bound on interval expansions per side


class ChainError(RuntimeError):
    """The target density became invalid at the chain's position."""


@dataclass
class ChainState:
    position: np.ndarray
    target: object  # callable: position -> unnormalized log density
    rng: np.random.Generator
    log_p: float = None
    iterations: int = 0
    n_evals: int = 0

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64)
        if self.log_p is None:
            self.log_p = float(self.target(self.position))
            self.n_evals += 1
        if not np.isfinite(self.log_p):
            raise ChainError("target log density not finite at the initial position")


@dataclass
class ChainHarnessConfig:
    n_chains: int = 1
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.burn_in < 0 or self.thinning < 1:
            raise ValueError("burn_in must be >= 0 and thinning >= 1")


def slice_update(state: ChainState, coord: int, step_w: float = 1.0) -> ChainState:
    """One univariate slice-sampling update of coordinate ``coord``.

    Leaves the target distribution invariant; only the given coordinate
    changes. Mutates and returns ``state``.
    """
    if not np.isfinite(state.log_p):
        raise ChainError("chain state has non-finite log density")
    rng = state.rng
    x = state.position
    x0 = x[coord]

    log_level = state.log_p + np.log(rng.random())

    def eval_at(value):
        x[coord] = value
        state.n_evals += 1
        return float(state.target(x))

    r = rng.random()
    left = x0 - r * step_w
    right = x0 + (1.0 - r) * step_w
    for _ in range(MAX_STEP_OUT):
        if eval_at(left) <= log_level:
            break
        left -= step_w
    for _ in range(MAX_STEP_OUT):
        if eval_at(right) <= log_level:
            break
        right += step_w

    while True:
        proposal = left + rng.random() * (right - left)
        log_p = eval_at(proposal)
        if log_p > log_level:
            state.position[coord] = proposal
            state.log_p = log_p
            return state
        # shrink toward the current point
        if proposal > x0:
            right = proposal
        elif proposal < x0:
            left = proposal
        else:
            raise ChainError("slice interval shrank to the current point")


def slice_sweep(state: ChainState, step_w: float = 1.0) -> ChainState:
    """Update each coordinate in turn; one harness iteration."""
    for coord in range(state.position.size):
        slice_update(state, coord, step_w)
    state.iterations += 1
    return state


@dataclass
class SampleBag:
    samples: np.ndarray  # (n, d)
    chain_ids: np.ndarray  # (n,)
    iterations: np.ndarray  # (n,) sweep index at which each sample was taken
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as f:
            for line in header_lines:
                f.write(f"# {line}\n")
            writer = csv.writer(f)
            d = self.samples.shape[1]
            writer.writerow(["chain", "iter"] + [f"w{i}" for i in range(d)])
            for cid, it, row in zip(self.chain_ids, self.iterations, self.samples):
                writer.writerow([int(cid), int(it)] + [repr(float(v)) for v in row])

    def save(self, path):
        from . import serialize

        serialize.save_arrays(
            path,
            "samplebag",
            self.meta,
            {
                "samples": self.samples,
                "chain_ids": self.chain_ids,
                "iterations": self.iterations,
            },
        )

    @classmethod
    def load(cls, path):
        from . import serialize

        _, meta, arrays = serialize.load_arrays(path, expect_kind="samplebag")
        return cls(
            samples=arrays["samples"],
            chain_ids=arrays["chain_ids"],
            iterations=arrays["iterations"],
            meta=meta,
        )


def run_chains(
    config: ChainHarnessConfig,
    init,
    target,
    n_samples_per_chain: int,
    step_w: float = 1.0,
) -> SampleBag:
    """Slice-sample ``n_samples_per_chain`` kept states from each chain.

    Chains use independent RNG streams split from the master seed. Kept
    samples are exactly every ``thinning``-th post-burn-in sweep. The bag is
    ordered by (chain id, iteration).
    """
    init = np.asarray(init, dtype=np.float64)
    streams = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    all_samples, all_chain, all_iter = [], [], []
    for cid in range(config.n_chains):
        state = ChainState(
            position=init.copy(),
            target=target,
            rng=np.random.default_rng(streams[cid]),
        )
        for _ in range(config.burn_in):
            slice_sweep(state, step_w)
        kept = 0
        while kept < n_samples_per_chain:
            for _ in range(config.thinning):
                slice_sweep(state, step_w)
            all_samples.append(state.position.copy())
            all_chain.append(cid)
            all_iter.append(state.iterations)
            kept += 1
    return SampleBag(
        samples=np.array(all_samples),
        chain_ids=np.array(all_chain, dtype=np.int64),
        iterations=np.array(all_iter, dtype=np.int64),
        meta={"burn_in": config.burn_in, "thinning": config.thinning, "seed": config.seed},
    )
