"""Binary restricted Boltzmann machine: unnormalized log probability,
conditionals, block Gibbs sampling, and an exact enumeration oracle for
small instances."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

RBM_FILE_MAGIC = b"RBMPAR01"
EXACT_LOGZ_MAX_VISIBLE = 20


def softplus(z):
    """log(1 + exp(z)) via the overflow-safe branch."""
    z = np.asarray(z, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


@dataclass
class RbmModel:
    W: np.ndarray  # (I, J) visible x hidden
    a: np.ndarray  # (I,) visible biases
    b: np.ndarray  # (J,) hidden biases

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        I, J = self.W.shape
        if I < 1 or J < 1:
            raise ValueError("RBM needs at least one visible and one hidden unit")
        if self.a.shape != (I,) or self.b.shape != (J,):
            raise ValueError("bias shapes inconsistent with W")
        for arr in (self.W, self.a, self.b):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite RBM parameters")

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]


def _check_binary(x, dim, what="x"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != dim:
        raise ValueError(f"{what} has dim {x.shape[1]}, expected {dim}")
    if not np.isin(x, (0.0, 1.0)).all():
        raise ValueError(f"{what} must be binary")
    return x, single


def unnorm_log_prob(m: RbmModel, x):
    """log ptilde(x) = a.x + sum_j softplus(W^T x + b)_j; batch-friendly."""
    x, single = _check_binary(x, m.n_visible)
    z = x @ m.W + m.b
    out = x @ m.a + softplus(z).sum(axis=1)
    return float(out[0]) if single else out


def cond_h_given_x(m: RbmModel, x):
    x, single = _check_binary(x, m.n_visible)
    p = expit(x @ m.W + m.b)
    return p[0] if single else p


def cond_x_given_h(m: RbmModel, h):
    h, single = _check_binary(h, m.n_hidden, "h")
    p = expit(h @ m.W.T + m.a)
    return p[0] if single else p


def gibbs_step(m: RbmModel, x, rng: np.random.Generator):
    """One block alternation: h ~ p(h|x) then x' ~ p(x|h); batched over rows."""
    x, single = _check_binary(x, m.n_visible)
    ph = expit(x @ m.W + m.b)
    h = (rng.random(ph.shape) < ph).astype(np.float64)
    px = expit(h @ m.W.T + m.a)
    x_new = (rng.random(px.shape) < px).astype(np.float64)
    return x_new[0] if single else x_new


class GibbsFarm:
    """Parallel Gibbs chains over one RBM; minibatches are taken from chains
    in sequence so consecutive minibatches thin each chain by
    n_chains/batch_size steps."""

    def __init__(self, model, n_chains, rng, init=None, burn_in=0):
        self.model = model
        self.rng = rng
        if init is None:
            self.state = (rng.random((n_chains, model.n_visible)) < 0.5).astype(
                np.float64
            )
        else:
            self.state = np.array(init, dtype=np.float64)
            if self.state.shape != (n_chains, model.n_visible):
                raise ValueError("init shape must be (n_chains, n_visible)")
        self._cursor = 0
        for _ in range(burn_in):
            self.step()

    def step(self):
        self.state = gibbs_step(self.model, self.state, self.rng)

    def next_batch(self, size):
        """Advance all chains once, then hand out the next ``size`` chains."""
        self.step()
        n = self.state.shape[0]
        idx = (self._cursor + np.arange(size)) % n
        self._cursor = int((self._cursor + size) % n)
        return self.state[idx].copy()


def enumerate_states(I, block=4096):
    """Yield all binary vectors of length I in blocks (row index = integer)."""
    total = 1 << I
    bits = np.arange(I, dtype=np.int64)
    for start in range(0, total, block):
        ints = np.arange(start, min(start + block, total), dtype=np.int64)
        yield ((ints[:, None] >> bits) & 1).astype(np.float64)


def exact_log_z(m: RbmModel):
    """log Z by streaming log-sum-exp enumeration; guarded to I <= 20."""
    if m.n_visible > EXACT_LOGZ_MAX_VISIBLE:
        raise ValueError(
            f"exact enumeration limited to {EXACT_LOGZ_MAX_VISIBLE} visible units"
        )
    running = -np.inf
    for block in enumerate_states(m.n_visible):
        lp = unnorm_log_prob(m, block)
        running = np.logaddexp(running, _logsumexp(lp))
    return float(running)


def exact_visible_probs(m: RbmModel):
    """Normalized p(x) over all 2^I states, in integer-index order."""
    lps = np.concatenate(
        [unnorm_log_prob(m, block) for block in enumerate_states(m.n_visible)]
    )
    return np.exp(lps - _logsumexp(lps)), lps


def _logsumexp(v):
    v = np.asarray(v, dtype=np.float64)
    mx = v.max()
    if not np.isfinite(mx):
        return mx
    return mx + np.log(np.exp(v - mx).sum())


def hill_climb_max_log_prob(m: RbmModel, rng, n_restarts=100):
    """Best log ptilde found by random restarts + greedy single-bit flips.

    Any value below the true maximum is still a valid lower bound on log Z.
    """
    best = -np.inf
    best_x = None
    for _ in range(n_restarts):
        x = (rng.random(m.n_visible) < 0.5).astype(np.float64)
        current = unnorm_log_prob(m, x)
        improved = True
        while improved:
            improved = False
            flips = np.tile(x, (m.n_visible, 1))
            idx = np.arange(m.n_visible)
            flips[idx, idx] = 1.0 - flips[idx, idx]
            lps = unnorm_log_prob(m, flips)
            k = int(np.argmax(lps))
            if lps[k] > current:
                current = lps[k]
                x = flips[k]
                improved = True
        if current > best:
            best = float(current)
            best_x = x.copy()
    return best, best_x


# ---------------------------------------------------------------------------
# parameter files


def save_rbm(path, m: RbmModel):
    """Binary layout: magic, u32 I, u32 J, then little-endian doubles --
    W row-major (I*J), a (I), b (J)."""
    with open(path, "wb") as f:
        f.write(RBM_FILE_MAGIC)
        f.write(struct.pack("<II", m.n_visible, m.n_hidden))
        f.write(np.ascontiguousarray(m.W, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(m.a, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(m.b, dtype="<f8").tobytes())


def load_rbm(path) -> RbmModel:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(RBM_FILE_MAGIC))
        if magic != RBM_FILE_MAGIC:
            raise ValueError(f"{path}: bad RBM file magic {magic!r}")
        I, J = struct.unpack("<II", f.read(8))
        payload = np.frombuffer(f.read((I * J + I + J) * 8), dtype="<f8")
        if payload.size != I * J + I + J:
            raise ValueError(f"{path}: truncated RBM file")
    W = payload[: I * J].reshape(I, J)
    a = payload[I * J : I * J + I]
    b = payload[I * J + I :]
    return RbmModel(W=W.copy(), a=a.copy(), b=b.copy())


def import_rbm_text(path, expect_black_log_prob=None, tol=0.01) -> RbmModel:
    """Import from a whitespace text dump: first line 'I J', then I rows of
    J values (W), one row of I values (a), one row of J values (b).

    If ``expect_black_log_prob`` is given, the imported model must reproduce
    log ptilde(all-zeros) to within ``tol`` or the import is rejected.
    """
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: empty RBM text dump")
    I, J = int(tokens[0]), int(tokens[1])
    values = np.array([float(v) for v in tokens[2:]], dtype=np.float64)
    if values.size != I * J + I + J:
        raise ValueError(
            f"{path}: expected {I * J + I + J} values for I={I}, J={J}, "
            f"found {values.size}"
        )
    m = RbmModel(
        W=values[: I * J].reshape(I, J),
        a=values[I * J : I * J + I],
        b=values[I * J + I :],
    )
    if expect_black_log_prob is not None:
        got = unnorm_log_prob(m, np.zeros(I))
        if abs(got - expect_black_log_prob) > tol:
            raise ValueError(
                f"{path}: validation failed, log ptilde(all-black) = {got:.4f}, "
                f"expected {expect_black_log_prob:.4f} +/- {tol}"
            )
    return m
