"""Binary single-hidden-layer autoregressive density estimator.

The model reads I binary inputs in its own variable ordering and emits the
conditional probability of each bit given the bits before it, so the exact
log probability of a vector costs O(I*J). The ordering permutation is stored
on the model; callers map data-order vectors through it at the boundary
(``to_model_order`` / ``to_data_order``).

Parameter blocks: U (I,J) output weights, b (I,) output biases, W (I-1,J)
input weights (row k multiplies input k and feeds every later step), c (J,)
initial hidden activation. ``params()`` exposes them as [U, b, W, c].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .nncore import SIGMOID_CLAMP


@dataclass
class NadeModel:
    U: np.ndarray
    b: np.ndarray
    W: np.ndarray
    c: np.ndarray
    ordering: np.ndarray = None  # model position k holds data index ordering[k]

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        I, J = self.U.shape
        if self.b.shape != (I,) or self.W.shape != (max(I - 1, 0), J) or self.c.shape != (J,):
            raise ValueError("inconsistent parameter shapes")
        if self.ordering is None:
            self.ordering = np.arange(I, dtype=np.int64)
        self.ordering = np.asarray(self.ordering, dtype=np.int64)
        if sorted(self.ordering.tolist()) != list(range(I)):
            raise ValueError("ordering must be a permutation of 0..I-1")
        for arr in (self.U, self.b, self.W, self.c):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite parameters")

    @property
    def n_inputs(self):
        return self.U.shape[0]

    @property
    def n_hidden(self):
        return self.U.shape[1]

    def params(self):
        return [self.U, self.b, self.W, self.c]

    def set_params(self, params):
        self.U, self.b, self.W, self.c = [np.asarray(p, dtype=np.float64) for p in params]

    def copy(self):
        return NadeModel(
            self.U.copy(), self.b.copy(), self.W.copy(), self.c.copy(), self.ordering.copy()
        )

    def to_model_order(self, x_data):
        return np.asarray(x_data)[..., self.ordering]

    def to_data_order(self, x_model):
        out = np.empty_like(np.asarray(x_model))
        out[..., self.ordering] = x_model
        return out


def init_nade(n_inputs, n_hidden, rng: np.random.Generator, ordering=None) -> NadeModel:
    """Uniform +/- sqrt(6/(I+J)) weights, zero biases and initial activation."""
    limit = np.sqrt(6.0 / (n_inputs + n_hidden))
    return NadeModel(
        U=rng.uniform(-limit, limit, size=(n_inputs, n_hidden)),
        b=np.zeros(n_inputs),
        W=rng.uniform(-limit, limit, size=(max(n_inputs - 1, 0), n_hidden)),
        c=np.zeros(n_hidden),
        ordering=ordering,
    )


@dataclass
class NadeTrace:
    H: np.ndarray  # (B, I, J) hidden states per step
    Z: np.ndarray  # (B, I) output activations
    XHAT: np.ndarray  # (B, I) conditionals, clamped to (0, 1)
    X: np.ndarray  # (B, I) the inputs the trace was computed on


def _as_batch(m, x, validate=True):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != m.n_inputs:
        raise ValueError(f"input dim {x.shape[1]} != model inputs {m.n_inputs}")
    if validate and not np.isin(x, (0.0, 1.0)).all():
        raise ValueError("input vectors must be binary")
    return x, single


def _sigma(v):
    return np.clip(expit(v), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)


def forward(m: NadeModel, x, keep_trace=True, validate=True):
    """Log probability of each row of x (model order). Returns (L, trace);
    trace is None when keep_trace is False (streaming, O(B*J) memory)."""
    X, single = _as_batch(m, x, validate)
    B, I, J = X.shape[0], m.n_inputs, m.n_hidden
    a = np.tile(m.c, (B, 1))
    H = np.empty((B, I, J)) if keep_trace else None
    Z = np.empty((B, I))
    for i in range(I):
        h = _sigma(a)
        if keep_trace:
            H[:, i, :] = h
        Z[:, i] = h @ m.U[i] + m.b[i]
        if i < I - 1:
            a = a + X[:, i, None] * m.W[i]
    XHAT = _sigma(Z)
    L = (X * np.log(XHAT) + (1.0 - X) * np.log(1.0 - XHAT)).sum(axis=1)
    trace = NadeTrace(H=H, Z=Z, XHAT=XHAT, X=X) if keep_trace else None
    return (L[0] if single else L), trace


def log_prob(m: NadeModel, x):
    """(L, trace) for binary input(s) in model order."""
    return forward(m, x, keep_trace=True, validate=True)


def log_prob_only(m: NadeModel, x):
    L, _ = forward(m, x, keep_trace=False, validate=True)
    return L


def sample(m: NadeModel, n: int, rng: np.random.Generator):
    """Ancestral samples. Returns (X, XHAT): n binary vectors in model order
    and the conditionals that generated them (= the trace of the sample)."""
    I, J = m.n_inputs, m.n_hidden
    a = np.tile(m.c, (n, 1))
    X = np.empty((n, I))
    XHAT = np.empty((n, I))
    for i in range(I):
        h = _sigma(a)
        xhat = _sigma(h @ m.U[i] + m.b[i])
        XHAT[:, i] = xhat
        X[:, i] = (rng.random(n) < xhat).astype(np.float64)
        if i < I - 1:
            a = a + X[:, i, None] * m.W[i]
    return X, XHAT


@dataclass
class NadeGrads:
    dU: np.ndarray
    db: np.ndarray
    dW: np.ndarray
    dc: np.ndarray
    dx: np.ndarray  # (B, I), per sample
    # per-sample internals reused by the Hessian-vector pass
    delta: np.ndarray = field(default=None, repr=False)  # (B, I)
    dLda: np.ndarray = field(default=None, repr=False)  # (B, I, J)
    S: np.ndarray = field(default=None, repr=False)  # (B, I, J) reverse tail sums

    def param_list(self):
        return [self.dU, self.db, self.dW, self.dc]


def _tail_sums(D):
    # S[:, i, :] = sum over i' > i of D[:, i', :]
    S = np.flip(np.cumsum(np.flip(D, axis=1), axis=1), axis=1) - D
    return S


def grad_log_prob(m: NadeModel, x=None, trace: NadeTrace = None, weights=None):
    """Gradient of sum_s w_s * L(x_s) for all parameter blocks (summed over
    the batch) and the inputs (per sample). weights default to 1."""
    if trace is None:
        _, trace = forward(m, x)
    X, H, Z, XHAT = trace.X, trace.H, trace.Z, trace.XHAT
    B, I, J = H.shape
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)

    delta = (X - XHAT) * w[:, None]  # (B, I): dL/db per sample, weighted
    dU = np.einsum("bi,bij->ij", delta, H)
    db = delta.sum(axis=0)
    dLda = delta[:, :, None] * m.U[None, :, :] * H * (1.0 - H)
    S = _tail_sums(dLda)
    dc = dLda.sum(axis=(0, 1))
    if I > 1:
        dW = np.einsum("bkj,bk->kj", S[:, : I - 1, :], X[:, : I - 1])
    else:
        dW = np.zeros((0, J))
    dx = w[:, None] * Z
    if I > 1:
        dx[:, : I - 1] += np.einsum("bij,ij->bi", S[:, : I - 1, :], m.W)
    return NadeGrads(dU=dU, db=db, dW=dW, dc=dc, dx=dx, delta=delta, dLda=dLda, S=S)


@dataclass
class NadeDirection:
    """Direction blocks for the Hessian-vector product; None means zero."""

    vU: np.ndarray = None
    vb: np.ndarray = None
    vW: np.ndarray = None
    vc: np.ndarray = None
    vx: np.ndarray = None  # (B, I) or (I,), per sample


def hvp_log_prob(m: NadeModel, v: NadeDirection, x=None, trace=None, grads=None):
    """Hessian-vector product of sum_s L(x_s) over the joint (theta, x).

    Parameter rows come back batch-summed, input rows per sample. ``grads``
    must be unweighted if supplied.
    """
    if trace is None:
        _, trace = forward(m, x)
    if grads is None:
        grads = grad_log_prob(m, trace=trace)
    X, H, Z, XHAT = trace.X, trace.H, trace.Z, trace.XHAT
    B, I, J = H.shape

    vx = None
    if v.vx is not None:
        vx = np.atleast_2d(np.asarray(v.vx, dtype=np.float64))
        if vx.shape[0] == 1 and B > 1:
            vx = np.broadcast_to(vx, (B, I))

    # forward R phase
    Ra = np.tile(v.vc, (B, 1)) if v.vc is not None else np.zeros((B, J))
    RH = np.empty((B, I, J))
    RZ = np.empty((B, I))
    for i in range(I):
        h = H[:, i, :]
        rh = h * (1.0 - h) * Ra
        RH[:, i, :] = rh
        rz = rh @ m.U[i]
        if v.vU is not None:
            rz = rz + h @ v.vU[i]
        if v.vb is not None:
            rz = rz + v.vb[i]
        RZ[:, i] = rz
        if i < I - 1:
            if v.vW is not None:
                Ra = Ra + X[:, i, None] * v.vW[i]
            if vx is not None:
                Ra = Ra + vx[:, i, None] * m.W[i]
    RXHAT = XHAT * (1.0 - XHAT) * RZ

    # backward R phase
    Rdelta = -RXHAT if vx is None else vx - RXHAT  # R{dL/db} per sample
    RdU = np.einsum("bi,bij->ij", Rdelta, H) + np.einsum("bi,bij->ij", grads.delta, RH)
    Rdb = Rdelta.sum(axis=0)

    du = grads.delta[:, :, None] * H  # per-sample dL/dU
    Rdu = Rdelta[:, :, None] * H + grads.delta[:, :, None] * RH
    RdLda = Rdu * m.U[None] * (1.0 - H) - du * m.U[None] * RH
    if v.vU is not None:
        RdLda = RdLda + du * v.vU[None] * (1.0 - H)
    RS = _tail_sums(RdLda)
    Rdc = RdLda.sum(axis=(0, 1))

    if I > 1:
        RdW = np.einsum("bkj,bk->kj", RS[:, : I - 1, :], X[:, : I - 1])
        if vx is not None:
            RdW = RdW + np.einsum("bkj,bk->kj", grads.S[:, : I - 1, :], vx[:, : I - 1])
    else:
        RdW = np.zeros((0, J))

    Rdx = RZ.copy()
    if I > 1:
        Rdx[:, : I - 1] += np.einsum("bij,ij->bi", RS[:, : I - 1, :], m.W)
        if v.vW is not None:
            Rdx[:, : I - 1] += np.einsum("bij,ij->bi", grads.S[:, : I - 1, :], v.vW)
    return NadeGrads(dU=RdU, db=Rdb, dW=RdW, dc=Rdc, dx=Rdx)


def conditionals(m: NadeModel, x):
    """p(x_i = 1 | x_<i) along the given vector(s), model order."""
    _, trace = forward(m, x, keep_trace=True, validate=True)
    xhat = trace.XHAT
    return xhat[0] if np.asarray(x).ndim == 1 else xhat


def train_mle(
    m: NadeModel,
    source,
    n_iters: int,
    batch_size: int,
    update_rule=None,
    log_every: int = 200,
    metric_fn=None,
    rng=None,
):
    """Maximum-likelihood training on binary data in model order.

    ``source`` is either an (N, I) array (sampled without replacement) or an
    object with next_batch(size). Returns (model, trace records).
    """
    from . import dataio, optim

    if isinstance(source, np.ndarray):
        if rng is None:
            raise ValueError("array source requires an rng for shuffling")
        source = dataio.ResampleWithout(source, rng)
    if update_rule is None:
        update_rule = optim.Adadelta.for_params(m.params())

    model = m.copy()

    def grad_fn(params, t):
        model.set_params(params)
        batch = source.next_batch(batch_size)
        L, trace = forward(model, batch)
        g = grad_log_prob(model, trace=trace)
        scale = -1.0 / batch.shape[0]  # minimize the negative mean
        return -float(L.mean()), [scale * arr for arr in g.param_list()]

    result = optim.sgd_train(
        model.params(),
        grad_fn,
        update_rule,
        n_iters=n_iters,
        batch_size=batch_size,
        log_every=log_every,
        metric_fn=(lambda params: metric_fn(_with_params(model, params)))
        if metric_fn
        else None,
    )
    model.set_params(result.params)
    return model, result.trace


def _with_params(model, params):
    model.set_params(params)
    return model


def save_nade(path, m: NadeModel, meta=None):
    from . import serialize

    serialize.save_arrays(
        path,
        "nade",
        dict(meta or {}),
        {"U": m.U, "b": m.b, "W": m.W, "c": m.c, "ordering": m.ordering},
    )


def load_nade(path) -> NadeModel:
    from . import serialize

    _, _, arrays = serialize.load_arrays(path, expect_kind="nade")
    return NadeModel(
        U=arrays["U"], b=arrays["b"], W=arrays["W"], c=arrays["c"], ordering=arrays["ordering"]
    )
