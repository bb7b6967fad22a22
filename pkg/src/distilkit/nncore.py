"""Feedforward networks with exact gradients and Hessian-vector products.

Everything here operates on batches: inputs are (B, d) float64 arrays and a
single vector can be passed as shape (d,) (it is promoted to a batch of one).
Weight matrices are stored (out, in), row-major. Three passes are provided:

* ``forward``      -- layer outputs and pre-activations,
* ``backprop``     -- first derivatives of a scalar functional of the output
                      with respect to every weight, bias and the input,
* ``r_forward``/``r_backprop`` -- the same equations pushed through the
  directional-derivative operator, yielding Hessian-vector products in one
  extra forward/backward sweep instead of quadratic-cost Hessian assembly.

Parameter gradients are accumulated (summed) over the batch; input gradients
are kept per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

SIGMOID_CLAMP = 1e-12  # output values only; pre-activations are stored raw

ELEMENTWISE = {"linear", "relu", "logistic", "probit"}
LAYERWIDE = {"softmax", "logsoftmax"}
NONLINEARITIES = ELEMENTWISE | LAYERWIDE


class ShapeError(ValueError):
    """Input dimensions do not match the network or trace."""


# ---------------------------------------------------------------------------
# nonlinearities


def _phi_value(kind, z):
    if kind == "linear":
        return z.copy()
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "logistic":
        return np.clip(expit(z), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    if kind == "probit":
        return np.clip(ndtr(z), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    if kind == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    if kind == "logsoftmax":
        zs = z - z.max(axis=1, keepdims=True)
        return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown nonlinearity {kind!r}")


def _phi_deriv(kind, x, z):
    # diagonal of the Jacobian; elementwise kinds only
    if kind == "linear":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(np.float64)  # subgradient at 0 fixed to 0
    if kind == "logistic":
        return x * (1.0 - x)
    if kind == "probit":
        return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    raise ValueError(f"{kind!r} is not elementwise")


def _phi_r_deriv(kind, x, z, rx):
    # directional derivative of the diagonal Jacobian, in terms of R{x}
    if kind in ("linear", "relu"):
        return np.zeros_like(z)
    if kind == "logistic":
        return rx * (1.0 - 2.0 * x)
    if kind == "probit":
        return -z * rx
    raise ValueError(f"{kind!r} is not elementwise")


def _phi_backward(kind, gx, x, z):
    """Map dE/dx of a layer to dE/db (= dE/dz)."""
    if kind in ELEMENTWISE:
        return gx * _phi_deriv(kind, x, z)
    if kind == "softmax":
        dot = (gx * x).sum(axis=1, keepdims=True)
        return x * (gx - dot)
    if kind == "logsoftmax":
        p = np.exp(x)
        return gx - p * gx.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def _phi_r_value(kind, x, z, rz):
    """Map R{z} to R{x}."""
    if kind in ELEMENTWISE:
        return _phi_deriv(kind, x, z) * rz
    if kind == "softmax":
        dot = (x * rz).sum(axis=1, keepdims=True)
        return x * (rz - dot)
    if kind == "logsoftmax":
        p = np.exp(x)
        return rz - (p * rz).sum(axis=1, keepdims=True)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def _phi_r_backward(kind, gx, rgx, x, z, rx, rz):
    """Map (dE/dx, R{dE/dx}) to R{dE/db} via the product rule."""
    if kind in ELEMENTWISE:
        d = _phi_deriv(kind, x, z)
        rd = _phi_r_deriv(kind, x, z, rx)
        return rgx * d + gx * rd
    if kind == "softmax":
        dot = (gx * x).sum(axis=1, keepdims=True)
        rdot = (rgx * x).sum(axis=1, keepdims=True) + (gx * rx).sum(
            axis=1, keepdims=True
        )
        return rx * (gx - dot) + x * (rgx - rdot)
    if kind == "logsoftmax":
        p = np.exp(x)
        rp = p * rx
        gsum = gx.sum(axis=1, keepdims=True)
        rgsum = rgx.sum(axis=1, keepdims=True)
        return rgx - rp * gsum - p * rgsum
    raise ValueError(f"unknown nonlinearity {kind!r}")


# ---------------------------------------------------------------------------
# network definition


@dataclass
class LayerSpec:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    nonlinearity: str

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("weight/bias shapes inconsistent")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("non-finite parameters")


class Network:
    """Ordered layers with chained dimensions; immutable during evaluation."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.W.shape[1] != prev.W.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.W.shape} -> {cur.W.shape}"
                )
        self.layers = layers

    @property
    def input_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].W.shape[0]

    def params(self):
        """Flat list [W0, b0, W1, b1, ...] referencing the live arrays."""
        out = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def set_params(self, params):
        for i, layer in enumerate(self.layers):
            layer.W = np.asarray(params[2 * i], dtype=np.float64)
            layer.b = np.asarray(params[2 * i + 1], dtype=np.float64)

    def copy(self):
        return Network(
            [LayerSpec(l.W.copy(), l.b.copy(), l.nonlinearity) for l in self.layers]
        )

    def output(self, x):
        """Convenience: final-layer output only."""
        return forward(self, x).output


@dataclass
class ForwardTrace:
    xs: list  # layer outputs, xs[0] is the input, length L+1
    zs: list  # pre-activations, length L
    single: bool  # input arrived as a single vector

    @property
    def output(self):
        y = self.xs[-1]
        return y[0] if self.single else y


@dataclass
class Gradients:
    dW: list
    db: list
    dx: np.ndarray  # per sample
    deltas: list = field(default_factory=list, repr=False)  # per-sample dE/db
    gxs: list = field(default_factory=list, repr=False)  # per-sample dE/dx^(l)


@dataclass
class RDirection:
    """Direction v, partitioned into parameter blocks and an input block.

    Either side may be None, meaning all-zero (the common cases: pure
    parameter curvature, or the mixed input/parameter blocks used by
    derivative matching).
    """

    vW: list | None = None
    vb: list | None = None
    vx: np.ndarray | None = None


@dataclass
class RTrace:
    rxs: list
    rzs: list


def _as_batch(x, dim, what="input"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} has shape {x.shape}, expected (*, {dim})")
    return x, single


# ---------------------------------------------------------------------------
# the four passes


def forward(net: Network, x) -> ForwardTrace:
    x, single = _as_batch(x, net.input_dim)
    xs = [x]
    zs = []
    for layer in net.layers:
        z = xs[-1] @ layer.W.T + layer.b
        zs.append(z)
        xs.append(_phi_value(layer.nonlinearity, z))
    return ForwardTrace(xs=xs, zs=zs, single=single)


def backprop(net: Network, trace: ForwardTrace, dE_dy) -> Gradients:
    B = trace.xs[0].shape[0]
    gx, _ = _as_batch(dE_dy, net.output_dim, "dE_dy")
    if gx.shape[0] == 1 and B > 1:
        gx = np.broadcast_to(gx, (B, gx.shape[1])).copy()
    if gx.shape[0] != B:
        raise ShapeError("dE_dy batch size does not match trace")
    L = len(net.layers)
    dW = [None] * L
    db = [None] * L
    deltas = [None] * L
    gxs = [None] * (L + 1)
    gxs[L] = gx
    for l in range(L - 1, -1, -1):
        layer = net.layers[l]
        delta = _phi_backward(layer.nonlinearity, gxs[l + 1], trace.xs[l + 1], trace.zs[l])
        deltas[l] = delta
        dW[l] = delta.T @ trace.xs[l]
        db[l] = delta.sum(axis=0)
        gxs[l] = delta @ layer.W
    return Gradients(dW=dW, db=db, dx=gxs[0], deltas=deltas, gxs=gxs)


def r_forward(net: Network, trace: ForwardTrace, v: RDirection) -> RTrace:
    B = trace.xs[0].shape[0]
    if v.vx is None:
        rx = np.zeros_like(trace.xs[0])
    else:
        rx, _ = _as_batch(v.vx, net.input_dim, "v_x")
        if rx.shape[0] == 1 and B > 1:
            rx = np.broadcast_to(rx, (B, rx.shape[1])).copy()
        if rx.shape[0] != B:
            raise ShapeError("v_x batch size does not match trace")
    rxs = [rx]
    rzs = []
    for l, layer in enumerate(net.layers):
        rz = rxs[-1] @ layer.W.T
        if v.vW is not None:
            rz = rz + trace.xs[l] @ v.vW[l].T
        if v.vb is not None:
            rz = rz + v.vb[l]
        rzs.append(rz)
        rxs.append(_phi_r_value(layer.nonlinearity, trace.xs[l + 1], trace.zs[l], rz))
    return RTrace(rxs=rxs, rzs=rzs)


def r_backprop(
    net: Network,
    trace: ForwardTrace,
    grads: Gradients,
    rtrace: RTrace,
    v: RDirection,
    r_dE_dy,
) -> Gradients:
    """Backward phase of the Hessian-vector pass; returns the H.v blocks.

    The returned object mirrors ``Gradients``: dW/db hold the parameter rows
    of H.v (batch-summed), dx holds the per-sample input rows.
    """
    if not grads.deltas:
        raise ShapeError("grads must come from backprop on the same trace")
    B = trace.xs[0].shape[0]
    rgx, _ = _as_batch(r_dE_dy, net.output_dim, "r_dE_dy")
    if rgx.shape[0] == 1 and B > 1:
        rgx = np.broadcast_to(rgx, (B, rgx.shape[1])).copy()
    if rgx.shape[0] != B:
        raise ShapeError("r_dE_dy batch size does not match trace")
    L = len(net.layers)
    rdW = [None] * L
    rdb = [None] * L
    for l in range(L - 1, -1, -1):
        layer = net.layers[l]
        rdelta = _phi_r_backward(
            layer.nonlinearity,
            grads.gxs[l + 1],
            rgx,
            trace.xs[l + 1],
            trace.zs[l],
            rtrace.rxs[l + 1],
            rtrace.rzs[l],
        )
        delta = grads.deltas[l]
        rdW[l] = rdelta.T @ trace.xs[l] + delta.T @ rtrace.rxs[l]
        rdb[l] = rdelta.sum(axis=0)
        rgx = rdelta @ layer.W
        if v.vW is not None:
            rgx = rgx + delta @ v.vW[l]
    return Gradients(dW=rdW, db=rdb, dx=rgx)


# ---------------------------------------------------------------------------
# output functions: E(y), dE/dy and R{dE/dy}

OUTPUT_FUNCTIONS = ("square_error", "cross_entropy", "binary_ce", "dot")


def output_fn(kind, y, t):
    """Scalar functional of the network output, with its first derivative.

    Returns (E, dE_dy): E has shape (B,), dE_dy matches y. Sign conventions
    follow the definitions (square error is a loss to minimize; cross
    entropy, binary cross entropy and dot product are fit measures --
    callers that minimize must negate).
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    t = np.broadcast_to(t, y.shape)
    if kind == "square_error":
        diff = y - t
        return 0.5 * (diff * diff).sum(axis=1), diff
    if kind == "cross_entropy":
        if np.any(y <= 0.0) or np.any(y >= 1.0):
            raise ValueError("cross entropy requires outputs in (0, 1)")
        return (t * np.log(y)).sum(axis=1), t / y
    if kind == "binary_ce":
        if np.any(y <= 0.0) or np.any(y >= 1.0):
            raise ValueError("binary cross entropy requires outputs in (0, 1)")
        E = (t * np.log(y) + (1.0 - t) * np.log(1.0 - y)).sum(axis=1)
        return E, t / y - (1.0 - t) / (1.0 - y)
    if kind == "dot":
        return (t * y).sum(axis=1), t.copy()
    raise ValueError(f"unknown output function {kind!r}")


def output_fn_r(kind, y, t, ry):
    """R{dE/dy} for the output functions, given R{y}."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    ry = np.atleast_2d(np.asarray(ry, dtype=np.float64))
    t = np.broadcast_to(np.atleast_2d(np.asarray(t, dtype=np.float64)), y.shape)
    if kind == "square_error":
        return ry.copy()
    if kind == "cross_entropy":
        return -(t / (y * y)) * ry
    if kind == "binary_ce":
        return -(t / (y * y) + (1.0 - t) / ((1.0 - y) ** 2)) * ry
    if kind == "dot":
        return np.zeros_like(y)
    raise ValueError(f"unknown output function {kind!r}")


# ---------------------------------------------------------------------------
# construction and serialization


def parse_architecture(spec: str):
    """Parse e.g. '784-relu-50-relu-30-logsoftmax-10' into (dims, nonlins)."""
    tokens = spec.split("-")
    if len(tokens) < 3 or len(tokens) % 2 == 0:
        raise ValueError(f"malformed architecture string {spec!r}")
    try:
        dims = [int(tokens[0])]
    except ValueError:
        raise ValueError(f"architecture must start with the input dim: {spec!r}")
    nonlins = []
    for i in range(1, len(tokens), 2):
        tag = tokens[i]
        if tag not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {tag!r} in {spec!r}")
        nonlins.append(tag)
        dims.append(int(tokens[i + 1]))
    return dims, nonlins


def init_network(dims, nonlins, rng: np.random.Generator) -> Network:
    """Uniform +/- sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(dims) != len(nonlins) + 1:
        raise ValueError("need one nonlinearity per layer")
    layers = []
    for fan_in, fan_out, tag in zip(dims, dims[1:], nonlins):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(LayerSpec(W=W, b=np.zeros(fan_out), nonlinearity=tag))
    return Network(layers)


def network_from_arch(spec: str, rng: np.random.Generator) -> Network:
    dims, nonlins = parse_architecture(spec)
    return init_network(dims, nonlins, rng)


def save_network(path, net: Network, meta: dict | None = None) -> None:
    from . import serialize

    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"W{i}"] = layer.W
        arrays[f"b{i}"] = layer.b
    full_meta = dict(meta or {})
    full_meta["nonlinearities"] = [l.nonlinearity for l in net.layers]
    serialize.save_arrays(path, "network", full_meta, arrays)


def load_network(path) -> Network:
    from . import serialize

    _, meta, arrays = serialize.load_arrays(path, expect_kind="network")
    tags = meta["nonlinearities"]
    layers = [
        LayerSpec(W=arrays[f"W{i}"], b=arrays[f"b{i}"], nonlinearity=tag)
        for i, tag in enumerate(tags)
    ]
    return Network(layers)
