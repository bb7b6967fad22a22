"""Ensemble-to-network compression: teacher averaging, value-matching and
derivative-matching losses, the training driver and classifier evaluation.

Both losses work in the log domain: teacher members carry softmax heads for
prediction, and the student uses a log-softmax head. The derivative loss
penalizes the mismatch of input-derivatives of the log outputs and its
parameter gradient is assembled from one Hessian-vector pass per output, so
its per-sample cost is about 2*I backprops for I outputs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nncore, optim

DSE_MAX_OUTPUTS = 10  # per-sample cost scales with the output count


@dataclass
class EnsembleTeacher:
    members: list  # Networks with identical softmax output dim

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty ensemble")
        dims = {m.output_dim for m in self.members}
        if len(dims) != 1:
            raise ValueError("ensemble members disagree on class count")

    @property
    def n_classes(self):
        return self.members[0].output_dim

    def predict(self, X, workers=None):
        """Averaged class probabilities t(x), shape (B, n_classes)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if workers and workers > 1 and len(self.members) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(lambda m: _member_probs(m, X), self.members))
        else:
            outs = [_member_probs(m, X) for m in self.members]
        return np.mean(outs, axis=0)

    def grad_log_predict(self, X):
        """(t(x), G) with G[b, i, :] = d log t_i / dx at sample b.

        The average of member probabilities is differentiated by the
        quotient rule: d log t_i/dx = (sum_n d t_i^(n)/dx) / (sum_n t_i^(n)).
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        B, d = X.shape
        I = self.n_classes
        prob_sum = np.zeros((B, I))
        grad_sum = np.zeros((B, I, d))
        for member in self.members:
            trace = nncore.forward(member, X)
            probs = trace.xs[-1]
            prob_sum += probs
            for i in range(I):
                seed = np.zeros((B, I))
                seed[:, i] = 1.0
                g = nncore.backprop(member, trace, seed)
                grad_sum[:, i, :] += g.dx
        t = prob_sum / len(self.members)
        return t, grad_sum / prob_sum[:, :, None]


def _member_probs(member, X):
    probs = nncore.forward(member, X).xs[-1]
    if member.layers[-1].nonlinearity == "logsoftmax":
        probs = np.exp(probs)
    return probs


def _require_logsoftmax(student):
    if student.layers[-1].nonlinearity != "logsoftmax":
        raise ValueError("compression losses expect a log-softmax student head")


def ce_loss_and_grad(student: nncore.Network, X, T):
    """Cross entropy -sum_i t_i log f_i, averaged over the batch.

    Returns (loss, param grads). T rows must lie on the simplex.
    """
    _require_logsoftmax(student)
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if np.any(T < -1e-12) or np.abs(T.sum(axis=1) - 1.0).max() > 1e-8:
        raise ValueError("teacher targets must lie on the probability simplex")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    trace = nncore.forward(student, X)
    log_f = trace.xs[-1]
    E, dEdy = nncore.output_fn("dot", log_f, T)  # E = sum t_i log f_i
    grads = nncore.backprop(student, trace, -dEdy / B)
    loss = -float(E.mean())
    return loss, _param_grads(grads)


def dse_loss_and_grad(student: nncore.Network, X, teacher_grad_log):
    """Derivative square error in the log domain, averaged over the batch.

    E(x) = (1/2I) sum_i ||d log f_i/dx - d log t_i/dx||^2. The parameter
    gradient of each term is the mixed Hessian of log f_i applied to the
    residual direction, obtained from one R pass per output.
    """
    _require_logsoftmax(student)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    I = student.output_dim
    if I > DSE_MAX_OUTPUTS:
        raise ValueError(
            f"derivative matching is guarded to <= {DSE_MAX_OUTPUTS} outputs (got {I})"
        )
    teacher_grad_log = np.asarray(teacher_grad_log, dtype=np.float64)
    if teacher_grad_log.shape != (B, I, X.shape[1]):
        raise ValueError("teacher gradient block has wrong shape")

    trace = nncore.forward(student, X)
    loss = 0.0
    total = None
    for i in range(I):
        seed = np.zeros((B, I))
        seed[:, i] = 1.0  # dot-product functional selecting log f_i
        grads_i = nncore.backprop(student, trace, seed)
        resid = grads_i.dx - teacher_grad_log[:, i, :]  # (B, d)
        loss += 0.5 * float((resid * resid).sum())
        v = nncore.RDirection(vx=resid)
        rtrace = nncore.r_forward(student, trace, v)
        hv = nncore.r_backprop(student, trace, grads_i, rtrace, v, np.zeros((B, I)))
        blocks = _param_grads(hv)
        total = blocks if total is None else [a + b for a, b in zip(total, blocks)]
    scale = 1.0 / (I * B)
    return loss * scale, [scale * g for g in total]


def _param_grads(grads: nncore.Gradients):
    out = []
    for W, b in zip(grads.dW, grads.db):
        out.append(W)
        out.append(b)
    return out


@dataclass
class DistillSpec:
    """Declarative description of one compression run."""

    student_arch: str
    loss: str  # 'ce' | 'dse'
    generator: object  # has next_batch(size)
    n_iters: int
    batch_size: int = 20
    seed: int = 0
    log_every: int = 200
    eval_set: object = None  # optional labeled Dataset for the metric trace


@dataclass
class CompressionResult:
    student: nncore.Network
    trace: list = field(default_factory=list)
    teacher_queries: int = 0  # budget measure: teacher evaluations consumed


def compress(teacher: EnsembleTeacher, spec: DistillSpec) -> CompressionResult:
    """Train a student against the teacher per the spec; returns the student
    plus the periodic loss/accuracy trace."""
    rng = np.random.default_rng(spec.seed)
    student = nncore.network_from_arch(spec.student_arch, rng)
    if spec.loss not in ("ce", "dse"):
        raise ValueError(f"unknown compression loss {spec.loss!r}")
    update = optim.Adadelta.for_params(student.params())

    def grad_fn(params, t):
        student.set_params(params)
        X = spec.generator.next_batch(spec.batch_size)
        if spec.loss == "ce":
            T = teacher.predict(X)
            return ce_loss_and_grad(student, X, T)
        _, G = teacher.grad_log_predict(X)
        return dse_loss_and_grad(student, X, G)

    metric_fn = None
    if spec.eval_set is not None:

        def metric_fn(params):
            student.set_params(params)
            acc, _, _, _ = evaluate_classifier(student, spec.eval_set)
            return acc

    result = optim.sgd_train(
        student.params(),
        grad_fn,
        update,
        n_iters=spec.n_iters,
        batch_size=spec.batch_size,
        log_every=spec.log_every,
        metric_fn=metric_fn,
    )
    student.set_params(result.params)
    return CompressionResult(
        student=student,
        trace=result.trace,
        teacher_queries=spec.n_iters * spec.batch_size,
    )


def class_log_probs(model, X):
    """(B, n_classes) log probabilities from a Network or EnsembleTeacher."""
    if isinstance(model, EnsembleTeacher):
        return np.log(np.clip(model.predict(X), 1e-300, None))
    trace = nncore.forward(model, X)
    out = trace.xs[-1]
    if model.layers[-1].nonlinearity == "softmax":
        return np.log(np.clip(out, 1e-300, None))
    if model.layers[-1].nonlinearity == "logsoftmax":
        return out
    raise ValueError("classifier head must be softmax or log-softmax")


def evaluate_classifier(model, dataset):
    """(accuracy %, mean log prob, 2-SE accuracy bar, 2-SE log-prob bar)."""
    if dataset.labels is None or len(dataset) == 0:
        raise ValueError("evaluation needs a non-empty labeled dataset")
    lp = class_log_probs(model, dataset.images)
    pred = lp.argmax(axis=1)
    correct = (pred == dataset.labels).astype(np.float64)
    picked = lp[np.arange(len(dataset)), dataset.labels]
    n = len(dataset)
    acc = 100.0 * correct.mean()
    acc_se2 = 2.0 * 100.0 * np.sqrt(correct.var() / n)
    mlp = float(picked.mean())
    mlp_se2 = 2.0 * float(picked.std() / np.sqrt(n))
    return acc, mlp, acc_se2, mlp_se2


def paired_difference(model_a, model_b, dataset):
    """Per-example differences (a minus b) in accuracy [%] and log prob,
    each with a 2-SE bar."""
    lp_a = class_log_probs(model_a, dataset.images)
    lp_b = class_log_probs(model_b, dataset.images)
    idx = np.arange(len(dataset))
    correct_a = (lp_a.argmax(axis=1) == dataset.labels).astype(np.float64)
    correct_b = (lp_b.argmax(axis=1) == dataset.labels).astype(np.float64)
    d_acc = 100.0 * (correct_a - correct_b)
    d_lp = lp_a[idx, dataset.labels] - lp_b[idx, dataset.labels]
    n = len(dataset)
    return (
        float(d_acc.mean()),
        2.0 * float(d_acc.std() / np.sqrt(n)),
        float(d_lp.mean()),
        2.0 * float(d_lp.std() / np.sqrt(n)),
    )


def train_classifier_on_data(
    arch: str,
    dataset,
    n_epochs: int,
    batch_size: int = 20,
    seed: int = 0,
    log_every: int = 500,
):
    """Supervised baseline/ensemble-member training: cross entropy on true
    labels, sampling without replacement, ADADELTA."""
    from . import dataio

    rng = np.random.default_rng(seed)
    net = nncore.network_from_arch(arch, rng)
    if net.layers[-1].nonlinearity not in ("softmax", "logsoftmax"):
        raise ValueError("classifier head must be softmax or log-softmax")
    # train with a log-softmax head regardless; restore afterwards
    head = net.layers[-1].nonlinearity
    net.layers[-1].nonlinearity = "logsoftmax"
    onehot = np.eye(net.output_dim)[dataset.labels]
    order = dataio.ResampleWithout(
        np.concatenate([dataset.images, onehot], axis=1), rng
    )
    d = dataset.images.shape[1]
    update = optim.Adadelta.for_params(net.params())
    n_iters = max(1, (len(dataset) * n_epochs) // batch_size)

    def grad_fn(params, t):
        net.set_params(params)
        batch = order.next_batch(batch_size)
        return ce_loss_and_grad(net, batch[:, :d], batch[:, d:])

    result = optim.sgd_train(
        net.params(), grad_fn, update, n_iters=n_iters, batch_size=batch_size,
        log_every=log_every,
    )
    net.set_params(result.params)
    net.layers[-1].nonlinearity = head
    return net, result.trace


def train_ensemble(
    arch: str,
    dataset,
    n_members: int,
    n_epochs: int = 20,
    batch_size: int = 20,
    seed: int = 0,
) -> EnsembleTeacher:
    """Bootstrap-resampled members trained on true labels (the canned
    teacher recipe: each member sees its own resample of the train set)."""
    rng = np.random.default_rng(seed)
    members = []
    for k in range(n_members):
        idx = rng.integers(0, len(dataset), size=len(dataset))
        boot = dataset.subset(idx)
        member, _ = train_classifier_on_data(
            arch, boot, n_epochs, batch_size=batch_size, seed=int(rng.integers(2**31))
        )
        members.append(member)
    return EnsembleTeacher(members=members)
