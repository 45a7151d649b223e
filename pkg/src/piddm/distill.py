"""One-step distillation of a velocity teacher with a residual penalty.

The teacher supplies deterministic (noise, sample) couplings by Euler
integration; the student maps noise straight to a sample and is trained on
the regression error plus the residual of its own output.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamNet, backward, forward
from .diffusion import NfeCounter, TeacherModel, VelocityField, fm_loss, train_velocity_model
from .fields import RngSource
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


def fingerprint(model) -> str:
    """Short content hash identifying a teacher."""
    fp = getattr(model, "fingerprint", None)
    if isinstance(fp, str):
        return fp
    net = getattr(model, "net", None)
    if net is None:
        return type(model).__name__
    h = hashlib.sha256(net.params.tobytes())
    h.update(",".join(map(str, net.layer_sizes)).encode())
    return h.hexdigest()[:16]


@dataclass
class PairDataset:
    eps: np.ndarray
    x0: np.ndarray
    teacher: str = ""
    n_steps: int = 0
    nfe: int = 0
    n_resampled: int = 0

    def __post_init__(self):
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=float))
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        if self.eps.shape != self.x0.shape:
            raise ValueError("noise and sample arrays must have the same shape")
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("pair samples must be finite")

    def __len__(self):
        return self.eps.shape[0]

    @property
    def width(self) -> int:
        return self.eps.shape[1]


def _integrate(model, eps, n_steps):
    x = np.array(eps, dtype=float)
    dt = 1.0 / n_steps
    with np.errstate(all="ignore"):
        for k in range(n_steps, 0, -1):
            x = x - model.velocity(x, k / n_steps) * dt
    return x


def generate_pairs(teacher: VelocityField, n_pairs: int, n_steps: int = 100,
                   rng: RngSource | None = None, chunk: int = 8192, max_retries: int = 10) -> PairDataset:
    """Deterministic couplings ``(eps, euler_sample(teacher, eps))``.

    Rows whose trajectory turns non-finite are redrawn.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    rng = rng or RngSource(0)
    width = teacher.width
    eps = rng.normal((n_pairs, width))
    x0 = np.empty_like(eps)
    for lo in range(0, n_pairs, chunk):
        x0[lo : lo + chunk] = _integrate(teacher, eps[lo : lo + chunk], n_steps)
    nfe = n_pairs * n_steps
    resampled = 0
    for _ in range(max_retries):
        bad = ~np.all(np.isfinite(x0), axis=1)
        if not bad.any():
            break
        resampled += int(bad.sum())
        eps[bad] = rng.normal((int(bad.sum()), width))
        x0[bad] = _integrate(teacher, eps[bad], n_steps)
        nfe += int(bad.sum()) * n_steps
    else:
        raise FloatingPointError("teacher keeps producing non-finite samples")
    if resampled:
        log.warning("%d non-finite teacher samples redrawn", resampled)
    log.info("generated %d pairs, %d network evaluations", n_pairs, nfe)
    return PairDataset(eps, x0, fingerprint(teacher), n_steps, nfe, resampled)


class StudentModel:
    """Time-free network ``eps -> x0``; one network evaluation per sample."""

    def __init__(self, net: ParamNet):
        if net.time_pairs:
            raise ValueError("student networks take no time input")
        if net.in_width != net.out_width:
            raise ValueError("student input and output widths must match")
        self.net = net
        self.history: dict = {}

    @classmethod
    def create(cls, width, rng, hidden=(256, 256), activation="relu"):
        return cls(ParamNet.init([width, *hidden, width], rng, activation))

    @property
    def width(self) -> int:
        return self.net.in_width

    def forward_tape(self, eps):
        return forward(self.net, eps)

    def __call__(self, eps, counter: NfeCounter | None = None):
        if counter is not None:
            counter.add()
        return forward(self.net, eps)[0]

    def copy(self) -> "StudentModel":
        return StudentModel(self.net.copy())


def distill_loss(student: StudentModel, eps, x0, residual_op, lam: float, return_parts=False):
    """``mean_b ||d(eps) - x0||^2 + lam * mean_b ||R(d(eps))||^2`` and its parameter gradient."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    E = np.atleast_2d(np.asarray(eps, dtype=float))
    X0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if E.shape[0] == 0:
        raise ValueError("empty batch")
    n = E.shape[0]
    out, tape = student.forward_tape(E)
    diff = out - X0
    reg = float(np.sum(diff * diff) / n)
    up = 2.0 * diff / n
    phys = 0.0
    if residual_op is not None and lam > 0:
        vals, G = residual_op.value_and_grad(out)
        phys = float(np.mean(vals))
        up = up + lam * G / n
    elif residual_op is not None:
        phys = float(np.mean(residual_op.norm(out)))
    grad = backward(tape, up, need_input=False)[0]
    loss = reg + lam * phys
    if return_parts:
        return loss, grad, {"regression": reg, "physics": phys}
    return loss, grad


@dataclass
class DistillConfig:
    lam: float = 1.0
    epochs: int = 200
    refresh_interval: int = 100      # epochs between pair-pool refreshes
    pairs_per_refresh: int = 1024
    batch_size: int = 128
    lr: float = 1e-3
    n_steps: int = 100               # teacher Euler steps for pair generation
    hidden: tuple = (256, 256)
    activation: str = "relu"
    early_stop: bool = True
    tol: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.refresh_interval < 1:
            raise ValueError("epochs must be non-negative; batch size and refresh interval positive")
        if self.pairs_per_refresh < 1:
            raise ValueError("pairs_per_refresh must be positive")


class DistillDiverged(FloatingPointError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def train_student(teacher: VelocityField | None, residual_op, config: DistillConfig,
                  rng: RngSource | None = None, student: StudentModel | None = None,
                  pairs: PairDataset | None = None) -> StudentModel:
    """Adam-train a one-step student with periodic replacement of the pair pool.

    One epoch is one pass over the current pool. Every ``refresh_interval``
    epochs the pool is replaced by fresh couplings from the teacher (when a
    teacher is given). Training stops early once the mean regression loss of
    a refresh window improves on the previous window by less than
    ``config.tol`` (relative). Per-iteration losses end up in
    ``student.history``.
    """
    rng = rng or RngSource(0)
    if student is None:
        if teacher is None and pairs is None:
            raise ValueError("need a teacher or a pair dataset")
        width = pairs.width if pairs is not None else teacher.width
        student = StudentModel.create(width, rng.child("init"), config.hidden, config.activation)
    pair_rng = rng.child("pairs")
    batch_rng = rng.child("batches")
    history = {"regression": [], "physics": [], "refreshes": 0, "pair_nfe": 0, "epochs": 0,
               "stopped_early": False}
    student.history = history
    if config.epochs == 0:
        return student
    if pairs is None:
        pairs = generate_pairs(teacher, config.pairs_per_refresh, config.n_steps, pair_rng)
        history["pair_nfe"] += pairs.nfe
    state = AdamState(lr=config.lr)
    params = student.net.params
    prev_window = None
    window = []
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.refresh_interval == 0:
            cur = float(np.mean(window))
            if (config.early_stop and prev_window is not None
                    and (prev_window - cur) / max(prev_window, 1e-300) < config.tol):
                history["stopped_early"] = True
                log.info("early stop at epoch %d (regression %.3g -> %.3g)", epoch, prev_window, cur)
                break
            prev_window, window = cur, []
            if teacher is not None:
                pairs = generate_pairs(teacher, config.pairs_per_refresh, config.n_steps, pair_rng)
                history["pair_nfe"] += pairs.nfe
                history["refreshes"] += 1
        order = batch_rng.permutation(len(pairs))
        for lo in range(0, len(pairs), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grad, parts = distill_loss(student, pairs.eps[idx], pairs.x0[idx], residual_op,
                                             config.lam, return_parts=True)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DistillDiverged(f"distillation diverged at epoch {epoch}", history)
            params = adam_step(state, params, grad)
            student.net.params = params
            history["regression"].append(parts["regression"])
            history["physics"].append(parts["physics"])
            window.append(parts["regression"])
        history["epochs"] = epoch + 1
    return student


@dataclass
class ReflowConfig:
    iters: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    hidden: tuple = (256, 256)
    activation: str = "relu"
    time_pairs: int = 16


def coupled_fm_loss(model: TeacherModel, eps, x0, rng: RngSource, t=None, return_parts=False):
    """Flow-matching loss on fixed couplings (rectified-flow objective)."""
    return fm_loss(model, x0, rng, t=t, eps=np.atleast_2d(eps), return_parts=return_parts)


def reflow(pairs: PairDataset, config: ReflowConfig | None = None, rng: RngSource | None = None,
           model: TeacherModel | None = None) -> TeacherModel:
    """Train a velocity model on the fixed couplings of ``pairs``.

    ``model`` (copied, not modified) sets the starting point; otherwise a
    fresh network is initialised.
    """
    if len(pairs) == 0:
        raise ValueError("empty pair dataset")
    config = config or ReflowConfig()
    rng = rng or RngSource(0)
    if model is None:
        model = TeacherModel.create(pairs.width, rng.child("init"), config.hidden,
                                    activation=config.activation, time_pairs=config.time_pairs)
    else:
        model = model.copy()

    def loss_fn(m, idx, r):
        return coupled_fm_loss(m, pairs.eps[idx], pairs.x0[idx], r, return_parts=True)

    model, trace = train_velocity_model(model, pairs.x0, config.iters, config.batch_size, config.lr,
                                        rng.child("train"), loss_fn)
    model.trace = trace
    return model
