"""scikit-learn style wrappers around teacher training, distillation and inference.

These are thin: hyperparameters live in ``__init__`` (so ``get_params`` /
``clone`` work), fitted state ends with an underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .baselines import train_pidm
from .diffusion import NfeCounter, TeacherModel, euler_sample, train_teacher
from .distill import DistillConfig, StudentModel, train_student
from .fields import RngSource
from .inference import TaskSpec, refine_noise, solve_conditional


class FlowTeacher(BaseEstimator):
    """Velocity model trained by flow matching, optionally with a residual loss.

    Parameters
    ----------
    residual_op : ResidualOperator or None
        Needed only when ``lam > 0``.
    lam : float
        Weight of the posterior-mean residual term; 0 trains a vanilla model.
    """

    def __init__(self, residual_op=None, lam=0.0, hidden=(256, 256), schedule="linear",
                 iters=1000, batch_size=128, lr=1e-3, random_state=0):
        self.residual_op = residual_op
        self.lam = lam
        self.hidden = hidden
        self.schedule = schedule
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = RngSource(self.random_state)
        model = TeacherModel.create(X.shape[1], rng.child("init"), tuple(self.hidden), self.schedule)
        if self.lam > 0:
            if self.residual_op is None:
                raise ValueError("lam > 0 needs a residual operator")
            self.model_, self.trace_ = train_pidm(model, X, self.residual_op, self.lam, self.iters,
                                                  self.batch_size, self.lr, rng.child("train"))
        else:
            self.model_, self.trace_ = train_teacher(model, X, self.iters, self.batch_size,
                                                     self.lr, rng.child("train"))
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_samples=1, n_steps=100, random_state=None):
        check_is_fitted(self, "model_")
        rng = RngSource(self.random_state if random_state is None else random_state)
        eps = rng.child("sample").normal((n_samples, self.n_features_in_))
        self.counter_ = NfeCounter()
        return euler_sample(self.model_, eps, n_steps, self.counter_)


class OneStepStudent(BaseEstimator):
    """Distilled one-step generator.

    ``fit`` takes a fitted :class:`FlowTeacher` (or any velocity field) via
    the ``teacher`` parameter; ``X`` is ignored. ``predict`` maps noise to
    samples with one network evaluation.
    """

    def __init__(self, teacher=None, residual_op=None, lam=1.0, epochs=200, refresh_interval=100,
                 pairs_per_refresh=1024, batch_size=128, lr=1e-3, n_steps=100,
                 hidden=(256, 256), random_state=0):
        self.teacher = teacher
        self.residual_op = residual_op
        self.lam = lam
        self.epochs = epochs
        self.refresh_interval = refresh_interval
        self.pairs_per_refresh = pairs_per_refresh
        self.batch_size = batch_size
        self.lr = lr
        self.n_steps = n_steps
        self.hidden = hidden
        self.random_state = random_state

    def _velocity(self):
        t = self.teacher
        if isinstance(t, FlowTeacher):
            check_is_fitted(t, "model_")
            return t.model_
        if t is None:
            raise ValueError("a teacher is required")
        return t

    def fit(self, X=None, y=None):
        cfg = DistillConfig(self.lam, self.epochs, self.refresh_interval, self.pairs_per_refresh,
                            self.batch_size, self.lr, self.n_steps, tuple(self.hidden))
        teacher = self._velocity()
        self.student_ = train_student(teacher, self.residual_op, cfg, RngSource(self.random_state))
        self.n_features_in_ = self.student_.width
        return self

    def predict(self, eps):
        check_is_fitted(self, "student_")
        eps = check_array(eps, dtype=np.float64)
        return self.student_(eps)

    def sample(self, n_samples=1, refine_steps=0, refine_lr=1e-2, random_state=None):
        """Draw samples; ``refine_steps > 0`` runs noise refinement on the residual."""
        check_is_fitted(self, "student_")
        rng = RngSource(self.random_state if random_state is None else random_state)
        eps = rng.child("sample").normal((n_samples, self.n_features_in_))
        self.counter_ = NfeCounter()
        if refine_steps:
            return refine_noise(self.student_, eps, self.residual_op, refine_steps, refine_lr,
                                counter=self.counter_)
        return self.student_(eps, self.counter_)


class ConditionalSolver(BaseEstimator):
    """Noise-space solver for partially observed samples.

    ``predict(observations, mask)`` returns one completed sample per row of
    ``observations``; observed entries are copied through exactly.
    """

    def __init__(self, student=None, residual_op=None, lam=1.0, n_iters=80, optimizer="lbfgs",
                 lr=1.0, restarts=1, random_state=0):
        self.student = student
        self.residual_op = residual_op
        self.lam = lam
        self.n_iters = n_iters
        self.optimizer = optimizer
        self.lr = lr
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X=None, y=None):
        s = self.student
        if isinstance(s, OneStepStudent):
            check_is_fitted(s, "student_")
            s = s.student_
        if not isinstance(s, StudentModel):
            raise ValueError("student must be a StudentModel or a fitted OneStepStudent")
        self.student_ = s
        return self

    def predict(self, observations, mask):
        check_is_fitted(self, "student_")
        obs = check_array(observations, dtype=np.float64)
        mask = np.asarray(mask, dtype=float)
        rng = RngSource(self.random_state)
        self.counter_ = NfeCounter()
        out = []
        for i, row in enumerate(obs):
            m = mask[i] if mask.ndim == 2 else mask
            task = TaskSpec("reconstruct", row, m, self.lam, self.n_iters, self.optimizer, self.lr,
                            self.restarts)
            out.append(solve_conditional(self.student_, task, self.residual_op, rng.child(i),
                                         counter=self.counter_)[0])
        return np.stack(out)
