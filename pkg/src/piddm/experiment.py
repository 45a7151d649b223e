"""Desk-scale experiment harness.

An :class:`ExperimentConfig` is a flat INI file with one section per stage.
``run_experiment`` trains (or loads) a teacher, distills a student, runs the
selected methods on the selected tasks and writes a metric CSV, sample PFD
files and loss traces. All randomness comes from the run seed through named
sub-streams.

``training_gap`` and ``distill_tradeoff`` are the two training-side studies:
the diffusion-loss penalty of residual-augmented training, and the
regression/residual trade-off of the distillation weight.
"""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .baselines import ObservationObjective, sample_dps, sample_eci, train_pidm
from .diffusion import (DiffusionSchedule, NfeCounter, TeacherModel, TrainingDiverged, euler_sample,
                        train_teacher)
from .distill import DistillConfig, StudentModel, train_student
from .fields import GridSpec, Layout, RngSource, stack
from .inference import TaskSpec, make_mask, solve_conditional
from .io import write_samples
from .metrics import MetricRecord, block_mse, mmse, pde_error, smse, write_records
from .pde import DatasetSpec, generate_dataset, operator_for_dataset

log = logging.getLogger(__name__)

# key -> INI section
SECTIONS = {
    "kind": "data", "n_x": "data", "n_t": "data", "n_train": "data", "n_reference": "data",
    "schedule": "model", "hidden": "model",
    "teacher_iters": "teacher", "batch_size": "teacher", "lr": "teacher", "pidm_lam": "teacher",
    "teacher_path": "teacher",
    "lam_train": "distill", "epochs": "distill", "refresh_interval": "distill",
    "pairs_per_refresh": "distill", "n_steps": "distill", "student_path": "distill",
    "infer_lam": "inference", "infer_iters": "inference", "optimizer": "inference",
    "restarts": "inference", "n_tasks": "inference", "samples_per_task": "inference",
    "mask_rate": "inference",
    "methods": "baselines", "tasks": "baselines", "dps_weights": "baselines", "n_eval": "baselines",
    "seeds": "run", "out_dir": "run", "timing": "run",
}

ALL_METHODS = ("vanilla", "dps", "eci", "piddm")


@dataclass
class ExperimentConfig:
    kind: str = "stokes"
    n_x: int = 16
    n_t: int = 16
    n_train: int = 1000
    n_reference: int = 512
    schedule: str = "linear"
    hidden: tuple = (256, 256)
    teacher_iters: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    pidm_lam: float = 10.0
    teacher_path: str = ""
    lam_train: float = 10.0
    epochs: int = 600
    refresh_interval: int = 50
    pairs_per_refresh: int = 1024
    n_steps: int = 100
    student_path: str = ""
    infer_lam: float = 100.0
    infer_iters: int = 80
    optimizer: str = "lbfgs"
    restarts: int = 4
    n_tasks: int = 4
    samples_per_task: int = 4
    mask_rate: float = 0.2
    methods: tuple = ALL_METHODS
    tasks: tuple = ("simulate", "forward", "inverse", "reconstruct")
    dps_weights: tuple = (1e-3, 1e-2)
    n_eval: int = 512
    seeds: tuple = (0,)
    out_dir: str = "runs"
    timing: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.methods = tuple(self.methods)
        self.tasks = tuple(self.tasks)
        self.dps_weights = tuple(float(w) for w in self.dps_weights)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        bad = set(self.methods) - set(ALL_METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        for p in (self.teacher_path, self.student_path):
            if p and not Path(p).exists():
                raise FileNotFoundError(p)

    @property
    def grid(self) -> GridSpec:
        if self.kind == "heat":
            return GridSpec(self.n_x, self.n_t, 2 * np.pi, 1.0)
        return GridSpec(self.n_x, self.n_t, 1.0, 1.0)

    def distill_config(self, lam=None) -> DistillConfig:
        return DistillConfig(lam=self.lam_train if lam is None else lam, epochs=self.epochs,
                             refresh_interval=self.refresh_interval,
                             pairs_per_refresh=self.pairs_per_refresh, batch_size=self.batch_size,
                             lr=self.lr, n_steps=self.n_steps, hidden=self.hidden, early_stop=False)

    # -- INI round trip

    def to_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        for f in fields(self):
            sec = SECTIONS[f.name]
            if not cp.has_section(sec):
                cp.add_section(sec)
            v = getattr(self, f.name)
            cp.set(sec, f.name, ", ".join(map(str, v)) if isinstance(v, tuple) else str(v))
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def from_ini(cls, path, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        kw = {}
        defaults = cls()
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                if key not in SECTIONS:
                    raise ValueError(f"{path}: unknown key {key!r} in [{sec}]")
                kw[key] = _coerce(getattr(defaults, key), raw)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def _coerce(default, raw: str):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        typ = type(default[0]) if default else str
        return tuple(typ(s) for s in items)
    return type(default)(raw)


# ------------------------------------------------------------------ stages


def desk_data(cfg: ExperimentConfig, seed: int):
    """Training rows, held-out reference rows, residual operator and layout."""
    root = RngSource(seed)
    grid = cfg.grid
    d_seed = int(root.child("data").integers(0, 2**31))
    r_seed = int(root.child("reference").integers(0, 2**31))
    X = stack(generate_dataset(DatasetSpec(cfg.kind, cfg.n_train, grid, d_seed)))
    R = stack(generate_dataset(DatasetSpec(cfg.kind, cfg.n_reference, grid, r_seed)))
    op = operator_for_dataset(cfg.kind, grid)
    return X, R, op, op.layout


def fit_teacher(cfg: ExperimentConfig, X, seed: int, lam: float = 0.0, op=None):
    """Vanilla (``lam == 0``) or residual-augmented teacher; returns ``(model, trace)``."""
    root = RngSource(seed)
    model = TeacherModel.create(X.shape[1], root.child("init"), cfg.hidden, cfg.schedule)
    if lam > 0:
        return train_pidm(model, X, op, lam, cfg.teacher_iters, cfg.batch_size, cfg.lr,
                          root.child("train"))
    return train_teacher(model, X, cfg.teacher_iters, cfg.batch_size, cfg.lr, root.child("train"))


def training_gap(cfg: ExperimentConfig, seeds=None, window: int = 1000) -> dict:
    """Final-window mean diffusion loss of vanilla vs residual-augmented training.

    Both runs share data, initialisation, batches and optimizer settings.
    """
    rows = []
    for seed in seeds or cfg.seeds:
        X, _, op, _ = desk_data(cfg, seed)
        _, tv = fit_teacher(cfg, X, seed)
        _, tp = fit_teacher(cfg, X, seed, cfg.pidm_lam, op)
        a, b = float(np.mean(tv[-window:])), float(np.mean(tp[-window:]))
        rows.append({"seed": seed, "vanilla": a, "pidm": b, "ratio": b / a,
                     "trace_vanilla": tv, "trace_pidm": tp})
    return {"rows": rows, "median_ratio": float(np.median([r["ratio"] for r in rows]))}


def distill_tradeoff(cfg: ExperimentConfig, lams=(0.0, 1.0, 10.0, 100.0), seeds=None,
                     keep_models=False) -> dict:
    """Student residual and regression error against the distillation weight.

    For each seed a vanilla teacher is trained; students with each weight
    are evaluated on the same held-out noise against the teacher's Euler
    samples from that noise.
    """
    per_seed = []
    models = {}
    for seed in seeds or cfg.seeds:
        X, _, op, _ = desk_data(cfg, seed)
        teacher, _ = fit_teacher(cfg, X, seed)
        E = RngSource(seed).child("eval").normal((cfg.n_eval, X.shape[1]))
        ref = euler_sample(teacher, E, cfg.n_steps)
        row = {"seed": seed, "vanilla_pde": pde_error(op, ref), "pde": {}, "mse": {}}
        for lam in lams:
            s = train_student(teacher, op, cfg.distill_config(lam), RngSource(seed).child("distill"))
            D = s(E)
            row["pde"][lam] = pde_error(op, D)
            row["mse"][lam] = float(np.mean(np.sum((D - ref) ** 2, axis=1)))
            if keep_models:
                models[(seed, lam)] = s
        if keep_models:
            models[(seed, "teacher")] = teacher
        per_seed.append(row)
    med = lambda key, lam: float(np.median([r[key][lam] for r in per_seed]))
    out = {
        "rows": per_seed,
        "lams": tuple(lams),
        "pde": [med("pde", l) for l in lams],
        "mse": [med("mse", l) for l in lams],
        "vanilla_pde": float(np.median([r["vanilla_pde"] for r in per_seed])),
    }
    if keep_models:
        out["models"] = models
    return out


# ------------------------------------------------------------ method runs


@dataclass
class MethodRun:
    samples: np.ndarray
    nfe: int
    exact: bool | None = None


def _dps_best(teacher, eps, n_steps, obs, mask, op, lam, weights):
    """DPS over a weight sweep; keeps the run with the lowest guidance objective.

    The reported NFE covers the whole sweep.
    """
    obj = ObservationObjective(obs, mask, op, lam)
    best = None
    c = NfeCounter()
    for w in weights:
        with np.errstate(all="ignore"):
            x = sample_dps(teacher, eps, n_steps, obj, w, c)
        if not np.all(np.isfinite(x)):
            continue
        score = float(np.mean(obj.value_and_grad(x)[0]))
        if np.isfinite(score) and (best is None or score < best[0]):
            best = (score, x)
    if best is None:
        raise FloatingPointError("DPS diverged for every weight")
    return MethodRun(best[1], c.count)


def run_method(method, task, teacher, student, op, layout, obs, mask, eps, cfg, rng):
    if task == "simulate":
        obs = mask = None
    c = NfeCounter()
    if method == "vanilla":
        return MethodRun(euler_sample(teacher, eps, cfg.n_steps, c), c.count)
    if method == "eci":
        x = sample_eci(teacher, eps, cfg.n_steps, obs, mask, c)
        exact = None if mask is None else bool(np.array_equal(x * mask, np.broadcast_to(obs * mask, x.shape)))
        return MethodRun(x, c.count, exact)
    if method == "dps":
        m = np.zeros(layout.width) if mask is None else mask
        o = np.zeros(layout.width) if obs is None else obs
        return _dps_best(teacher, eps, cfg.n_steps, o, m, op, 1.0, cfg.dps_weights)
    if method == "piddm":
        if mask is None:
            return MethodRun(student(eps, c), c.count)
        spec = TaskSpec(task, obs, mask, cfg.infer_lam, cfg.infer_iters, cfg.optimizer,
                        restarts=cfg.restarts)
        x = solve_conditional(student, spec, op, rng, eps.shape[0], c, eps_init=eps)
        exact = bool(np.array_equal(x * mask, np.broadcast_to(obs * mask, x.shape)))
        return MethodRun(x, c.count, exact)
    raise ValueError(f"unknown method {method!r}")


def _record(method, task, X, ref, op, layout, nfe, seed, wall):
    u = layout.u_slice
    if ref.shape[0] < 2:
        # a single ground truth: zero-spread reference
        ref = np.repeat(ref, 2, axis=0)
    return MetricRecord(method, task, mmse(X, ref), smse(X, ref), mmse(X[:, u], ref[:, u]),
                        smse(X[:, u], ref[:, u]), pde_error(op, X),
                        block_mse(X, ref[:1]) if task != "simulate" else mmse(X, ref), nfe, seed, wall)


def _load_or_train(cfg, X, seed, op):
    if cfg.teacher_path:
        net, _ = load_checkpoint(cfg.teacher_path)
        teacher, trace = TeacherModel(net, DiffusionSchedule(cfg.schedule)), []
    else:
        teacher, trace = fit_teacher(cfg, X, seed)
    student = None
    if "piddm" in cfg.methods:
        if cfg.student_path:
            student = StudentModel(load_checkpoint(cfg.student_path)[0])
        else:
            student = train_student(teacher, op, cfg.distill_config(), RngSource(seed).child("distill"))
    return teacher, trace, student


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Run every (seed, task, method) cell; returns ``(records, info)``.

    A failing method is logged and listed in ``info["failures"]``; the other
    methods still run. ``info["exact"]`` collects the hard-constraint checks.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, failures, exact = [], [], []
    for seed in cfg.seeds:
        X, R, op, layout = desk_data(cfg, seed)
        teacher, trace, student = _load_or_train(cfg, X, seed, op)
        save_checkpoint(out / f"teacher_s{seed}.pck", teacher.net)
        if student is not None:
            save_checkpoint(out / f"student_s{seed}.pck", student.net)
        _write_trace(out / f"teacher_trace_s{seed}.csv", trace)
        eval_rng = RngSource(seed).child("eval")
        for task in cfg.tasks:
            if task == "simulate":
                cells = [(None, None, R, eval_rng.child("simulate").normal((cfg.n_eval, layout.width)))]
            else:
                cells = []
                for k in range(min(cfg.n_tasks, R.shape[0])):
                    truth = R[k]
                    mask = make_mask(task, layout, eval_rng.child(f"{task}-mask-{k}"), cfg.mask_rate)
                    eps = eval_rng.child(f"{task}-eps-{k}").normal((cfg.samples_per_task, layout.width))
                    cells.append((truth * mask, mask, truth[None, :], eps))
            for method in cfg.methods:
                t0 = time.perf_counter()
                try:
                    runs = [run_method(method, task, teacher, student, op, layout, obs, mask, eps, cfg,
                                       eval_rng.child(f"{method}-{task}-{k}"))
                            for k, (obs, mask, _, eps) in enumerate(cells)]
                    wall = time.perf_counter() - t0 if cfg.timing else 0.0
                    recs = [_record(method, task, r.samples, ref, op, layout, r.nfe, seed, wall)
                            for r, (_, _, ref, _) in zip(runs, cells)]
                except (FloatingPointError, TrainingDiverged, ValueError) as exc:
                    log.error("%s/%s seed %d failed: %s", method, task, seed, exc)
                    failures.append((seed, task, method, str(exc)))
                    continue
                rec = _average(recs)
                records.append(rec)
                exact += [(seed, task, method, r.exact) for r in runs if r.exact is not None]
                write_samples(out / f"{method}_{task}_s{seed}.pfd",
                              np.concatenate([r.samples for r in runs]), layout)
    write_records(out / "metrics.csv", records)
    return records, {"failures": failures, "exact": exact, "out_dir": out}


def _average(recs):
    """One record per (method, task): metrics averaged over problem instances, NFE summed."""
    if len(recs) == 1:
        return recs[0]
    d = asdict(recs[0])
    for k in ("mmse", "smse", "mmse_u", "smse_u", "pde_error", "mse"):
        d[k] = float(np.mean([getattr(r, k) for r in recs]))
    d["nfe"] = int(sum(r.nfe for r in recs))
    return MetricRecord(**d)


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def median_by_method(records, task) -> dict:
    by = {}
    for r in records:
        if r.task == task:
            by.setdefault(r.method, []).append(r.pde_error)
    return {m: float(np.median(v)) for m, v in by.items()}
