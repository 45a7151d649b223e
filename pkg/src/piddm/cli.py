"""Command-line entry point: ``piddm <verb> [flags]``.

Relative output paths resolve against ``$PIDDM_OUT`` when it is set. The
exit code is 0 only when every requested stage succeeds.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .autodiff import load_checkpoint, save_checkpoint
from .baselines import GuidanceConfig, guided_sample, train_pidm
from .diffusion import DiffusionSchedule, NfeCounter, TeacherModel, train_teacher
from .distill import DistillConfig, StudentModel, train_student
from .experiment import ExperimentConfig, run_experiment
from .fields import GridSpec, Layout, RngSource, stack
from .inference import TASKS, TaskSpec, make_mask, refine_noise, solve_conditional
from .metrics import MetricRecord, markdown_table, pde_error, read_records, write_records
from .pde import COEFFICIENT_RANGES, DatasetSpec, generate_dataset, operator_for_dataset

log = logging.getLogger("piddm")

OUT_ENV = "PIDDM_OUT"


def _out(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _grid_meta(grid: GridSpec) -> dict:
    return {"n_x": grid.n_x, "n_t": grid.n_t, "extent_x": repr(grid.extent_x),
            "extent_t": repr(grid.extent_t)}


def _grid_from_meta(meta) -> GridSpec:
    return GridSpec(int(meta["n_x"]), int(meta["n_t"]), float(meta["extent_x"]), float(meta["extent_t"]))


def _load_model(path):
    """Teacher or student from a checkpoint, plus its metadata."""
    net, meta = load_checkpoint(path)
    if net.time_pairs:
        return TeacherModel(net, DiffusionSchedule(meta.get("schedule", "linear"))), meta
    return StudentModel(net), meta


def _op_from_meta(meta):
    kind = meta.get("kind")
    if kind is None or "n_x" not in meta:
        return None
    return operator_for_dataset(kind, _grid_from_meta(meta))


def _write_rows(path, header, rows):
    with open(_out(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ verbs


def cmd_gen_data(a):
    lo_hi = COEFFICIENT_RANGES.get(a.kind)
    extent_x = 2 * math.pi if a.kind == "heat" else 1.0
    grid = GridSpec(a.n_x, a.n_t, extent_x, 1.0)
    samples = generate_dataset(DatasetSpec(a.kind, a.n, grid, a.seed, lo_hi))
    X = stack(samples)
    pfd, man = io.save_dataset(_out(a.out), X, samples[0].layout, X[:, -1], a.seed)
    print(f"wrote {pfd} and {man} ({X.shape[0]} samples)")


def cmd_train_teacher(a):
    X, layout = io.read_samples(a.data)
    grid = layout.grid
    rng = RngSource(a.seed)
    model = TeacherModel.create(X.shape[1], rng.child("init"), tuple(a.hidden), a.schedule)
    if a.lam > 0:
        op = operator_for_dataset(a.kind, grid)
        model, trace = train_pidm(model, X, op, a.lam, a.iters, a.batch_size, a.lr, rng.child("train"))
    else:
        model, trace = train_teacher(model, X, a.iters, a.batch_size, a.lr, rng.child("train"))
    out = _out(a.out)
    save_checkpoint(out, model.net, schedule=a.schedule, kind=a.kind, **_grid_meta(grid))
    _write_rows(out.with_suffix(".trace.csv"), ["iteration", "loss"],
                [(i, repr(float(v))) for i, v in enumerate(trace)])
    print(f"wrote {out}; final loss {trace[-1] if trace else float('nan'):.4g}")


def cmd_distill(a):
    teacher, meta = _load_model(a.teacher)
    if not isinstance(teacher, TeacherModel):
        raise ValueError(f"{a.teacher} is not a teacher checkpoint")
    op = _op_from_meta(meta)
    cfg = DistillConfig(lam=a.lam_train, epochs=a.epochs, refresh_interval=a.refresh_interval,
                        pairs_per_refresh=a.pairs_per_refresh, batch_size=a.batch_size, lr=a.lr,
                        n_steps=a.n_steps, hidden=tuple(a.hidden), early_stop=not a.no_early_stop)
    student = train_student(teacher, op, cfg, RngSource(a.seed))
    out = _out(a.out)
    save_checkpoint(out, student.net, **{k: v for k, v in meta.items() if k != "schedule"})
    h = student.history
    _write_rows(out.with_suffix(".trace.csv"), ["iteration", "regression", "physics"],
                [(i, repr(r), repr(p)) for i, (r, p) in enumerate(zip(h["regression"], h["physics"]))])
    print(f"wrote {out}; {h['epochs']} epochs, {h['refreshes']} refreshes, pair NFE {h['pair_nfe']}")


def cmd_sample(a):
    model, meta = _load_model(a.model)
    op = _op_from_meta(meta)
    grid = _grid_from_meta(meta)
    layout = Layout(grid, "scalar", 1) if model.width == grid.size + 1 else Layout(grid, "field")
    eps = RngSource(a.seed).child("sample").normal((a.n, model.width))
    counter = NfeCounter()
    if isinstance(model, StudentModel):
        if a.refine:
            x = refine_noise(model, eps, op, a.refine, a.refine_lr, counter=counter)
        else:
            x = model(eps, counter)
        method = "piddm"
    else:
        method = a.method
        cfg = GuidanceConfig(method, a.weight, a.dflow_iters, a.steps)
        x = guided_sample(model, eps, cfg, op, 1.0, counter)
    out = _out(a.out)
    io.write_samples(out, x, layout)
    res = pde_error(op, x) if op is not None else float("nan")
    _write_rows(out.with_suffix(".csv"), ["method", "nfe", "residual"], [(method, counter.count, repr(res))])
    print(f"wrote {out}; method {method}, NFE {counter.count}, residual {res:.4g}")


def cmd_solve(a):
    model, meta = _load_model(a.student)
    if not isinstance(model, StudentModel):
        raise ValueError(f"{a.student} is not a student checkpoint")
    op = _op_from_meta(meta)
    obs, layout = io.read_samples(a.observation)
    if a.mask:
        mask = io.read_samples(a.mask)[0]
    else:
        rng = RngSource(a.seed).child("mask")
        mask = np.stack([make_mask(a.task, layout, rng, a.mask_rate) for _ in range(obs.shape[0])])
    mask = np.broadcast_to(mask, obs.shape)
    rng = RngSource(a.seed)
    counter = NfeCounter()
    xs, records = [], []
    for k in range(obs.shape[0]):
        spec = TaskSpec(a.task, obs[k], mask[k], a.lam, a.iters, a.optimizer, restarts=a.restarts)
        x = solve_conditional(model, spec, op, rng.child(k), a.n_samples, counter)
        xs.append(x)
        res = pde_error(op, x)
        err = float(np.sum(((x - obs[k]) * mask[k]) ** 2))
        records.append((k, a.task, repr(res), repr(err)))
    out = _out(a.out)
    io.write_samples(out, np.concatenate(xs), layout)
    _write_rows(out.with_suffix(".csv"), ["index", "task", "pde_error", "observed_sq_error"], records)
    print(f"wrote {out}; NFE {counter.count}")


def cmd_jensen(a):
    from . import jensen

    if a.which == "gap":
        sched = DiffusionSchedule(a.schedule)
        spec = jensen.latent_line_spec()
        rep = jensen.gap_metrics(spec, sched, a.weight, np.linspace(0.05, 0.95, a.n_t), a.points,
                                 RngSource(a.seed))
        _write_rows(Path(a.out_dir) / f"gap_{a.schedule}.csv", ["t", "mae", "angular"], rep.rows())
        x, _ = jensen.sample_dps_mog(spec, a.points, RngSource(a.seed).child("dps"), a.weight)
        for c in (0, 1):
            _write_rows(Path(a.out_dir) / f"dps_hist_x{c + 1}.csv", ["lo", "hi", "density"],
                        jensen.histogram_rows(x[:, c], 60, (-2.0, 2.0)))
        for t, m, g in rep.rows():
            print(f"t={t:.2f} mae={m:.4g} angular={g:.4g}")
        return
    cfg = jensen.CorrelatedMoGConfig(epochs=a.epochs, seed=a.seed)
    rep = jensen.correlated_mog_pipeline(cfg)
    rows = [(name, s["deviation_std"], s["violation_rate"], s["ks_x1"], rep["nfe"][name])
            for name, s in rep["methods"].items()]
    _write_rows(Path(a.out_dir) / "correlated_mog.csv",
                ["method", "deviation_std", "violation_rate", "ks_x1", "nfe"], rows)
    for name, h in rep["histograms"].items():
        for key, hr in h.items():
            _write_rows(Path(a.out_dir) / f"hist_{name}_{key}.csv", ["lo", "hi", "density"], hr)
    for r in rows:
        print("%-10s std=%.3g violations=%.3f ks=%.3g nfe=%d" % r)
    if rep["errors"]:
        raise RuntimeError(f"stages failed: {rep['errors']}")


def cmd_eval(a):
    over = {k: getattr(a, k) for k in ("seeds", "out_dir", "methods", "tasks") if getattr(a, k)}
    cfg = ExperimentConfig.from_ini(a.config, **over) if a.config else ExperimentConfig(**over)
    out = _out(Path(cfg.out_dir) / "metrics.csv").parent
    records, info = run_experiment(cfg, out)
    print(markdown_table(records, ["method", "task", "mmse", "smse", "pde_error", "mse", "nfe", "seed"]))
    bad = [e for e in info["exact"] if not e[3]]
    if bad:
        log.error("hard-constraint check failed for %s", bad)
    if info["failures"] or bad:
        raise RuntimeError(f"{len(info['failures'])} method runs failed")


def cmd_report(a):
    records = []
    for p in a.metrics:
        records += read_records(p)
    text = markdown_table(records, a.columns)
    if a.out:
        _out(a.out).write_text(text + "\n")
    print(text)
    if a.svg:
        _plot(records, _out(a.svg))


def _plot(records: list[MetricRecord], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = sorted({r.task for r in records})
    methods = sorted({r.method for r in records})
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(tasks), 3))
    w = 0.8 / max(len(methods), 1)
    for i, m in enumerate(methods):
        vals = [np.median([r.pde_error for r in records if r.method == m and r.task == t] or [np.nan])
                for t in tasks]
        ax.bar(np.arange(len(tasks)) + i * w, vals, w, label=m)
    ax.set_xticks(np.arange(len(tasks)) + 0.4 - w / 2, tasks)
    ax.set_yscale("log")
    ax.set_ylabel("PDE error")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="piddm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="closed-form PDE dataset")
    g.add_argument("--kind", default="stokes", choices=sorted(COEFFICIENT_RANGES))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--n-x", type=int, default=16)
    g.add_argument("--n-t", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data/stokes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="flow-matching teacher (PIDM with --lam > 0)")
    t.add_argument("--data", required=True)
    t.add_argument("--kind", default="stokes")
    t.add_argument("--iters", type=int, default=3000)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--hidden", type=int, nargs="+", default=[256, 256])
    t.add_argument("--schedule", default="linear", choices=["linear", "vp", "subvp"])
    t.add_argument("--lam", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="teacher.pck")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="one-step student from a teacher checkpoint")
    d.add_argument("--teacher", required=True)
    d.add_argument("--lam-train", type=float, default=10.0)
    d.add_argument("--epochs", type=int, default=600)
    d.add_argument("--refresh-interval", type=int, default=50)
    d.add_argument("--pairs-per-refresh", type=int, default=1024)
    d.add_argument("--batch-size", type=int, default=128)
    d.add_argument("--lr", type=float, default=1e-3)
    d.add_argument("--n-steps", type=int, default=100)
    d.add_argument("--hidden", type=int, nargs="+", default=[256, 256])
    d.add_argument("--no-early-stop", action="store_true")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="student.pck")
    d.set_defaults(func=cmd_distill)

    s = sub.add_parser("sample", help="unconditional samples from a teacher or student")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--method", default="vanilla", choices=["vanilla", "dps", "eci", "dflow"])
    s.add_argument("--weight", type=float, default=0.0)
    s.add_argument("--dflow-iters", type=int, default=0)
    s.add_argument("--refine", type=int, default=0, help="noise-refinement steps (students)")
    s.add_argument("--refine-lr", type=float, default=1e-2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.pfd")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("solve", help="conditional inference with a student")
    v.add_argument("--student", required=True)
    v.add_argument("--task", required=True, choices=[t for t in TASKS if t != "simulate"])
    v.add_argument("--observation", required=True)
    v.add_argument("--mask")
    v.add_argument("--mask-rate", type=float, default=0.2)
    v.add_argument("--lam", type=float, default=100.0)
    v.add_argument("--iters", type=int, default=80)
    v.add_argument("--optimizer", default="lbfgs", choices=["lbfgs", "gd"])
    v.add_argument("--restarts", type=int, default=1)
    v.add_argument("--n-samples", type=int, default=1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="solution.pfd")
    v.set_defaults(func=cmd_solve)

    j = sub.add_parser("jensen", help="mixture-of-Gaussians studies")
    j.add_argument("which", choices=["gap", "mog"])
    j.add_argument("--schedule", default="linear", choices=["linear", "vp", "subvp"])
    j.add_argument("--weight", type=float, default=0.035)
    j.add_argument("--n-t", type=int, default=19)
    j.add_argument("--points", type=int, default=2000)
    j.add_argument("--epochs", type=int, default=400)
    j.add_argument("--seed", type=int, default=0)
    j.add_argument("--out-dir", default="jensen")
    j.set_defaults(func=cmd_jensen)

    e = sub.add_parser("eval", help="run an experiment config")
    e.add_argument("--config")
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--methods", nargs="+")
    e.add_argument("--tasks", nargs="+")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="metric CSV to Markdown (and optional SVG)")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--columns", nargs="+")
    r.add_argument("--out")
    r.add_argument("--svg")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        log.error("%s failed: %s", args.verb, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
