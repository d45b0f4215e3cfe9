"""Experiment runner: output directory management, CSVs, figures, manifests.

Every file is written atomically (temp file + rename); CSV contents are pure
functions of the configuration and master seed, so reruns are byte-identical.
Figures are rendered with matplotlib next to the delimited output.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
import time
from dataclasses import dataclass, field as dfield
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .envelope import convex_envelope, mc_subdiff_measure, subdiff_measure
from .environment import field_of, sample_realization, window_for
from .grid import Box, GridFunction, TriadicCube, load_gridfunction
from .homogenize import (BracketingError, ExperimentError, balance_constant,
                         effective_from_cell, error_rate_experiment,
                         variance_decay_experiment, _experiment_config)
from .mu import mu_estimate, mu_star_estimate
from .operators import SymMatrix
from .solver import BoundaryData


class OutputLockError(RuntimeError):
    pass


class RerunRefusedError(RuntimeError):
    pass


@dataclass
class RunRecord:
    run_id: str
    kind: str
    started: str = ""
    finished: str = ""
    statuses: list = dfield(default_factory=list)
    files: list = dfield(default_factory=list)
    partial_failures: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(data)
    os.replace(tmp, path)


def _csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _fig_to(path: Path, fig) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    fig.savefig(tmp, format=path.suffix.lstrip("."))
    plt.close(fig)
    os.replace(tmp, path)


class _Lock:
    def __init__(self, outdir: Path):
        self.path = outdir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockError(
                f"{self.path}: another run owns this output directory "
                "(remove the stale .lock if not)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def run_id_of(text: str, seed: int) -> str:
    return hashlib.sha256(f"{text}\nseed={seed}".encode()).hexdigest()[:12]


def run(config: ExperimentConfig, out: str | None = None,
        workers: int | None = None, seed: int | None = None,
        force: bool = False) -> RunRecord:
    """Execute the configured experiment and write its outputs atomically."""
    v = config.values
    seed = v["seed"] if seed is None else int(seed)
    workers = v["workers"] if workers is None else int(workers)
    outdir = Path(out if out is not None else v["dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    rid = run_id_of(config.text, seed)

    record_path = outdir / "run_record.json"
    if record_path.exists() and not force:
        try:
            old = json.loads(record_path.read_text())
        except json.JSONDecodeError:
            old = {}
        if old.get("run_id") == rid:
            raise RerunRefusedError(
                f"run {rid} already recorded in {outdir}; use --force to redo")

    rec = RunRecord(run_id=rid, kind=config.kind)
    rec.started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    ensemble = config.ensemble()

    with _Lock(outdir):
        t0 = time.perf_counter()
        if config.kind == "mu":
            files = _run_mu(config, ensemble, seed, workers, outdir, rec)
        elif config.kind == "mu-decay":
            files = _run_decay(config, ensemble, seed, workers, outdir, rec)
        elif config.kind == "effective":
            files = _run_effective(config, ensemble, seed, workers, outdir, rec)
        elif config.kind == "error-rate":
            files = _run_error_rate(config, ensemble, seed, workers, outdir, rec)
        else:  # pragma: no cover - parse() rejects unknown kinds
            raise ConfigError(f"kind: {config.kind}")
        wall = time.perf_counter() - t0
        rec.finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
        rec.files = sorted(str(f.name) for f in files) + ["manifest.txt", "run_record.json"]

        manifest = [
            f"run_id = {rid}",
            f"tool = homoglab {__version__}",
            f"kind = {config.kind}",
            f"seed = {seed}",
            f"workers = {workers}",
            f"started = {rec.started}",
            f"finished = {rec.finished}",
            f"wall_seconds = {wall:.3f}",
            f"outputs = {' '.join(rec.files)}",
            "",
            "--- configuration (verbatim) ---",
            config.text.rstrip("\n"),
            "",
        ]
        _atomic_write(outdir / "manifest.txt", "\n".join(manifest) + "\n")
        _atomic_write(record_path, rec.to_json() + "\n")
    return rec


# ---------------------------------------------------------------------------
# per-kind drivers
# ---------------------------------------------------------------------------

def _estimate_config(config: ExperimentConfig, ensemble):
    cfg = _experiment_config(ensemble, n=config.values["points"],
                             optimize=config.values["optimize"],
                             budget=config.values["budget"])
    cfg.solver_tol = config.values["solver_tol"]
    return cfg


def _run_mu(config, ensemble, seed, workers, outdir: Path, rec: RunRecord):
    v = config.values
    cfg = _estimate_config(config, ensemble)
    m = v["m"]
    cube = TriadicCube(m, (0,) * ensemble.d)
    lo, shape = window_for(cube.box())
    rows = []
    for s in v["s_list"]:
        for i in range(v["N"]):
            r = sample_realization(ensemble, (lo, shape), seed, i)
            f = field_of(r).translate(v["A"]).shift(float(s))
            try:
                est = mu_estimate(f, cube, cfg)
                star = mu_star_estimate(f, cube, cfg)
                rows.append((m, ":".join(str(k) for k in cube.k), float(s),
                             est.value, est.certificate_residual,
                             est.candidate, i))
                rows.append((m, ":".join(str(k) for k in cube.k), float(s),
                             star.value, star.certificate_residual,
                             "star:" + star.candidate, i))
                rec.statuses.append("ok")
            except Exception as exc:
                rec.statuses.append(f"{type(exc).__name__}: {exc}")
                rec.partial_failures += 1
    if rec.partial_failures > 0.1 * v["N"] * len(v["s_list"]):
        raise ExperimentError(
            f"{rec.partial_failures} of {v['N'] * len(v['s_list'])} "
            "realizations failed")
    path = outdir / "mu.csv"
    _csv(path, ["cube_m", "cube_k", "s", "value", "cert_resid", "method", "seed"],
         rows)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ss = sorted({r[2] for r in rows})
    for tag, sel in (("estimate", lambda r: not r[5].startswith("star:")),
                     ("star estimate", lambda r: r[5].startswith("star:"))):
        means = [np.mean([r[3] for r in rows if r[2] == s and sel(r)]) for s in ss]
        ax.plot(ss, means, "o-", label=tag)
    ax.set_xlabel("shift s")
    ax.set_ylabel("estimate")
    ax.legend()
    fig.tight_layout()
    fpath = outdir / "plot.svg"
    _fig_to(fpath, fig)
    return [path, fpath]


def _run_decay(config, ensemble, seed, workers, outdir: Path, rec: RunRecord):
    v = config.values
    cfg = _estimate_config(config, ensemble)
    res = variance_decay_experiment(
        ensemble, v["m_range"], v["N"], seed, cfg,
        balance_N=v["balance_N"], balance_tol=v["tol"], workers=workers)
    rec.statuses = [f"m={r.m}: {r.n_ok} ok" for r in res.rows]
    curve = outdir / "curve.csv"
    _csv(curve,
         ["m", "s", "N", "mean_mu", "mean_mustar", "m2_mu", "m2_mustar",
          "se_mu", "se_mustar", "se_m2_mu", "se_m2_mustar"],
         [(r.m, r.s, r.n_ok, r.mean_mu, r.mean_mustar, r.m2_mu, r.m2_mustar,
           r.se_mu, r.se_mustar, r.se_m2_mu, r.se_m2_mustar) for r in res.rows])
    fit = outdir / "fit.csv"
    _csv(fit, ["name", "value"],
         [("tau_hat", res.tau_hat), ("s_hat", res.s_hat),
          ("s_hat_m", res.s_hat_m),
          ("max_monotonicity_violation_se", res.max_monotonicity_violation_se)]
         + [(f"residual_m{r.m}", float(e)) for r, e in zip(res.rows, res.fit_residuals)])
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ms = [r.m for r in res.rows]
    totals = [max(r.total, 1e-300) for r in res.rows]
    ax.semilogy(ms, totals, "o-", label="second-moment sum")
    if res.tau_hat > 0:
        c0 = totals[0]
        ax.semilogy(ms, [c0 * res.tau_hat ** (m - ms[0]) for m in ms], "--",
                    label=f"geometric fit, ratio {res.tau_hat:.3f}")
    ax.set_xlabel("scale m")
    ax.set_ylabel("E[estimate^2] sum")
    ax.legend()
    fig.tight_layout()
    fpath = outdir / "plot.svg"
    _fig_to(fpath, fig)
    return [curve, fit, fpath]


def _run_effective(config, ensemble, seed, workers, outdir: Path, rec: RunRecord):
    v = config.values
    cfg = _estimate_config(config, ensemble)
    m = v["balance_m"] if v["balance_m"] is not None else v["m"]
    bal = balance_constant(ensemble, v["A"], m, v["N"], v["tol"], seed, cfg,
                           workers)
    cell = effective_from_cell(ensemble, v["A"], v["delta_schedule"], v["L"],
                               v["N"], seed, v["points_per_unit"],
                               workers=workers)
    rec.statuses = [f"balance evals: {len(bal.diagnostics['bracket_history'])}",
                    f"cell failures: {cell.diagnostics['n_fail']}"]
    rec.partial_failures = cell.diagnostics["n_fail"]
    eff = outdir / "effective.csv"
    _csv(eff, ["route", "value", "se"],
         [("balance", bal.s_hat, bal.s_hat_se),
          ("cell", cell.cell_hat, cell.cell_se)])
    hist = outdir / "history.csv"
    _csv(hist, ["s", "g", "se"],
         [(h["s"], h["g"], h["se"]) for h in bal.diagnostics["bracket_history"]])
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
    hs = sorted(bal.diagnostics["bracket_history"], key=lambda h: h["s"])
    axes[0].errorbar([h["s"] for h in hs], [h["g"] for h in hs],
                     yerr=[h["se"] for h in hs], fmt="o-")
    axes[0].axhline(0.0, color="k", lw=0.5)
    axes[0].axvline(bal.s_hat, color="r", lw=0.8)
    axes[0].set_xlabel("shift s")
    axes[0].set_ylabel("balance gap")
    sched = cell.diagnostics["delta_schedule"]
    for vals in cell.diagnostics["delta_values"][:24]:
        axes[1].plot(sched, [-x for x in vals], "-", alpha=0.3, color="tab:blue")
    axes[1].axhline(cell.cell_hat, color="r", lw=0.8)
    axes[1].set_xlabel("damping delta")
    axes[1].set_ylabel("-delta w(0)")
    fig.tight_layout()
    fpath = outdir / "plot.svg"
    _fig_to(fpath, fig)
    return [eff, hist, fpath]


def _run_error_rate(config, ensemble, seed, workers, outdir: Path,
                    rec: RunRecord):
    v = config.values
    domain = Box((-0.5, -0.5), 1.0)
    res = error_rate_experiment(ensemble, domain, v["f"], BoundaryData.zero(),
                                v["eps_list"], v["N"], seed,
                                v["points_per_cell"], workers=workers,
                                solver_tol=v["solver_tol"])
    rec.statuses = [f"eps={e}: {len(res.gaps[e])} gaps" for e in res.eps_list]
    gaps = outdir / "gaps.csv"
    rows = [(e, i, g) for e in res.eps_list
            for i, g in enumerate(res.gaps[e])]
    _csv(gaps, ["eps", "realization", "gap"], rows)
    fit = outdir / "fit.csv"
    _csv(fit, ["name", "value"],
         [("alpha_hat", res.alpha_hat)]
         + [(f"median_eps_{e}", res.medians[e]) for e in res.eps_list])
    fig, ax = plt.subplots(figsize=(5, 3.4))
    es = res.eps_list
    med = [max(res.medians[e], 1e-300) for e in es]
    ax.loglog(es, med, "o-", label="median sup-norm gap")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("gap")
    ax.invert_xaxis()
    ax.legend()
    fig.tight_layout()
    fpath = outdir / "plot.svg"
    _fig_to(fpath, fig)
    return [gaps, fit, fpath]


# ---------------------------------------------------------------------------
# envelope-check
# ---------------------------------------------------------------------------

def envelope_check(grid_path, region=None, out: str | None = None,
                   n_slopes: int = 4000, seed: int = 0) -> dict:
    """Measure an on-disk grid function both ways and run the fast invariants."""
    u = load_gridfunction(grid_path)
    reg = Box((region[0], region[1]), region[2] - region[0]) if region else u.box
    if region and abs((region[3] - region[1]) - (region[2] - region[0])) > 1e-12:
        raise ConfigError("region: must be square (x1-x0 == y1-y0)")
    env = convex_envelope(u)
    hull_val = env.measure(reg)
    mc = mc_subdiff_measure(u, reg, n_slopes=n_slopes, seed=seed)
    checks = {}
    gamma = env.envelope_values()
    checks["envelope_below"] = bool(np.all(gamma.values <= u.values + 1e-9))
    env2 = convex_envelope(gamma)
    checks["idempotent"] = bool(
        np.abs(env2.envelope_values().values - gamma.values).max() <= 1e-8)
    conv_ok = True
    if u.d == 2:
        conv_ok = bool(np.min(gamma.values[:, :-2] + gamma.values[:, 2:]
                              - 2 * gamma.values[:, 1:-1]) >= -1e-9
                       and np.min(gamma.values[:-2, :] + gamma.values[2:, :]
                                  - 2 * gamma.values[1:-1, :]) >= -1e-9)
    checks["convex_on_lines"] = conv_ok
    agree = abs(hull_val - mc.value) <= 3.0 * mc.stderr + 1e-12
    checks["mc_agreement_3sigma"] = bool(agree)
    report = {
        "measure": hull_val,
        "mc_estimate": mc.value,
        "mc_stderr": mc.stderr,
        "checks": checks,
        "ok": all(checks.values()),
    }
    if out is not None:
        outdir = Path(out)
        outdir.mkdir(parents=True, exist_ok=True)
        _csv(outdir / "envelope_report.csv", ["name", "value"],
             [("measure", hull_val), ("mc_estimate", mc.value),
              ("mc_stderr", mc.stderr)]
             + [(k, int(b)) for k, b in checks.items()])
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
        if u.d == 2:
            extent = [u.box.lo[0], u.box.hi[0], u.box.lo[1], u.box.hi[1]]
            axes[0].imshow(u.values.T, origin="lower", extent=extent)
            axes[0].set_title("values")
            axes[1].imshow((u.values - gamma.values).T, origin="lower",
                           extent=extent)
            axes[1].set_title("gap to envelope")
        fig.tight_layout()
        _fig_to(outdir / "envelope_report.svg", fig)
    return report
