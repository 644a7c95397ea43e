"""Command-line driver: profile | expand | simulate | verify | sweep.

Each command writes into one run directory (``--out``) and finishes with a
``manifest.json`` listing every emitted file with its SHA-256.  Failures
print a JSON error ``{stage, code, message, context}`` on stderr and write it
to ``error.json``.

Exit codes: 0 ok, 1 acceptance failure, 2 configuration error, 3 hierarchy
error, 4 solver error, 5 budget exhausted.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import yaml

from . import analysis, expansion, hierarchy, profiles, solver
from .core import DampexpError, DomainError, Params, PressureLaw, SolverError, XiGrid, \
    k_thresholds, recommended_grid

logger = logging.getLogger("dampexp")

EXIT_OK, EXIT_ACCEPT, EXIT_CONFIG, EXIT_HIER, EXIT_SOLVER, EXIT_BUDGET = range(6)

DEFAULT_SWEEP = ("0.10", "1/7", "0.20", "0.45", "0.50", "5/11", "0.80")


# ---------------------------------------------------------------------------
# configuration


def parse_lambda(value):
    """Accept floats or exact fractions such as ``"5/11"``."""
    if isinstance(value, (int, float, Fraction)):
        return value
    text = str(value).strip()
    if "/" in text:
        return Fraction(text)
    return float(text)


def _lambda_text(lam):
    return str(lam) if isinstance(lam, Fraction) else repr(float(lam))


@dataclass
class PressureSpec:
    kind: str = "gamma"
    gamma: float = 1.4
    scale: float = 1.0
    c2: float = 1.0
    rho: list = field(default_factory=list)
    p: list = field(default_factory=list)

    def build(self):
        if self.kind == "gamma":
            return PressureLaw.gamma_law(self.gamma, self.scale)
        if self.kind == "linear":
            return PressureLaw.linear(self.c2)
        if self.kind == "tabulated":
            return PressureLaw.tabulated(self.rho, self.p)
        raise DomainError(f"unknown pressure kind {self.kind!r}")


@dataclass
class GridSpec:
    L: float | None = None  # None: recommended window for lambda
    N: int | None = None


@dataclass
class HierarchySpec:
    k: int | None = None  # None: k0(lambda)
    method: str = "colloc"


@dataclass
class PerturbationSpec:
    shape: str = "dbump"
    amplitude: float = 0.01
    m_amplitude: float = 0.0
    center: float | str = 0.0  # "random": uniform in [-1, 1] from the seed
    radius: float = 2.0


@dataclass
class SolverSpec:
    frame: str = "selfsim"
    half_width: float | None = None  # None: 12 (selfsim) or the required width (fixed)
    cells: int = 2048
    cfl: float = 0.5
    T: float = 1000.0
    t0: float = 0.0
    snapshots: list | None = None
    limiter: str = "minmod"
    riemann: str = "rusanov"
    integrator: str | None = None
    boundary: str | None = None
    budget_seconds: float | None = None
    auto_shift: bool = False
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)


@dataclass
class AnalysisSpec:
    k_values: list | None = None  # None: 0..k0
    t_min: float = 10.0
    log_flag: str | bool = "auto"
    svg: bool = True


@dataclass
class SweepSpec:
    lambdas: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    workers: int = 1


@dataclass
class ExperimentConfig:
    """Everything one run needs; round-trips through YAML unchanged."""

    lam: float | Fraction = 0.5
    rho_minus: float = 1.0
    rho_plus: float = 1.05
    pressure: PressureSpec = field(default_factory=PressureSpec)
    xi_grid: GridSpec = field(default_factory=GridSpec)
    hierarchy: HierarchySpec = field(default_factory=HierarchySpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: str = "runs/default"
    seed: int = 0
    strict: bool = False

    # -- (de)serialization ---------------------------------------------

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["lambda"] = _lambda_text(out.pop("lam"))
        out["sweep"]["lambdas"] = [str(v) for v in self.sweep.lambdas]
        return out

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        cfg = _build(cls, data, "config")
        cfg.lam = parse_lambda(cfg.lam)
        cfg.sweep.lambdas = [str(v) for v in cfg.sweep.lambdas]
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise DomainError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise DomainError(f"config {path} is not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise DomainError("config root must be a mapping")
        return cls.from_dict(data)

    # -- domain objects --------------------------------------------------

    def params(self, lam=None):
        return Params(self.lam if lam is None else lam, self.rho_minus, self.rho_plus)

    def law(self):
        return self.pressure.build()

    def grid(self, lam=None):
        lam = self.lam if lam is None else lam
        rec = recommended_grid(lam)
        return XiGrid(self.xi_grid.L or rec.L, self.xi_grid.N or rec.N)

    def perturbation(self):
        ps = self.solver.perturbation
        center = ps.center
        if center == "random":
            center = float(np.random.default_rng(self.seed).uniform(-1.0, 1.0))
        elif not isinstance(center, (int, float)):
            raise DomainError("perturbation center must be a number or 'random'")
        return solver.Perturbation(ps.shape, ps.amplitude, ps.m_amplitude, float(center), ps.radius)

    def sim_config(self, lam=None):
        sv = self.solver
        params = self.params(lam)
        base = dict(params=params, law=self.law(), frame=sv.frame, cells=sv.cells, cfl=sv.cfl,
                    T=sv.T, t0=sv.t0, snapshots=tuple(sv.snapshots or ()),
                    perturbation=self.perturbation(), limiter=sv.limiter, riemann=sv.riemann,
                    integrator=sv.integrator, boundary=sv.boundary,
                    budget_seconds=sv.budget_seconds, auto_shift=sv.auto_shift,
                    strict=self.strict)
        if sv.half_width is not None:
            return solver.SimConfig(half_width=sv.half_width, **base)
        if sv.frame == "selfsim":
            return solver.SimConfig(half_width=12.0, **base)
        probe = solver.SimConfig(half_width=1.0, **base)
        width = math.ceil(solver.required_half_width(probe))
        return solver.SimConfig(half_width=float(width), **base)


def _build(cls, data, where):
    """Recursively build a dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise DomainError(f"{where} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise DomainError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory \
            is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and value is not None:
            value = _build(type(default), value, f"{where}.{name}")
        kwargs[name] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# run directory and manifest


class RunDir:
    def __init__(self, path, config: ExperimentConfig, command):
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(path):
            if not os.path.isdir(parent):
                raise DomainError(f"output parent directory {parent} does not exist")
            os.makedirs(path)
        self.path = path
        self.config = config
        self.command = command
        self.files = []
        self.timings = {}
        self.checks = {}
        self.current = "setup"
        self.previous = self._load_previous()

    def _load_previous(self):
        """Manifest of an earlier run of the same config in this directory, if any."""
        path = os.path.join(self.path, "manifest.json")
        if not os.path.exists(path):
            return None
        with open(path) as fh:
            old = json.load(fh)
        if _resume_key(old.get("config")) != _resume_key(_jsonable(self.config.to_dict())):
            logger.info("existing manifest in %s is for a different config; not resuming", self.path)
            return None
        return old

    def verified(self, prefix):
        """Relative paths under ``prefix`` from the previous manifest whose hashes still match.

        Returns an empty list unless every such file is present and unchanged.
        """
        if self.previous is None:
            return []
        entries = [e for e in self.previous["files"] if e["path"].startswith(prefix)]
        for e in entries:
            full = os.path.join(self.path, e["path"])
            if not os.path.exists(full) or _sha256(full) != e["sha256"]:
                logger.warning("artifact %s changed since the last run; recomputing", e["path"])
                return []
        return [e["path"] for e in entries]

    def file(self, name):
        full = os.path.join(self.path, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def record(self, paths):
        for p in paths if isinstance(paths, (list, tuple)) else [paths]:
            if p not in self.files:
                self.files.append(p)

    def write_json(self, name, obj):
        path = self.file(name)
        with open(path, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        self.record(path)
        return path

    def stage(self, name):
        return _Stage(self, name)

    def manifest(self, status):
        entries = [{"path": os.path.relpath(p, self.path), "sha256": _sha256(p)}
                   for p in sorted(self.files) if os.path.exists(p)]
        body = {"command": self.command, "config": self.config.to_dict(), "files": entries,
                "timings": self.timings, "checks": self.checks, "status": status,
                "all_passed": all(bool(v) for v in self.checks.values())}
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(_jsonable(body), fh, indent=2, sort_keys=True)
        return body


class _Stage:
    def __init__(self, rd, name):
        self.rd, self.name = rd, name

    def __enter__(self):
        self.rd.current = self.name
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.rd.timings[self.name] = time.perf_counter() - self.t0
        return False


def _resume_key(config):
    """Config echo without the wall-clock budget, which may change between attempts."""
    if not isinstance(config, dict) or "solver" not in config:
        return config
    return {**config, "solver": {**config["solver"], "budget_seconds": None}}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


class StageError(Exception):
    def __init__(self, stage, code, message, context=None):
        super().__init__(message)
        self.stage, self.code, self.message = stage, code, message
        self.context = context or {}

    def as_dict(self):
        return {"stage": self.stage, "code": self.code, "message": self.message,
                "context": _jsonable(self.context)}


def _classify(stage, exc):
    if isinstance(exc, solver.BudgetError):
        return EXIT_BUDGET
    if isinstance(exc, DomainError):
        return EXIT_CONFIG
    if isinstance(exc, SolverError):
        return EXIT_SOLVER if stage == "simulate" else EXIT_HIER
    return getattr(exc, "code", 1) or 1


# ---------------------------------------------------------------------------
# pipeline stages


def stage_profile(cfg, rd, lam=None):
    with rd.stage("profile"):
        prof = profiles.solve_wave(cfg.params(lam), cfg.law(), cfg.grid(lam))
        bounds = profiles.check_gaussian_bounds(prof)
    path = rd.file("profile.csv")
    prof.to_csv(path)
    rd.record(path)
    rd.write_json("gaussian_bounds.json", bounds.as_dict())
    rd.checks["gaussian_bounds"] = bounds.passed
    return prof


def stage_expand(cfg, rd, prof, scan=True):
    lam = prof.params.lam
    k0 = k_thresholds(lam)[1]
    k = k0 if cfg.hierarchy.k is None else cfg.hierarchy.k
    cs = None
    with rd.stage("hierarchy"):
        if k > 0:
            cs = hierarchy.build_corrections(prof, k, method=cfg.hierarchy.method)
    if cs is not None:
        os.makedirs(rd.file("corrections"), exist_ok=True)
        rd.record(cs.to_csv(rd.file("corrections")))
        rd.checks["mass_chain"] = bool(np.all(np.asarray(cs.mass_chain_errors()) < 1e-7))
        if cfg.hierarchy.method == "both":
            rd.write_json("cross_validation.json", {
                "cross_check": cs.cross_check,
                "fourier": {i: {"contraction": r.contraction, "sweeps": r.sweeps}
                            for i, r in cs.fourier.items()}})
    ev = expansion.ExpansionEvaluator(prof, cs, k=k)
    if scan:
        with rd.stage("residual_scan"):
            res = expansion.residual_decay_scan(ev)
        rd.record(res.to_files(rd.file("residual_scan")))
        rd.checks["residual_rate"] = res.passed
    return cs, ev


def _resume_state(sc, snap):
    """Solver state rebuilt from a persisted snapshot."""
    s = solver.frame_scale(sc.frame, snap.t, float(sc.params.lam))
    w = s * np.array([snap.rho, snap.m])
    return solver.SimState(sc.frame, snap.t, w, sc.edges(), mass_ledger=snap.mass_ledger,
                           mass0=snap.mass - snap.mass_ledger, steps=snap.steps, x0=snap.x0)


def stage_simulate(cfg, rd, ev, lam=None):
    sc = cfg.sim_config(lam)
    sim_dir = rd.file("simulation")
    os.makedirs(sim_dir, exist_ok=True)
    done = []
    if "simulation/run.json" in rd.verified("simulation/"):
        done = solver.load_run(sim_dir, sc).snapshots
        if rd.previous.get("status") == "ok":
            logger.info("reusing the persisted simulation in %s", sim_dir)
            result = solver.RunResult(sc, done, 0.0, done[-1].steps if done else 0)
            rd.record(sorted(os.path.join(rd.path, p) for p in rd.verified("simulation/")))
            _mass_check(rd, result)
            return result
        logger.info("resuming the simulation from t=%g", done[-1].t if done else sc.t0)
    with rd.stage("simulate"):
        try:
            if done:
                rest = solver.run(sc, state=_resume_state(sc, done[-1]))
                # the first snapshot of the continuation repeats the resume point
                result = solver.RunResult(sc, done + rest.snapshots[1:], rest.wall_time, rest.steps)
            else:
                result = solver.run(sc, ev)
        except solver.BudgetError as exc:
            partial = solver.RunResult(sc, done[:-1] + exc.snapshots if done else exc.snapshots,
                                       0.0, 0)
            rd.record(partial.write(sim_dir))
            raise
        except SolverError as exc:
            last = exc.context.get("last_good")
            if last is not None:
                path = os.path.join(sim_dir, "last_good.csv")
                last.to_csv(path)
                rd.record(path)
                exc.context["last_good"] = {"t": last.t, "path": path}
            exc.context.pop("snapshots", None)
            raise
    rd.record(result.write(sim_dir))
    _mass_check(rd, result)
    rd.timings["simulate_steps"] = result.steps
    return result


def _mass_check(rd, result):
    drift = max((s.mass_drift for s in result.snapshots), default=0.0)
    rd.checks["mass_ledger"] = drift < 1e-8


def _decay_tables(cfg, rd, result, prof, cs, lam):
    k0 = k_thresholds(lam)[1]
    ks = cfg.analysis.k_values if cfg.analysis.k_values is not None else range(k0 + 1)
    series = {}
    with rd.stage("analysis"):
        for k in ks:
            ev = expansion.ExpansionEvaluator(prof, cs, k=k)
            recs = [analysis.remainder(s, ev) for s in result.snapshots if s.t >= cfg.analysis.t_min]
            series[k] = analysis.DecaySeries(recs, float(lam), k, cfg.analysis.t_min)
    os.makedirs(rd.file("analysis"), exist_ok=True)
    plot = {}
    for k, s in series.items():
        path = rd.file(f"analysis/norms_k{k}.csv")
        s.to_csv(path)
        rd.record(path)
        plot[f"||P_{k}||_inf"] = (s.times, s.values("linf:P"))
    path = rd.file("analysis/plot_data.csv")
    analysis.write_plot_data(path, plot)
    rd.record(path)
    if cfg.analysis.svg:
        path = rd.file("analysis/decay.svg")
        analysis.write_svg(path, plot, title=f"lambda = {lam}")
        rd.record(path)
    return series


def verify_checks(lam, series, tol=0.08, log_flag="auto"):
    """Acceptance checks for one lambda; returns (table rows, checks).

    ``log_flag`` controls the ln(1+t) division of the corrected fit;
    ``"auto"`` enables it exactly on the log branch.
    """
    k0 = max(series)
    base = series[0].fit("linf:P", log_flag=False)
    rows = [{"k": 0, "norm": "linf:P", **base.as_dict(), "target": analysis.baseline_rate(lam)}]
    checks = {"baseline_rate": abs(base.exponent - analysis.baseline_rate(lam)) <= tol}
    if k0 > 0:
        flag = analysis.log_branch(lam) if log_flag == "auto" else bool(log_flag)
        corr = series[k0].fit("linf:P", log_flag=flag)
        target = analysis.remainder_rate(lam, k0)
        rows.append({"k": k0, "norm": "linf:P", **corr.as_dict(), "target": target})
        # the rate is an upper bound; 0.125 is the slack granted at the lambda=0.5 default
        checks["corrected_rate"] = corr.exponent <= target + 0.125
        checks["corrected_gain"] = corr.exponent <= base.exponent - 0.3
        if analysis.log_branch(lam):
            plain = series[k0].fit("linf:P", log_flag=False)
            logf = series[k0].fit("linf:P", log_flag=True)
            rows.append({"k": k0, "norm": "linf:P/ln(1+t)", **logf.as_dict(), "target": target})
            checks["log_branch_r2"] = logf.r2 > plain.r2
    for k, s in series.items():
        checks[f"sobolev_k{k}"] = all(r.sobolev_ok() for r in s.records)
    return rows, checks


# ---------------------------------------------------------------------------
# commands


def cmd_profile(cfg, rd):
    stage_profile(cfg, rd)
    return EXIT_OK


def cmd_expand(cfg, rd):
    prof = stage_profile(cfg, rd)
    stage_expand(cfg, rd, prof)
    return EXIT_OK


def cmd_simulate(cfg, rd):
    prof = stage_profile(cfg, rd)
    _, ev = stage_expand(cfg, rd, prof, scan=False)
    stage_simulate(cfg, rd, ev)
    return EXIT_OK


def cmd_verify(cfg, rd):
    lam = cfg.lam
    prof = stage_profile(cfg, rd)
    cs, ev = stage_expand(cfg, rd, prof)
    result = stage_simulate(cfg, rd, ev)
    series = _decay_tables(cfg, rd, result, prof, cs, lam)
    rows, checks = verify_checks(lam, series, log_flag=cfg.analysis.log_flag)
    en = analysis.energy_functional(series[max(series)].records, lam)
    checks["energy_bounded"] = en.bounded
    rd.checks.update(checks)
    rd.write_json("decay_table.json", rows)
    rd.write_json("energy.json", {"t": en.times, "functional": en.values,
                                  "late_slope": en.late_slope, "sup_at_tmin": en.sup_at_tmin,
                                  "mass_warning": en.mass_warning})
    _print_table(rows)
    return EXIT_OK if all(rd.checks.values()) else EXIT_ACCEPT


def cmd_sweep(cfg, rd):
    lams = [parse_lambda(v) for v in cfg.sweep.lambdas]
    sv = cfg.solver
    opts = dict(frame=sv.frame, cells=sv.cells, cfl=sv.cfl, limiter=sv.limiter,
                riemann=sv.riemann, integrator=sv.integrator, perturbation=cfg.perturbation())
    with rd.stage("sweep"):
        table = analysis.threshold_sweep(lams, workers=cfg.sweep.workers, T=sv.T,
                                         t_min=cfg.analysis.t_min, solver_options=opts,
                                         law=cfg.law(), rho_minus=cfg.rho_minus,
                                         rho_plus=cfg.rho_plus)
    path = rd.file("threshold_table.csv")
    table.to_csv(path)
    rd.record(path)
    path = rd.file("threshold_table.json")
    table.to_json(path)
    rd.record(path)
    for row in table.rows:
        rd.checks[f"baseline_{row.lam:.4f}"] = row.baseline_pass
    _print_table(table.as_records())
    return EXIT_OK if all(rd.checks.values()) else EXIT_ACCEPT


COMMANDS = {"profile": cmd_profile, "expand": cmd_expand, "simulate": cmd_simulate,
            "verify": cmd_verify, "sweep": cmd_sweep}


def _print_table(rows):
    for row in rows:
        print("  ".join(f"{k}={_fmt(v)}" for k, v in row.items()))


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="dampexp", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--lambda", dest="lam", help="damping exponent, e.g. 0.5 or 5/11")
    parser.add_argument("--k", type=int, help="expansion order (default k0(lambda))")
    parser.add_argument("--method", choices=("colloc", "fourier", "both"))
    parser.add_argument("--frame", choices=("fixed", "selfsim"))
    parser.add_argument("--T", type=float, help="end time")
    parser.add_argument("--out", help="run directory")
    parser.add_argument("--budget", type=float, help="wall-clock budget in seconds")
    parser.add_argument("--workers", type=int, help="parallel processes for sweep")
    parser.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    parser.add_argument("--strict", action="store_true", help="turn warnings into errors")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.lam is not None:
        try:
            cfg.lam = parse_lambda(args.lam)
        except (ValueError, ZeroDivisionError) as exc:
            raise DomainError(f"invalid lambda {args.lam!r}") from exc
    if args.k is not None:
        cfg.hierarchy.k = args.k
    if args.method:
        cfg.hierarchy.method = args.method
    if args.frame:
        cfg.solver.frame = args.frame
    if args.T is not None:
        cfg.solver.T = args.T
    if args.out:
        cfg.output = args.out
    if args.budget is not None:
        cfg.solver.budget_seconds = args.budget
    if args.workers is not None:
        cfg.sweep.workers = args.workers
    if args.strict:
        cfg.strict = True
    return cfg


def validate(cfg):
    """Build every domain object once so that config errors surface before work starts."""
    cfg.params()
    cfg.law()
    cfg.grid()
    if cfg.hierarchy.method not in ("colloc", "fourier", "both"):
        raise DomainError(f"unknown hierarchy method {cfg.hierarchy.method!r}")
    k0 = k_thresholds(cfg.lam)[1]
    if cfg.hierarchy.k is not None and not (0 <= cfg.hierarchy.k <= k0):
        raise DomainError(f"k must lie in [0, k0={k0}]")
    if cfg.analysis.log_flag not in ("auto", True, False):
        raise DomainError("analysis.log_flag must be auto, true or false")
    cfg.sim_config()
    for v in cfg.sweep.lambdas:
        Params(parse_lambda(v), cfg.rho_minus, cfg.rho_plus)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    rd = None
    try:
        cfg = resolve_config(args)
        validate(cfg)
        if args.dry_run:
            print(cfg.dump())
            return EXIT_OK
        rd = RunDir(cfg.output, cfg, args.command)
        code = COMMANDS[args.command](cfg, rd)
        rd.manifest("ok" if code == EXIT_OK else "acceptance-failure")
        return code
    except DampexpError as exc:
        if rd is not None:
            stage = rd.current
        code = _classify(stage, exc)
        ctx = dict(getattr(exc, "context", {}) or {})
        ctx.pop("snapshots", None)
        if isinstance(exc, solver.BudgetError):
            ctx["completed_snapshots"] = [s.t for s in exc.snapshots]
        err = StageError(stage, code, f"{type(exc).__name__}: {exc}", ctx)
        _report(err, rd, "budget" if code == EXIT_BUDGET else "error")
        return code


def _report(err, rd, status):
    payload = err.as_dict()
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    if rd is not None:
        rd.write_json("error.json", payload)
        rd.manifest(status)


if __name__ == "__main__":
    sys.exit(main())
