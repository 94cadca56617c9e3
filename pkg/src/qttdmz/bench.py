"""Experiment harness: config loading, offline caching, seeded trials and reports.

Output files written by :func:`run_trials` (all CSV files carry a header row):

``trials.csv``
    ``trial_id, seed, filter, rmse, online_seconds, diverged, divergence_step, error``
``aggregate.json``
    per-filter mean RMSE, per-trial RMSE, divergence counts and trajectory
    hashes. Contains no timings, so it is byte-identical for a fixed config
    and base seed.
``timing.json``
    offline build time and per-filter online wall-clock times.
``estimates_<filter>.csv``
    ``trial_id, t, axis, true_state, estimate``
``trajectory_<trial>.csv``
    ``# seed=<n>`` line, then ``t, x1.., dy1..``
``density_trial<k>/density_<t>.csv``
    ``t, axis, x, value`` one-dimensional marginals of the QTT density.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .baselines import run_ekf, run_pf, run_prior_mean
from .dmz import DmzFilter
from .errors import ConfigError, QttDmzError, StabilityError
from .models import NlfModel, Trajectory, make_preset, simulate
from .operators import (
    SolverParams,
    assemble_generator,
    build_propagator,
    check_stability,
    choose_substeps,
    load_propagator,
    max_potential,
    save_propagator,
)
from .polyadic import Grid
from .tt import TruncationPolicy

log = logging.getLogger(__name__)

FILTERS = ("qtt", "pf", "ekf", "prior", "truth")

DEFAULTS = {
    "model": {"preset": "cubic", "d": None, "q": None, "s": None},
    "grid": {"levels": 5, "lower": None, "upper": None},
    "solver": {"dt": 0.01, "substeps": None, "eps1": 1e-6, "eps2": 1e-8, "max_rank": None, "c_tilde": None, "potential_weight": 1.0},
    "run": {"T": 1.0, "trials": 1, "seed": 0, "workers": 1, "filters": ["qtt", "pf", "ekf"], "output": "results", "allow_unstable": False},
    "pf": {"particles": 1000, "systematic": False},
    "ekf": {"literal": False},
    "export": {"density_every": 0, "axes": [], "estimates": True, "trajectories": True},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'; expected one of {sorted(base)}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}{key}' must be a section")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment settings (see ``DEFAULTS`` for the schema)."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, raw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def __getitem__(self, section):
        return self.data[section]

    def validate(self) -> None:
        m, g, s, r = self["model"], self["grid"], self["solver"], self["run"]
        if m["preset"] not in ("cubic", "multimode"):
            raise ConfigError(f"model.preset must be 'cubic' or 'multimode', got {m['preset']!r}")
        if not isinstance(g["levels"], int) or not 1 <= g["levels"] <= 12:
            raise ConfigError(f"grid.levels must be an integer in [1, 12], got {g['levels']!r}")
        if not s["dt"] > 0:
            raise ConfigError("solver.dt must be positive")
        if s["substeps"] is not None and (not isinstance(s["substeps"], int) or s["substeps"] < 1):
            raise ConfigError("solver.substeps must be a positive integer")
        for key in ("eps1", "eps2"):
            if not 0 <= s[key] < 1:
                raise ConfigError(f"solver.{key} must lie in [0, 1)")
        n_steps = r["T"] / s["dt"]
        if r["T"] <= 0 or abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
            raise ConfigError(f"run.T={r['T']} must be a positive multiple of solver.dt={s['dt']}")
        if not isinstance(r["trials"], int) or r["trials"] < 1:
            raise ConfigError("run.trials must be a positive integer")
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigError("run.seed must be a nonnegative integer")
        if not isinstance(r["workers"], int) or r["workers"] < 1:
            raise ConfigError("run.workers must be a positive integer")
        bad = [f for f in r["filters"] if f not in FILTERS]
        if bad:
            raise ConfigError(f"unknown filters {bad}; available: {list(FILTERS)}")
        if self["pf"]["particles"] < 1:
            raise ConfigError("pf.particles must be positive")

    # --- derived objects -----------------------------------------------------

    def model(self) -> NlfModel:
        m = self["model"]
        model = make_preset(m["preset"], m["d"])
        changes = {k: float(m[k]) for k in ("q", "s") if m[k] is not None}
        if changes:
            from dataclasses import replace

            model = replace(model, **changes)
        return model

    def grid(self, model: NlfModel) -> Grid:
        g = self["grid"]
        lower = model.lower if g["lower"] is None else tuple(np.broadcast_to(g["lower"], (model.d,)))
        upper = model.upper if g["upper"] is None else tuple(np.broadcast_to(g["upper"], (model.d,)))
        return Grid(lower, upper, 2 ** g["levels"])

    def solver(self, model: NlfModel, grid: Grid) -> SolverParams:
        s = self["solver"]
        n_sub = s["substeps"]
        if n_sub is None:
            n_sub = choose_substeps(grid, model.q, s["dt"], s["potential_weight"] * max_potential(grid, model.h, model.s))
        return SolverParams(
            dt=float(s["dt"]),
            n_substeps=int(n_sub),
            q=model.q,
            s=model.s,
            eps1=float(s["eps1"]),
            eps2=float(s["eps2"]),
            c_tilde=s["c_tilde"],
            max_rank=s["max_rank"],
            potential_weight=float(s["potential_weight"]),
        )

    def offline_key(self, params: SolverParams) -> str:
        """Hash of everything the propagator depends on."""
        payload = {
            "model": self["model"],
            "grid": self["grid"],
            "solver": {
                "dt": params.dt,
                "substeps": params.n_substeps,
                "eps1": params.eps1,
                "eps2": params.eps2,
                "max_rank": params.max_rank,
                "potential_weight": params.potential_weight,
            },
            "format": 1,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True)


# --- offline ---------------------------------------------------------------------


@dataclass
class OfflineResult:
    propagator: object
    params: SolverParams
    grid: Grid
    model: NlfModel
    path: Path
    cache_hit: bool
    seconds: float
    stability: dict


def run_offline(config: ExperimentConfig, cache_dir, allow_unstable: Optional[bool] = None) -> OfflineResult:
    """Build (or reload) the interval propagator for ``config``.

    The checkpoint is keyed by a hash of the model, grid and solver
    settings; a matching file is reused without recomputation.
    """
    allow = config["run"]["allow_unstable"] if allow_unstable is None else allow_unstable
    model = config.model()
    grid = config.grid(model)
    params = config.solver(model, grid)
    report = check_stability(grid, model.f, model.h, params)
    if not report.ok and not allow:
        raise StabilityError(
            "mesh conditions fail: "
            f"peclet ok={report.mesh_peclet_ok} (margin {report.margin_peclet:.3g}), "
            f"diffusion ok={report.diffusion_number_ok} (margin {report.margin_diffusion:.3g}), "
            f"c_tilde ok={report.c_tilde_ok}; pass --allow-unstable to run anyway"
        )
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = config.offline_key(params)
    path = cache_dir / f"propagator_{key[:16]}.qtt"
    start = time.perf_counter()
    if path.exists() and path.with_name(path.name + ".json").exists():
        prop, meta = load_propagator(path)
        if meta.get("key") == key:
            return OfflineResult(prop, params, grid, model, path, True, time.perf_counter() - start, report.to_dict())
    gen = assemble_generator(grid, model.f, model.h, params)
    prop = build_propagator(gen, params)
    elapsed = time.perf_counter() - start
    meta = {
        "key": key,
        "grid": {"lower": grid.lower, "upper": grid.upper, "n": grid.n},
        "params": {k: getattr(params, k) for k in ("dt", "n_substeps", "q", "s", "eps1", "eps2", "max_rank", "potential_weight")},
        "model": config["model"],
        "generator_ranks": list(gen.ranks),
        "stability": report.to_dict(),
    }
    save_propagator(path, prop, meta)
    log.info("offline build %.2fs, propagator max rank %d", elapsed, prop.max_rank)
    return OfflineResult(prop, params, grid, model, path, False, elapsed, report.to_dict())


# --- metrics -----------------------------------------------------------------------


def compute_rmse(estimates, truth) -> float:
    """``sum_j |est_j - x_j|^2 / (d N_T)`` over the rows given (pass steps 1..N_T)."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != tru.shape:
        raise ConfigError(f"estimate shape {est.shape} != truth shape {tru.shape}")
    if est.size == 0:
        raise ConfigError("RMSE of an empty sequence")
    n_t, d = est.shape
    return float(((est - tru) ** 2).sum() / (d * n_t))


def is_divergent(estimates, radius: float) -> bool:
    est = np.asarray(estimates, dtype=float)
    return bool((~np.isfinite(est)).any() or (np.linalg.norm(est, axis=-1) > 10 * radius).any())


def trajectory_hash(traj: Trajectory) -> str:
    h = hashlib.sha256()
    for arr in (traj.times, traj.states, traj.dy):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# --- trials --------------------------------------------------------------------


@dataclass
class FilterOutcome:
    estimates: np.ndarray
    seconds: float
    diverged: bool
    step: Optional[int]
    error: str = ""
    extra: dict = field(default_factory=dict)


def _run_filter(name, config, offline, qtt_filter, traj, seed, ekf_literal, export) -> FilterOutcome:
    model = offline.model
    radius = model.domain_radius
    n = len(traj.times)
    try:
        if name == "qtt":
            every = export["density_every"]
            res = qtt_filter.run(model.sigma0, traj.dy, marginal_every=every, marginal_axes=export["axes"] if every else ())
            extra = {"marginals": res.marginals, "max_rank": max(res.ranks)}
            est, secs, div, step = res.estimates, res.online_seconds, False, None
        elif name == "pf":
            p = config["pf"]
            res = run_pf(model, traj, p["particles"], seed, p["systematic"])
            est, secs, div, step, extra = res.estimates, res.online_seconds, res.diverged, res.divergence_step, {}
        elif name == "ekf":
            res = run_ekf(model, traj, literal=ekf_literal)
            est, secs, div, step = res.estimates, res.online_seconds, res.diverged, res.divergence_step
            extra = {"max_covariance_growth": res.diagnostics["max_covariance_growth"]}
        elif name == "prior":
            res = run_prior_mean(model, traj, config["pf"]["particles"], seed)
            est, secs, div, step, extra = res.estimates, res.online_seconds, False, None, {}
        elif name == "truth":
            est, secs, div, step, extra = traj.states.copy(), 0.0, False, None, {}
        else:
            raise ConfigError(f"unknown filter {name!r}")
    except (QttDmzError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return FilterOutcome(np.full((n, model.d), np.nan), 0.0, True, None, f"{type(exc).__name__}: {exc}")
    if not div and is_divergent(est, radius):
        div = True
        bad = ~np.isfinite(est).all(axis=1) | (np.linalg.norm(np.nan_to_num(est, nan=np.inf), axis=1) > 10 * radius)
        step = int(np.argmax(bad))
    return FilterOutcome(est, secs, div, step, "", extra)


def trial_seed(base: int, trial: int) -> int:
    return int(base) ^ int(trial)


def _run_one_trial(trial, config, offline, qtt_filter, filters, ekf_literal, export):
    seed = trial_seed(config["run"]["seed"], trial)
    traj = simulate(offline.model, config["run"]["T"], config["solver"]["dt"], seed)
    outcomes = {}
    for name in filters:
        outcomes[name] = _run_filter(name, config, offline, qtt_filter, traj, seed, ekf_literal, export)
    return trial, seed, traj, outcomes


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def run_trials(
    config: ExperimentConfig,
    out_dir=None,
    *,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    ekf_literal: Optional[bool] = None,
    allow_unstable: Optional[bool] = None,
    cache_dir=None,
) -> dict:
    """Run every trial and filter; write the report files; return the aggregate."""
    if seed is not None:
        config = ExperimentConfig.from_dict({**config.data, "run": {**config["run"], "seed": int(seed)}})
    out = Path(out_dir or config["run"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or config["run"]["workers"]
    literal = config["ekf"]["literal"] if ekf_literal is None else ekf_literal
    filters = list(config["run"]["filters"])
    export = config["export"]
    offline = run_offline(config, cache_dir or out / "cache", allow_unstable)
    qtt_filter = None
    if "qtt" in filters:
        qtt_filter = DmzFilter(offline.grid, offline.model.h, offline.model.s, offline.propagator, offline.params.dt, offline.params.policy1())
    trials = range(config["run"]["trials"])
    with threadpool_limits(1):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda t: _run_one_trial(t, config, offline, qtt_filter, filters, literal, export), trials))
        else:
            results = [_run_one_trial(t, config, offline, qtt_filter, filters, literal, export) for t in trials]
    results.sort(key=lambda r: r[0])
    return _write_reports(out, config, offline, results, filters, literal)


def _write_reports(out: Path, config, offline, results, filters, literal) -> dict:
    export = config["export"]
    agg = {
        "config": json.loads(config.canonical_json()),
        "ekf_literal": bool(literal),
        "n_substeps": offline.params.n_substeps,
        "offline_key": config.offline_key(offline.params),
        "stability_ok": bool(offline.stability["ok"]),
        "trials": [],
        "filters": {},
    }
    timing = {"offline_seconds": offline.seconds, "offline_cache_hit": offline.cache_hit, "filters": {}}
    per_filter = {name: [] for name in filters}
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "seed", "filter", "rmse", "online_seconds", "diverged", "divergence_step", "error"])
        for trial, seed, traj, outcomes in results:
            agg["trials"].append({"trial_id": trial, "seed": seed, "trajectory_sha256": trajectory_hash(traj)})
            if export["trajectories"]:
                traj.save_csv(out / f"trajectory_{trial}.csv")
            for name in filters:
                o = outcomes[name]
                rmse = compute_rmse(o.estimates[1:], traj.states[1:]) if not o.error else float("nan")
                per_filter[name].append((trial, rmse, o))
                w.writerow([trial, seed, name, repr(rmse), f"{o.seconds:.6f}", int(o.diverged), "" if o.step is None else o.step, o.error])
            qtt = outcomes.get("qtt")
            if qtt is not None and qtt.extra.get("marginals"):
                _write_marginals(out / f"density_trial{trial}", qtt.extra["marginals"], offline, traj)
    for name in filters:
        rows = per_filter[name]
        vals = np.array([r[1] for r in rows])
        ok = np.isfinite(vals) & np.array([not r[2].diverged for r in rows])
        entry = {
            "rmse": [_json_float(v) for v in vals],
            "mean_rmse": _json_float(float(vals[ok].mean())) if ok.any() else None,
            "divergences": int(sum(r[2].diverged for r in rows)),
            "errors": int(sum(bool(r[2].error) for r in rows)),
        }
        if name == "ekf":
            entry["max_covariance_growth"] = [_json_float(r[2].extra.get("max_covariance_growth")) for r in rows]
        agg["filters"][name] = entry
        timing["filters"][name] = {
            "online_seconds": [r[2].seconds for r in rows],
            "mean_online_seconds": float(np.mean([r[2].seconds for r in rows])),
        }
        if export["estimates"]:
            _write_estimates(out / f"estimates_{name}.csv", rows, results)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return agg


def _write_estimates(path, rows, results):
    trajs = {r[0]: r[2] for r in results}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "t", "axis", "true_state", "estimate"])
        for trial, _, o in rows:
            traj = trajs[trial]
            for j, t in enumerate(traj.times):
                for a in range(traj.d):
                    w.writerow([trial, repr(float(t)), a, repr(float(traj.states[j, a])), repr(float(o.estimates[j, a]))])


def _write_marginals(folder: Path, marginals: dict, offline, traj):
    folder.mkdir(parents=True, exist_ok=True)
    grid = offline.grid
    by_step = {}
    for (j, axes), arr in marginals.items():
        by_step.setdefault(j, []).append((axes, arr))
    for j, items in sorted(by_step.items()):
        t = float(traj.times[j])
        with open(folder / f"density_{t:.4f}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "axis", "x", "y", "value"])
            for axes, arr in items:
                if len(axes) == 1:
                    for x, v in zip(grid.nodes(axes[0]), arr):
                        w.writerow([repr(t), axes[0], repr(float(x)), "", repr(float(v))])
                else:
                    xs, ys = grid.nodes(axes[0]), grid.nodes(axes[1])
                    for a, x in enumerate(xs):
                        for b, y in enumerate(ys):
                            w.writerow([repr(t), f"{axes[0]}-{axes[1]}", repr(float(x)), repr(float(y)), repr(float(arr[a, b]))])


def rmse_from_estimates(path) -> dict:
    """Per-trial RMSE from an ``estimates_<filter>.csv`` file (skips ``t_0``)."""
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["trial_id"]), []).append((float(r["t"]), int(r["axis"]), float(r["true_state"]), float(r["estimate"])))
    out = {}
    for trial, items in sorted(rows.items()):
        times = sorted({t for t, *_ in items})
        d = max(a for _, a, _, _ in items) + 1
        idx = {t: i for i, t in enumerate(times)}
        est = np.zeros((len(times), d))
        tru = np.zeros((len(times), d))
        for t, a, x, e in items:
            tru[idx[t], a] = x
            est[idx[t], a] = e
        out[trial] = compute_rmse(est[1:], tru[1:])
    return out
