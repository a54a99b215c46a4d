"""Experiment harness and command-line front end.

A run is described by one JSON document (validated into ``RunConfig``) and
produces ``MetricRow`` records written as CSV. Every random stream is keyed
by (sweep point, replicate or dataset, method), so results do not depend on
the thread count or on which other methods are configured.
"""

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import astuple, dataclass, fields
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import models
from .checks import run_checks
from .errors import ConfigError, DegenerateWeightsError, GaussFlowError
from .filter import PROPOSALS, ProposalKind, kalman_filter, run_filter
from .flow_sampler import StepControlConfig, pseudo_time_grid
from .gflow_linear import FlowConfig, LinearGaussianModel, sequence_moments
from .importance import METHODS, run_method
from .reference import radial_posterior_mean
from .rng import derive, generator, map_ordered

# Fixed stream ids; adding a method never shifts another method's stream.
METHOD_IDS = {
    "prior-is": 1,
    "laplace-is": 2,
    "flow-is": 3,
    "bootstrap": 11,
    "ekf": 12,
    "ukf": 13,
    "laplace": 14,
    "gfpf": 15,
}
_DATA = 0xDA7A

MODEL_PARAMS = {
    "radial": {"d": 2, "sigma_x": 1.0, "sigma_y": 0.1, "y": None},
    "linear": {"F": None, "Q": None, "H": None, "R": None, "m0": None, "P0": None},
    "altitude": {"terrain": None},
    "arm": {"project": "elbow"},
}
SAMPLER_MODELS = ("radial", "linear")
FILTER_MODELS = ("linear", "altitude", "arm")
SWEEPABLE = {"radial": ("d", "sigma_x", "sigma_y", "kappa"), "linear": ("kappa",)}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    name: Literal["radial", "linear", "altitude", "arm"]
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_params(self):
        known = MODEL_PARAMS[self.name]
        unknown = sorted(set(self.params) - set(known))
        if unknown:
            raise ValueError(f"unknown parameter(s) {unknown} for model {self.name!r}; "
                             f"known: {sorted(known)}")
        return self

    def merged(self):
        out = dict(MODEL_PARAMS[self.name])
        out.update(self.params)
        return out


class FlowSpec(_Strict):
    kappa: float = Field(0.0, ge=0.0)
    grid_steps: Optional[int] = Field(None, ge=1)
    grid_kind: Literal["uniform", "geometric"] = "uniform"

    def grid(self):
        return None if self.grid_steps is None else pseudo_time_grid(self.grid_steps, self.grid_kind)


class StepControlSpec(_Strict):
    atol: float = 1e-4
    rtol: float = 1e-3
    dt_init: float = 0.05
    dt_min: float = 1e-5
    dt_max: float = 0.25
    safety: float = 0.9
    grow_max: float = 2.0
    shrink_min: float = 0.2
    max_rejects_per_step: int = 12

    @model_validator(mode="after")
    def _valid(self):
        try:
            self.build()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self

    def build(self):
        return StepControlConfig(**self.model_dump())


class SweepSpec(_Strict):
    param: str
    values: List[float] = Field(min_length=1)


class RunConfig(_Strict):
    """Validated experiment description."""

    experiment: Literal["sampler-sweep", "filter-bench", "single-run"]
    id: str = "run"
    model: ModelSpec
    methods: List[str] = Field(min_length=1)
    n: Union[int, Dict[str, int]] = 100
    n_mode: Literal["explicit", "walltime"] = "explicit"
    walltime_reference: str = "gfpf"
    flow: FlowSpec = Field(default_factory=FlowSpec)
    step_control: StepControlSpec = Field(default_factory=StepControlSpec)
    sweep: Optional[SweepSpec] = None
    replicates: int = Field(1, ge=1)
    datasets: int = Field(1, ge=1)
    T: int = Field(100, ge=1)
    rmse_components: Optional[List[int]] = None
    timing: bool = False
    seed: int = Field(0, ge=0)
    output: Optional[str] = None

    @field_validator("n")
    @classmethod
    def _positive_n(cls, v):
        vals = v.values() if isinstance(v, dict) else [v]
        if any(k < 1 for k in vals):
            raise ValueError("particle counts must be >= 1")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        sampler = self.experiment in ("sampler-sweep", "single-run")
        allowed = METHODS if sampler else PROPOSALS
        for i, m in enumerate(self.methods):
            if m not in allowed:
                raise _PathError(("methods", i), f"unknown method {m!r} for {self.experiment}; choose from {allowed}")
        if len(set(self.methods)) != len(self.methods):
            raise _PathError(("methods",), "methods must be distinct")
        models_ok = SAMPLER_MODELS if sampler else FILTER_MODELS
        if self.model.name not in models_ok:
            raise _PathError(("model", "name"), f"{self.experiment} needs a model from {models_ok}")
        if isinstance(self.n, dict):
            for m in self.methods:
                if m not in self.n:
                    raise _PathError(("n", m), "missing particle count")
        if self.experiment == "sampler-sweep" and self.sweep is None:
            raise _PathError(("sweep",), "sampler-sweep requires a sweep axis")
        if self.sweep is not None:
            if self.experiment != "sampler-sweep":
                raise _PathError(("sweep",), f"{self.experiment} does not take a sweep axis")
            if self.sweep.param not in SWEEPABLE[self.model.name]:
                raise _PathError(("sweep", "param"),
                                 f"{self.sweep.param!r} is not sweepable for model {self.model.name!r}; "
                                 f"choose from {SWEEPABLE[self.model.name]}")
        if self.n_mode == "walltime":
            if self.experiment != "filter-bench":
                raise _PathError(("n_mode",), "wall-time matching applies to filter-bench only")
            if self.walltime_reference not in self.methods:
                raise _PathError(("walltime_reference",), "reference method must be one of the methods")
        _check_model_params(self)
        return self

    def count(self, method):
        return self.n[method] if isinstance(self.n, dict) else self.n


class _PathError(ValueError):
    def __init__(self, path, message):
        super().__init__(message)
        self.path = path


def _check_model_params(cfg):
    p = cfg.model.merged()
    name = cfg.model.name
    if cfg.sweep is not None:
        bad = {
            "d": lambda v: int(v) != v or v < 1,
            "kappa": lambda v: not v >= 0,
        }.get(cfg.sweep.param, lambda v: not v > 0)
        if any(bad(v) for v in cfg.sweep.values):
            raise _PathError(("sweep", "values"), f"invalid value for {cfg.sweep.param}")
    if name == "radial":
        if int(p["d"]) != p["d"] or p["d"] < 1:
            raise _PathError(("model", "params", "d"), "d must be a positive integer")
        for k in ("sigma_x", "sigma_y"):
            if not p[k] > 0:
                raise _PathError(("model", "params", k), f"{k} must be positive")
    elif name == "linear":
        for k in ("H", "R", "m0", "P0") + (("F", "Q") if cfg.experiment == "filter-bench" else ()):
            if p[k] is None:
                raise _PathError(("model", "params", k), "required for the linear model")
        try:
            _linear_parts(p)
        except (ValueError, TypeError) as exc:
            raise _PathError(("model", "params"), str(exc)) from None
    elif name == "arm":
        if p["project"] not in ("elbow", "hand"):
            raise _PathError(("model", "params", "project"), "project must be 'elbow' or 'hand'")


def _linear_parts(p):
    m0 = np.atleast_1d(np.asarray(p["m0"], dtype=float))
    d = m0.shape[0]
    P0 = np.atleast_2d(np.asarray(p["P0"], dtype=float))
    H = np.atleast_2d(np.asarray(p["H"], dtype=float))
    R = np.atleast_2d(np.asarray(p["R"], dtype=float))
    if P0.shape != (d, d) or H.shape[1] != d or R.shape != (H.shape[0],) * 2:
        raise ValueError("inconsistent linear model dimensions")
    F = None if p.get("F") is None else np.atleast_2d(np.asarray(p["F"], dtype=float))
    Q = None if p.get("Q") is None else np.atleast_2d(np.asarray(p["Q"], dtype=float))
    if F is not None and (F.shape != (d, d) or Q is None or Q.shape != (d, d)):
        raise ValueError("F and Q must be d x d")
    return F, Q, H, R, m0, P0


def _format_path(loc):
    return ".".join(str(p) for p in loc) or "<root>"


def load_config(source):
    """Validate a config given as a dict, a JSON string or a path.

    Raises
    ------
    ConfigError
        With the offending field path in the message.
    """
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            try:
                with open(text) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        parts = []
        for err in exc.errors():
            ctx = err.get("ctx", {}).get("error")
            loc = getattr(ctx, "path", None) or err["loc"]
            msg = str(ctx) if ctx is not None else err["msg"]
            parts.append(f"{_format_path(loc)}: {msg}")
        raise ConfigError("; ".join(parts)) from None


# ---------------------------------------------------------------------------
# metrics and rows


@dataclass(frozen=True)
class MetricRow:
    """One CSV record. Optional cells are ``None`` and written empty; a
    diverged run has empty ess and rmse."""

    experiment_id: str
    method: str
    sweep_value: Optional[float]
    replicate: int
    time_index: Optional[int]
    n: int
    ess: Optional[float]
    rmse: Optional[float]
    wall_ms: Optional[float]
    diverged: bool
    steps_mean: Optional[float]
    rejects_mean: Optional[float]
    flagged: Optional[int]

    def __post_init__(self):
        if self.ess is not None and not (1.0 - 1e-9 <= self.ess <= self.n + 1e-9):
            raise ValueError(f"ess {self.ess} outside [1, {self.n}]")
        if self.rmse is not None and not self.rmse >= 0:
            raise ValueError(f"rmse {self.rmse} must be >= 0")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"non-finite {f.name}")

    def sort_key(self):
        sv = -math.inf if self.sweep_value is None else self.sweep_value
        ti = -1 if self.time_index is None else self.time_index
        return (sv, self.replicate, self.method, ti)


COLUMNS = tuple(f.name for f in fields(MetricRow))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows):
    """CSV text with a header, rows in (sweep value, replicate, method,
    time) order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in sorted(rows, key=MetricRow.sort_key):
        w.writerow([_cell(v) for v in astuple(r)])
    return buf.getvalue()


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def compute_rmse(estimates, truths, components=None):
    """Root of the mean (over rows) squared Euclidean error on the selected
    components. Scalar series are treated as one component."""
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if t.ndim == 1:
        t = t[:, None]
    if e.shape[0] != t.shape[0]:
        raise ValueError(f"length mismatch: {e.shape[0]} estimates, {t.shape[0]} truths")
    if e.shape[1] != t.shape[1]:
        raise ValueError("estimate and truth dimensions differ")
    if components is not None:
        idx = list(components)
        e, t = e[:, idx], t[:, idx]
    return float(np.sqrt(np.mean(np.sum((e - t) ** 2, axis=1))))


def _f(v):
    return None if v is None or not np.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# sampler sweeps


def _sampler_problem(cfg, value, data_gen):
    """(target, reference mean, flow kappa) for one sweep point; the
    observation is simulated from the model."""
    p = cfg.model.merged()
    kappa = cfg.flow.kappa
    if cfg.sweep is not None:
        if cfg.sweep.param == "kappa":
            kappa = value
        elif cfg.sweep.param == "d":
            p["d"] = int(value)
        else:
            p[cfg.sweep.param] = value
    if cfg.model.name == "radial":
        d, sx, sy = int(p["d"]), float(p["sigma_x"]), float(p["sigma_y"])
        if p["y"] is None:
            x = 1.0 + sx * data_gen.standard_normal(d)
            y = np.linalg.norm(x) + sy * data_gen.standard_normal()
        else:
            y = float(p["y"])
        target = models.radial_target(d, sx, sy, y)
        return target, radial_posterior_mean(d, sx, sy, y), kappa
    _, _, H, R, m0, P0 = _linear_parts(p)
    x = m0 + np.linalg.cholesky(P0) @ data_gen.standard_normal(m0.shape[0])
    y = H @ x + np.linalg.cholesky(R) @ data_gen.standard_normal(H.shape[0])
    lin = LinearGaussianModel(m0, P0, H, R, y)
    ssm = models.linear_gaussian_ssm(np.eye(m0.shape[0]), np.eye(m0.shape[0]), H, R, m0, P0)
    return ssm.target(m0, P0, y), sequence_moments(lin, 1.0).mean, kappa


def _sampler_task(cfg, point, value, rep):
    data_gen = generator(cfg.seed, _DATA, point, rep)
    target, ref, kappa = _sampler_problem(cfg, value, data_gen)
    ctrl = cfg.step_control.build()
    grid = cfg.flow.grid()
    rows = []
    for method in cfg.methods:
        n = cfg.count(method)
        key = (point, rep, METHOD_IDS[method])
        t0 = time.perf_counter()
        opts = {"kappa": kappa, "ctrl": ctrl, "grid": grid, "threads": 1} if method == "flow-is" else {}
        try:
            ws = run_method(method, target, n, cfg.seed, key, **opts)
            w = ws.normalized
            est = w @ ws.states
            ok = bool(np.all(np.isfinite(est)))
        except (DegenerateWeightsError, GaussFlowError, np.linalg.LinAlgError):
            ws, ok = None, False
        wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        steps = rejects = flagged = None
        if ok and method == "flow-is":
            steps = float(np.mean(ws.diagnostics["n_accepted"]))
            rejects = float(np.mean(ws.diagnostics["n_rejected"]))
            flagged = int(np.sum(ws.diagnostics["flagged"]))
        rows.append(MetricRow(
            experiment_id=cfg.id,
            method=method,
            sweep_value=None if cfg.sweep is None else float(value),
            replicate=rep,
            time_index=None,
            n=n,
            ess=_f(ws.ess) if ok else None,
            rmse=compute_rmse(est[None], ref[None], cfg.rmse_components) if ok else None,
            wall_ms=wall,
            diverged=not ok,
            steps_mean=steps,
            rejects_mean=rejects,
            flagged=flagged,
        ))
    return rows


def run_sampler_sweep(config, seed=None, threads=None):
    """Rows for every sweep value x replicate x method (one row each)."""
    cfg = _with_seed(config, seed)
    values = cfg.sweep.values if cfg.sweep is not None else [None]
    tasks = [(i, v, r) for i, v in enumerate(values) for r in range(cfg.replicates)]
    parts = map_ordered(lambda t: _sampler_task(cfg, *t), tasks, threads)
    return sorted((row for part in parts for row in part), key=MetricRow.sort_key)


# ---------------------------------------------------------------------------
# filter benchmarks


def _int_seed(*key):
    return int(derive(*key).generate_state(1, np.uint32)[0])


def bench_model(cfg, dataset):
    """State-space model for one benchmark dataset."""
    p = cfg.model.merged()
    s = _int_seed(cfg.seed, _DATA, dataset, 1)
    if cfg.model.name == "altitude":
        terrain = None if p["terrain"] is None else models.TerrainMap.load(p["terrain"])
        return models.altitude_scenario(s, terrain)
    if cfg.model.name == "arm":
        return models.arm_scenario(s, p["project"])
    F, Q, H, R, m0, P0 = _linear_parts(p)
    return models.linear_gaussian_ssm(F, Q, H, R, m0, P0)


def _proposal(cfg, method):
    return ProposalKind(method, flow=FlowConfig(cfg.flow.kappa), ctrl=cfg.step_control.build(),
                        grid=None if cfg.flow.grid_steps is None else tuple(cfg.flow.grid()))


def match_particle_counts(cfg, ssm, ys, warmup=5, pilot=100):
    """Particle counts giving each method the per-step time of the
    reference method at its configured count (median over ``warmup``
    steps of a pilot run). Timing-dependent, hence not reproducible."""
    ref = cfg.walltime_reference
    ys = ys[:warmup]

    def per_particle_step(method, n):
        t0 = time.perf_counter()
        res = run_filter(ssm, ys, _proposal(cfg, method), n, seed=cfg.seed, threads=1)
        return (time.perf_counter() - t0) / (len(ys) * n), res

    budget = per_particle_step(ref, cfg.count(ref))[0] * cfg.count(ref)
    out = {}
    for m in cfg.methods:
        out[m] = cfg.count(ref) if m == ref else max(1, int(budget / per_particle_step(m, pilot)[0]))
    return out


def _bench_task(cfg, dataset, counts):
    ssm = bench_model(cfg, dataset)
    xs, ys = models.simulate(ssm, cfg.T, _int_seed(cfg.seed, _DATA, dataset, 2))
    comps = cfg.rmse_components if cfg.rmse_components is not None else ssm.rmse_components
    rows = []
    for method in cfg.methods:
        n = counts[method]
        t0 = time.perf_counter()
        res = run_filter(ssm, ys, _proposal(cfg, method), n,
                         seed=_int_seed(cfg.seed, dataset, METHOD_IDS[method]), threads=1)
        wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        steps = [r.steps_mean for r in res.records if r.steps_mean is not None and np.isfinite(r.steps_mean)]
        rows.append(MetricRow(
            experiment_id=cfg.id,
            method=method,
            sweep_value=None,
            replicate=dataset,
            time_index=None,
            n=n,
            ess=None if res.diverged else float(np.clip(np.mean(res.ess), 1.0, n)),
            rmse=None if res.diverged else compute_rmse(res.means, xs, comps),
            wall_ms=wall,
            diverged=res.diverged,
            steps_mean=float(np.mean(steps)) if steps else None,
            rejects_mean=None,
            flagged=int(sum(r.flagged for r in res.records)),
        ))
    return rows


def run_filter_bench(config, seed=None, threads=None):
    """One row per dataset and filter: time-averaged ESS and position RMSE
    (empty for a diverged run, which is flagged instead)."""
    cfg = _with_seed(config, seed)
    if cfg.n_mode == "walltime":
        ssm = bench_model(cfg, 0)
        _, ys = models.simulate(ssm, cfg.T, _int_seed(cfg.seed, _DATA, 0, 2))
        counts = match_particle_counts(cfg, ssm, ys)
    else:
        counts = {m: cfg.count(m) for m in cfg.methods}
    parts = map_ordered(lambda d: _bench_task(cfg, d, counts), range(cfg.datasets), threads)
    return sorted((row for part in parts for row in part), key=MetricRow.sort_key)


def _with_seed(config, seed):
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": int(seed)})
    return cfg


def run_config(config, seed=None, threads=None):
    cfg = _with_seed(config, seed)
    if cfg.experiment == "filter-bench":
        return run_filter_bench(cfg, threads=threads)
    return run_sampler_sweep(cfg, threads=threads)


def verify_csv(seed=0):
    """Run the built-in checks; CSV text and overall pass flag."""
    results = run_checks(seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("check", "passed", "value", "threshold"))
    for r in results:
        w.writerow((r.name, "1" if r.passed else "0", repr(float(r.value)), repr(float(r.threshold))))
    return buf.getvalue(), all(bool(r.passed) for r in results), results


# ---------------------------------------------------------------------------
# command line

_COMMAND_KIND = {"sample": "single-run", "filter": "filter-bench", "sweep": "sampler-sweep"}


def _parser():
    ap = argparse.ArgumentParser(prog="gaussflow", description="Gaussian-flow importance sampling experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("sample", "filter", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
    p = sub.add_parser("verify")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return ap


def _write(text, out):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fail(exc):
    kind = getattr(exc, "kind", type(exc).__name__)
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return 2


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            text, ok, results = verify_csv(args.seed)
            for r in results:
                sys.stderr.write(f"{'PASS' if r.passed else 'FAIL'} {r.name} {float(r.value):.3g} (< {r.threshold:g})\n")
            _write(text, args.out)
            return 0 if ok else 1
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        cfg = load_config(args.config)
        if cfg.experiment != _COMMAND_KIND[args.command]:
            raise ConfigError(f"experiment: '{args.command}' expects {_COMMAND_KIND[args.command]!r}, "
                              f"config has {cfg.experiment!r}")
        rows = run_config(cfg, args.seed)
        _write(rows_to_csv(rows), args.out or cfg.output)
        return 0
    except (GaussFlowError, ValueError, OSError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
