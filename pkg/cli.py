#!/usr/bin/env python3
"""
Contact Process Lab command line.

Every subcommand builds one JSON experiment document (or reads it with
``run --config``), validates it, runs it and writes a CSV plus a JSON
manifest. Both artifacts carry the sha256 of the canonical document and the
constants block, so the same document always reproduces the same bytes.
"""

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import certificates
import estimators
import starlab
from config import Config, check_star_constants
from engine import STANDARD, ProcessVariant, simulate
from topology import Configuration, TreeModel, TreeSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_REFUSED = 3

COMMANDS = ("bounds", "certify", "star", "simulate", "estimate", "sweep")
STAR_EXPERIMENTS = (
    "table", "theorem", "hitting", "holding", "holding-curve",
    "relay", "extinction", "extinction-curve", "scale", "transmission",
)
ESTIMATE_EXPERIMENTS = (
    "survival", "root-occupation", "bisection", "intersection",
    "reach", "severed", "weight", "duality",
)
SWEEP_EXPERIMENTS = ("survival", "root-occupation")


class ConfigError(ValueError):
    """A document that validates field by field but misses what its command needs."""


# ---------------------------------------------------------------------------
# Experiment document
# ---------------------------------------------------------------------------

class ConstantsBlock(BaseModel):
    """Per-experiment overrides of the Config constants."""

    model_config = ConfigDict(extra="forbid")

    c5: float = Field(default_factory=lambda: Config.C5)
    c9: float = Field(default_factory=lambda: Config.C9)
    c10: float = Field(default_factory=lambda: Config.C10)
    c11: float = Field(default_factory=lambda: Config.C11)
    c2: float = Field(default_factory=lambda: Config.C2)
    c3: float = Field(default_factory=lambda: Config.C3)
    c4: float = Field(default_factory=lambda: Config.C4)
    c: float = Field(default_factory=lambda: Config.C)
    c_prime: float = Field(default_factory=lambda: Config.C_PRIME)
    holdsout_c: float = Field(default_factory=lambda: Config.HOLDSOUT_C)

    @model_validator(mode="after")
    def _star_chain(self):
        check_star_constants(self.c5, self.c9, self.c10, self.c11)
        return self

    def star(self) -> Dict[str, float]:
        return {"c5": self.c5, "c9": self.c9, "c10": self.c10, "c11": self.c11}


class LambdaGrid(BaseModel):
    """Inclusive grid of infection rates, spacing always declared."""

    model_config = ConfigDict(extra="forbid")

    spacing: Literal["linear", "log", "values"]
    start: Optional[float] = Field(default=None, ge=0.0)
    stop: Optional[float] = Field(default=None, ge=0.0)
    num: Optional[int] = Field(default=None, ge=1)
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _complete(self):
        if self.spacing == "values":
            if not self.values:
                raise ValueError("spacing 'values' needs a non-empty 'values' list")
            if any(v < 0 for v in self.values):
                raise ValueError("lambda values must be non-negative")
            return self
        if self.start is None or self.stop is None or self.num is None:
            raise ValueError(f"spacing '{self.spacing}' needs start, stop and num")
        if self.spacing == "log" and self.start <= 0:
            raise ValueError("log spacing needs start > 0")
        return self

    def points(self) -> List[float]:
        if self.spacing == "values":
            return [float(v) for v in self.values]
        if self.spacing == "linear":
            return [float(v) for v in np.linspace(self.start, self.stop, self.num)]
        return [float(v) for v in np.geomspace(self.start, self.stop, self.num)]

    @classmethod
    def parse(cls, text: str) -> "LambdaGrid":
        """'linear:0.3:1.0:8', 'log:0.1:2:5' or 'values:0.4,0.8'."""
        spacing, _, rest = text.partition(":")
        if spacing == "values":
            return cls(spacing="values", values=[float(v) for v in rest.split(",") if v])
        start, stop, num = rest.split(":")
        return cls(spacing=spacing, start=float(start), stop=float(stop), num=int(num))


class Outputs(BaseModel):
    model_config = ConfigDict(extra="forbid")

    csv: Optional[str] = None
    manifest: Optional[str] = None
    jsonl: Optional[str] = None


class ExperimentConfig(BaseModel):
    """One experiment; determines every artifact byte for byte."""

    model_config = ConfigDict(extra="forbid")

    command: Literal["bounds", "certify", "star", "simulate", "estimate", "sweep"]
    experiment: Optional[str] = None
    tree: Optional[TreeSpec] = None
    lam: Optional[float] = Field(default=None, ge=0.0)
    lam_grid: Optional[LambdaGrid] = None
    horizon: Optional[float] = Field(default=None, gt=0.0)
    runs: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None
    variant: ProcessVariant = STANDARD
    constants: ConstantsBlock = Field(default_factory=ConstantsBlock)
    params: Dict[str, Any] = Field(default_factory=dict)
    outputs: Outputs = Field(default_factory=Outputs)
    jobs: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _command_needs(self):
        allowed = {"star": STAR_EXPERIMENTS, "estimate": ESTIMATE_EXPERIMENTS, "sweep": SWEEP_EXPERIMENTS}
        if self.command in allowed:
            if self.experiment not in allowed[self.command]:
                raise ValueError(
                    f"experiment must be one of {', '.join(allowed[self.command])} for '{self.command}'"
                )
        if self.command in ("simulate", "estimate", "sweep"):
            if self.tree is None:
                raise ValueError(f"tree is required for '{self.command}'")
            if self.seed is None:
                raise ValueError(f"seed is required for '{self.command}'")
        if self.command in ("estimate", "sweep") and self.runs is None:
            raise ValueError(f"runs is required for '{self.command}'")
        if self.command == "simulate" and (self.lam is None or self.horizon is None):
            raise ValueError("lam and horizon are required for 'simulate'")
        if self.command == "sweep" and self.lam_grid is None:
            raise ValueError("lam_grid is required for 'sweep'")
        if self.command == "certify" and self.lam is None:
            raise ValueError("lam is required for 'certify'")
        return self

    def canonical(self) -> str:
        document = self.model_dump(mode="json", exclude={"outputs", "jobs"})
        return json.dumps(document, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Per-command parameters
# ---------------------------------------------------------------------------

class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoundsParams(_Params):
    n: List[int] = Field(min_length=1)

    @model_validator(mode="after")
    def _at_least_two(self):
        if min(self.n) < 2:
            raise ValueError("bounds need n >= 2")
        return self


class CertifyParams(_Params):
    scheme: Literal["rdy", "kc", "exponential"]
    n: int = Field(ge=2)
    r: Optional[float] = None
    d: Optional[float] = None
    Y: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    tolerance: float = Field(default=1e-4, ge=0.0)
    recipe: bool = False

    @model_validator(mode="after")
    def _scheme_parameters(self):
        if self.scheme == "kc" and (self.a is None or self.b is None):
            raise ValueError("scheme 'kc' needs a and b")
        if self.scheme == "rdy" and not self.recipe and None in (self.r, self.d, self.Y):
            raise ValueError("scheme 'rdy' needs r, d and Y (or recipe=true)")
        return self


class StarRunParams(_Params):
    n: int = Field(ge=1)
    a: Optional[float] = Field(default=None, gt=0.0)
    a_grid: Optional[List[float]] = None
    start: Optional[Tuple[int, int]] = None
    lower: Optional[int] = Field(default=None, ge=1)
    upper: Optional[int] = Field(default=None, ge=1)
    r: Optional[int] = Field(default=None, ge=0)
    eta: Optional[Tuple[int, int]] = None
    method: Literal["lumped", "engine"] = "lumped"
    xs: Optional[List[float]] = None
    step: float = Field(default=1e-4, gt=0.0)
    ring_r: Optional[float] = Field(default=None, gt=0.0)
    refined: bool = False


class RunParams(_Params):
    init: List[List[int]] = Field(default_factory=lambda: [[]])
    policy: estimators.SurvivalPolicy = "alive-or-escaped"
    escape_threshold: Optional[int] = Field(default=None, ge=1)
    time_grid: Optional[List[float]] = None
    lam_lo: Optional[float] = Field(default=None, ge=0.0)
    lam_hi: Optional[float] = Field(default=None, gt=0.0)
    tolerance: Optional[float] = Field(default=None, gt=0.0)
    criterion: Literal["survival", "root-occupation"] = "survival"
    floor: float = Field(default=0.01, gt=0.0, lt=1.0)
    size_cap: int = Field(default=20_000, ge=1)
    distances: Optional[List[int]] = None
    r_grid: Optional[List[Optional[int]]] = None
    scheme: Optional[certificates.WeightScheme] = None
    A: Optional[List[List[int]]] = None
    B: Optional[List[List[int]]] = None
    t: Optional[float] = Field(default=None, ge=0.0)


def _require(params: BaseModel, experiment: str, *names: str):
    missing = [name for name in names if getattr(params, name) is None]
    if missing:
        raise ConfigError(f"params.{missing[0]}: required for '{experiment}'")


# ---------------------------------------------------------------------------
# Outcomes
# ---------------------------------------------------------------------------

@dataclass
class Check:
    """ok=None marks a quantity that is reported but not asserted."""

    ok: Optional[bool]
    text: str

    def line(self) -> str:
        marker = {True: "✅", False: "❌", None: "⚠️ "}[self.ok]
        return f"{marker} {self.text}"


@dataclass
class Outcome:
    frame: pd.DataFrame
    checks: List[Check] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    trajectory: Any = None

    @property
    def passed(self) -> bool:
        return all(c.ok is not False for c in self.checks)


def _estimate_row(est: estimators.Estimate, **point) -> Dict[str, Any]:
    row = dict(point)
    row.update(
        estimate=est.value,
        ci_low=est.ci_low,
        ci_high=est.ci_high,
        runs=est.runs,
        successes=est.successes,
        censored=est.censored,
        seed=est.seed,
    )
    for key, value in sorted(est.detail.items()):
        if value is None or isinstance(value, (bool, int, float, str)):
            row.setdefault(key, value)
    return row


def _vertex(v) -> str:
    return json.dumps(list(v))


# ---------------------------------------------------------------------------
# bounds / certify
# ---------------------------------------------------------------------------

def _run_bounds(config: ExperimentConfig) -> Outcome:
    params = BoundsParams.model_validate(config.params)
    tables = [certificates.bound_table(n) for n in params.n]
    frame = pd.DataFrame([t.row() for t in tables])
    sandwich = all(1 / t.n < t.lambda1_upper < 1 / (t.n - 1) for t in tables)
    separated = all(t.lambda1_upper < t.lambda_a_lower_refined for t in tables if t.n >= 3)
    checks = [
        Check(sandwich, "1/n < lambda1 upper bound < 1/(n-1) on every row"),
        Check(separated, "lambda1 upper bound < refined lambda_a lower bound for n >= 3"),
    ]
    return Outcome(frame, checks, {"provenance": tables[0].provenance})


def _certificate(config: ExperimentConfig, params: CertifyParams) -> certificates.DriftCertificate:
    if params.scheme == "kc":
        cert = certificates.kc_certificate(params.n, config.lam, params.a, params.b)
    elif params.scheme == "exponential":
        cert = certificates.exponential_certificate(params.n, config.lam)
    elif params.recipe:
        cert = certificates.rdy_recipe_certificate(params.n, config.lam)
    else:
        cert = certificates.check_rdy(params.n, config.lam, params.r, params.d, params.Y)
    return cert.model_copy(update={"tolerance": params.tolerance})


def _run_certify(config: ExperimentConfig) -> Outcome:
    params = CertifyParams.model_validate(config.params)
    cert = _certificate(config, params)
    frame = pd.DataFrame({
        "case": cert.cases,
        "value": cert.values,
        "slack": cert.slacks,
        "strict": cert.strict,
    })
    ok = cert.feasible or cert.feasible_within_tolerance
    summary = {"verdict": cert.summary(), "parameters": cert.parameters, "extras": cert.extras}
    return Outcome(frame, [Check(ok, f"{params.scheme}: {cert.summary()}")], summary)


# ---------------------------------------------------------------------------
# star
# ---------------------------------------------------------------------------

def _star_params(config: ExperimentConfig, params: StarRunParams, a: Optional[float] = None) -> starlab.StarParams:
    return starlab.StarParams(n=params.n, a=params.a if a is None else a, **config.constants.star())


def _run_star(config: ExperimentConfig) -> Outcome:
    params = StarRunParams.model_validate(config.params)
    experiment = config.experiment
    if experiment in ("holding-curve", "extinction-curve"):
        _require(params, experiment, "a_grid")
    elif experiment != "transmission":
        _require(params, experiment, "a")
    if experiment in ("hitting", "holding", "holding-curve", "relay", "extinction", "extinction-curve"):
        if config.runs is None or config.seed is None:
            raise ConfigError(f"runs and seed are required for star '{experiment}'")
    jobs = config.jobs

    if experiment == "table":
        return Outcome(starlab.star_table(_star_params(config, params)))

    if experiment == "theorem":
        star = _star_params(config, params)
        star.require_theorem_mode()
        report = starlab.theorem_star_report(star)
        checks = [
            Check(report.within_supermartingale_bound,
                  f"exact drop probability {report.exact:.6g} <= W bound {report.supermartingale_bound:.6g}"),
            Check(None, f"exp(-a^2/c5) = {report.theorem_bound:.6g} "
                        f"({'holds' if report.within_theorem_bound else 'exceeded'}; reported only)"),
        ]
        return Outcome(pd.DataFrame([report.model_dump(exclude={"violations"})]), checks)

    if experiment == "hitting":
        star = _star_params(config, params)
        start = starlab.StarState(*(params.start or (0, star.y)))
        lower = params.lower or math.ceil(star.drop_level)
        upper = params.upper or min(math.ceil(star.rise_level), star.n)
        exact = starlab.hitting_probability_exact(star, start, lower, upper)
        mc = starlab.hitting_probability_mc(star, start, lower, upper, config.runs, config.seed)
        sigma = math.sqrt(max(exact * (1 - exact), 1e-300) / mc.runs)
        row = _estimate_row(mc, n=star.n, a=star.a, I=start.I, x=start.x)
        row.update(exact=exact, sigma=sigma)
        checks = [Check(abs(mc.value - exact) <= 3 * sigma,
                        f"Monte Carlo {mc.value:.4f} vs exact {exact:.4f} (3 sigma = {3 * sigma:.4f})")]
        return Outcome(pd.DataFrame([row]), checks)

    if experiment == "holding":
        star = _star_params(config, params)
        est = starlab.holding_experiment(star, config.runs, config.seed, params.method)
        floor = math.exp(-1) / 5
        theorem_mode = not star.hypothesis_violations()
        text = f"holding CI lower {est.ci_low:.4f} vs floor e^-1/5 = {floor:.4f}"
        checks = [Check(est.ci_low >= floor if theorem_mode else None, text)]
        return Outcome(pd.DataFrame([_estimate_row(est, n=star.n, a=star.a)]), checks)

    if experiment == "holding-curve":
        curve = starlab.holding_curve(params.n, params.a_grid, config.runs, config.seed, **config.constants.star())
        return Outcome(pd.DataFrame([_estimate_row(e, a=a) for a, e in zip(params.a_grid, curve)]))

    if experiment == "relay":
        _require(params, experiment, "r")
        star = _star_params(config, params)
        curve = starlab.relay_curve(star, params.r, config.runs, config.seed, config.horizon, jobs)
        ordered = all(e.detail["ordered"] for e in curve)
        frame = pd.DataFrame([_estimate_row(e, n=star.n, a=star.a) for e in curve])
        return Outcome(frame, [Check(ordered, "chain hitting times nondecreasing in r in every run")])

    if experiment == "extinction":
        _require(params, experiment, "eta")
        est = starlab.extinction_window_experiment(params.n, params.a, params.eta, config.runs, config.seed)
        return Outcome(pd.DataFrame([_estimate_row(est, n=params.n, I=params.eta[0], x=params.eta[1])]))

    if experiment == "extinction-curve":
        _require(params, experiment, "eta")
        I, x = params.eta
        eta = Configuration.of(([()] if I else []) + [(i,) for i in range(x)])
        curve = starlab.extinction_window_curve(params.n, params.a_grid, eta, config.runs, config.seed, jobs)
        violations = curve[0].detail["coupling_violations"]
        frame = pd.DataFrame([_estimate_row(e, n=params.n) for e in curve])
        return Outcome(frame, [Check(violations == 0, f"{violations} coupling violations across the a-grid")])

    if experiment == "scale":
        xs = params.xs or [float(v) for v in np.linspace(params.step, 0.9 * params.a, 90)]
        first, second = starlab.scale_residuals(params.a, xs, params.step)
        frame = pd.DataFrame({"x": xs, "residual_f": first, "residual_g": second})
        worst = float(max(np.max(np.abs(first)), np.max(np.abs(second))))
        return Outcome(frame, [Check(worst < 1e-6, f"max scale-function residual {worst:.3e}")])

    _require(params, experiment, "ring_r")
    threshold = starlab.ring_threshold(params.n, params.ring_r, params.refined)
    frame = pd.DataFrame([{
        "n": params.n,
        "r": params.ring_r,
        "refined": params.refined,
        "threshold": threshold,
        "sqrt_n_threshold": math.sqrt(params.n) * threshold,
    }])
    return Outcome(frame)


# ---------------------------------------------------------------------------
# simulate / estimate / sweep
# ---------------------------------------------------------------------------

def _run_simulate(config: ExperimentConfig) -> Outcome:
    params = RunParams.model_validate(config.params)
    model = TreeModel(config.tree)
    init = [tuple(v) for v in params.init]
    traj = simulate(model, init, config.lam, config.horizon, config.variant, config.seed)
    frame = pd.DataFrame({
        "t": traj.times,
        "vertex": [_vertex(v) for v in traj.vertices],
        "event": ["infect" if k > 0 else "recover" for k in traj.kinds],
    }, columns=["t", "vertex", "event"])
    summary = {
        "extinction_time": traj.extinction_time,
        "censored": traj.censored,
        "end_time": traj.end_time,
        "max_k": traj.max_k,
        "ever_infected": len(traj.ever_infected),
    }
    checks = [Check(None if not traj.censored else False,
                    f"{len(traj.times)} events, max k = {traj.max_k}, extinction at {traj.extinction_time}")]
    return Outcome(frame, checks, summary, trajectory=traj)


def _homogeneous_n(model: TreeModel, experiment: str) -> int:
    if model.family != "homogeneous":
        raise ConfigError(f"tree: '{experiment}' needs a homogeneous tree")
    return model.n


def _run_estimate(config: ExperimentConfig) -> Outcome:
    params = RunParams.model_validate(config.params)
    model = TreeModel(config.tree)
    experiment = config.experiment
    runs, seed, jobs = config.runs, config.seed, config.jobs
    if experiment in ("survival", "intersection", "severed") and (config.lam is None or config.horizon is None):
        raise ConfigError(f"lam and horizon are required for '{experiment}'")
    if experiment in ("root-occupation", "reach", "weight", "duality") and config.lam is None:
        raise ConfigError(f"lam is required for '{experiment}'")

    if experiment == "survival":
        est = estimators.survival_probability(
            model, config.lam, config.horizon, runs, seed, params.policy,
            params.escape_threshold, config.variant, [tuple(v) for v in params.init], jobs=jobs,
        )
        return Outcome(pd.DataFrame([_estimate_row(est, lam=config.lam)]))

    if experiment == "root-occupation":
        _require(params, experiment, "time_grid")
        curve = estimators.root_occupation_curve(model, config.lam, params.time_grid, runs, seed, jobs=jobs)
        return Outcome(pd.DataFrame([_estimate_row(e, lam=config.lam) for e in curve]))

    if experiment == "bisection":
        _require(params, experiment, "lam_lo", "lam_hi", "tolerance")
        result = estimators.critical_bisection(
            model, params.lam_lo, params.lam_hi, params.tolerance, runs, seed, params.criterion,
            config.horizon or 200.0, params.floor, params.escape_threshold, jobs,
        )
        frame = pd.DataFrame([_estimate_row(s.estimate, lam=s.lam, verdict=s.verdict) for s in result.steps])
        checks = [Check(None, f"bracket [{result.lam_lo:.6g}, {result.lam_hi:.6g}]: {result.caveat}")]
        checks += [Check(None, flag) for flag in result.flags]
        summary = {"lam_lo": result.lam_lo, "lam_hi": result.lam_hi, "flags": result.flags, "caveat": result.caveat}
        return Outcome(frame, checks, summary)

    if experiment == "intersection":
        n = _homogeneous_n(model, experiment)
        result = estimators.intersection_experiment(
            n, config.lam, config.horizon, runs, seed, params.escape_threshold, params.size_cap, jobs
        )
        frame = pd.DataFrame([
            _estimate_row(result.intersection, quantity="intersection", lam=config.lam),
            _estimate_row(result.branching, quantity="branching", lam=config.lam),
        ])
        gap = result.offspring_mean - result.offspring_formula
        z = gap / result.offspring_stderr if result.offspring_stderr > 0 else (0.0 if gap == 0 else math.inf)
        checks = [Check(abs(z) <= 3, f"offspring mean {result.offspring_mean:.4f} vs formula "
                                     f"{result.offspring_formula:.4f} (z = {z:.2f})")]
        summary = result.model_dump(include={"offspring_mean", "offspring_stderr", "offspring_formula", "offspring_samples"})
        return Outcome(frame, checks, summary)

    if experiment == "reach":
        _require(params, experiment, "distances")
        curve = estimators.reach_decay_experiment(
            model, config.lam, params.distances, runs, seed, config.horizon or 1000.0, jobs
        )
        ordered = all(e.detail["ordered"] for e in curve)
        frame = pd.DataFrame([_estimate_row(e, lam=config.lam) for e in curve])
        return Outcome(frame, [Check(ordered, "ray hitting times nondecreasing in d in every run")])

    if experiment == "severed":
        _require(params, experiment, "r_grid")
        result = estimators.severed_comparison(
            model, config.lam, params.r_grid, config.horizon, runs, seed, params.escape_threshold, jobs
        )
        rows = [_estimate_row(result.unaltered, r="unaltered", gap=0)]
        rows += [_estimate_row(e, r=label, gap=result.gaps[label]) for label, e in result.severed.items()]
        checks = [Check(result.violations == 0, f"{result.violations} runs where a severed process outlived the unaltered one")]
        return Outcome(pd.DataFrame(rows), checks)

    if experiment == "weight":
        _require(params, experiment, "scheme", "time_grid")
        result = estimators.weight_trajectory(model, config.lam, params.scheme, runs, seed, params.time_grid, jobs)
        frame = pd.DataFrame({"t": result.times, "mean_weight": result.mean_weight})
        if result.slope is None:
            checks = [Check(None, f"weight hit 0 everywhere; {len(result.extinction_times)} extinction times recorded")]
        elif result.expected_sign == 0:
            checks = [Check(None, f"slope {result.slope:.4f}; certificate silent")]
        else:
            checks = [Check(bool(np.sign(result.slope) == result.expected_sign),
                            f"slope {result.slope:.4f} vs certified sign {result.expected_sign:+d}")]
        return Outcome(frame, checks, result.model_dump(exclude={"times", "mean_weight"}))

    _require(params, experiment, "A", "B", "t")
    result = estimators.duality_symmetry_experiment(
        model, config.lam, [tuple(v) for v in params.A], [tuple(v) for v in params.B], params.t, runs, seed, jobs
    )
    frame = pd.DataFrame([
        _estimate_row(result.a_hits_b, direction="A->B"),
        _estimate_row(result.b_hits_a, direction="B->A"),
    ])
    return Outcome(frame, [Check(None, f"duality z-score {result.z_score:.2f}")])


def _run_sweep(config: ExperimentConfig) -> Outcome:
    params = RunParams.model_validate(config.params)
    model = TreeModel(config.tree)
    grid = config.lam_grid.points()
    top = max(grid)
    rows = []
    for lam in grid:
        if config.experiment == "survival":
            if config.horizon is None:
                raise ConfigError("horizon is required for a survival sweep")
            est = estimators.survival_probability(
                model, lam, config.horizon, config.runs, config.seed, params.policy,
                params.escape_threshold, config.variant, lam_max=top, jobs=config.jobs,
            )
            rows.append(_estimate_row(est, lam=lam))
        else:
            _require(params, "root-occupation", "time_grid")
            curve = estimators.root_occupation_curve(
                model, lam, params.time_grid, config.runs, config.seed, lam_max=top, jobs=config.jobs
            )
            rows.extend(_estimate_row(e, lam=lam) for e in curve)
    return Outcome(pd.DataFrame(rows))


_HANDLERS = {
    "bounds": _run_bounds,
    "certify": _run_certify,
    "star": _run_star,
    "simulate": _run_simulate,
    "estimate": _run_estimate,
    "sweep": _run_sweep,
}


def execute(config: ExperimentConfig) -> Outcome:
    """Run the experiment without touching the filesystem."""
    logger.info("running %s %s (config %s)", config.command, config.experiment or "", config.config_hash()[:12])
    return _HANDLERS[config.command](config)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _default_path(config: ExperimentConfig, suffix: str) -> Path:
    stem = config.command + (f"-{config.experiment}" if config.experiment else "")
    return Path(Config.OUTPUT_DIR) / f"{stem}-{config.config_hash()[:12]}{suffix}"


def write_csv(path: Path, frame: pd.DataFrame, config: ExperimentConfig):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(f"# config_sha256={config.config_hash()}\n")
        fp.write(f"# constants={json.dumps(config.constants.model_dump(), sort_keys=True)}\n")
        frame.to_csv(fp, index=False, lineterminator="\n")


def write_manifest(path: Path, outcome: Outcome, config: ExperimentConfig):
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": json.loads(config.canonical()),
        "config_sha256": config.config_hash(),
        "constants": config.constants.model_dump(),
        "summary": outcome.summary,
        "checks": [{"ok": c.ok, "text": c.text} for c in outcome.checks],
        "rows": len(outcome.frame),
    }
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, sort_keys=True, indent=2, default=str)
        fp.write("\n")


def run(config: ExperimentConfig) -> int:
    """Execute, write artifacts, print the summary; returns the exit status."""
    try:
        outcome = execute(config)
    except starlab.StarParameterError as e:
        print(f"❌ refused: {e}")
        return EXIT_REFUSED
    except ValidationError as e:
        _print_validation_error(e)
        return EXIT_INVALID
    except (ConfigError, certificates.DomainError) as e:
        print(f"❌ invalid config: {e}")
        return EXIT_INVALID
    except estimators.AllRunsCensoredError as e:
        print(f"❌ {e}")
        return EXIT_FAILED

    csv_path = Path(config.outputs.csv) if config.outputs.csv else _default_path(config, ".csv")
    manifest_path = Path(config.outputs.manifest) if config.outputs.manifest else _default_path(config, ".json")
    write_csv(csv_path, outcome.frame, config)
    write_manifest(manifest_path, outcome, config)
    if outcome.trajectory is not None and config.outputs.jsonl:
        jsonl_path = Path(config.outputs.jsonl)
        jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        with open(jsonl_path, "w", encoding="utf-8") as fp:
            outcome.trajectory.to_jsonl(fp)

    with pd.option_context("display.max_rows", 40, "display.width", 160):
        print(outcome.frame.to_string(index=False) if len(outcome.frame) <= 40 else outcome.frame)
    for check in outcome.checks:
        print(check.line())
    print(f"📄 {csv_path}")
    print(f"📄 {manifest_path}")
    return EXIT_OK if outcome.passed else EXIT_FAILED


def _print_validation_error(error: ValidationError):
    print("❌ invalid config:")
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "document"
        print(f"   {where}: {item['msg']}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def parse_n_range(text: str) -> List[int]:
    """'2..10' (inclusive), '2,3,5' or '4'."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",") if part]


def parse_tree(text: str) -> Dict[str, Any]:
    """A JSON document, a path to one, or a shorthand like 'homogeneous:2', 'homogeneous:2:6', 'star:64'."""
    path = Path(text)
    if text.endswith(".json") and path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    if text.lstrip().startswith("{"):
        return json.loads(text)
    family, *numbers = text.split(":")
    if family == "homogeneous" and numbers:
        document = {"family": "homogeneous", "n": int(numbers[0])}
        if len(numbers) > 1:
            document["depth_limit"] = int(numbers[1])
        return document
    if family == "star" and len(numbers) == 1:
        return {"family": "star", "n": int(numbers[0])}
    if family == "star_chain" and len(numbers) == 2:
        return {"family": "star_chain", "n": int(numbers[0]), "r": int(numbers[1])}
    raise argparse.ArgumentTypeError(f"cannot read tree '{text}'")


def _json_arg(text: str):
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Contact process on trees: bounds, certificates and experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def outputs(p):
        p.add_argument("--out", help="CSV artifact path")
        p.add_argument("--manifest", help="JSON manifest path")
        p.add_argument("--jobs", type=int, help="worker processes (default CONTACT_JOBS)")

    def stochastic(p, runs=True):
        p.add_argument("--seed", type=int, required=True)
        if runs:
            p.add_argument("--runs", type=int, required=True)

    p = sub.add_parser("bounds", help="closed-form bound table")
    p.add_argument("--n", type=parse_n_range, required=True, help="e.g. 2..10")
    outputs(p)

    p = sub.add_parser("certify", help="check a weight scheme's drift inequalities")
    p.add_argument("--scheme", choices=["rdy", "kc", "exponential"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    for name in ("r", "d", "Y", "a", "b"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--recipe", action="store_true", help="use the recipe (r, d, Y) for this lambda")
    outputs(p)

    p = sub.add_parser("star", help="finite-star computations and experiments")
    p.add_argument("--experiment", choices=STAR_EXPERIMENTS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--a", type=float)
    p.add_argument("--a-grid", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--r", type=int)
    p.add_argument("--eta", type=lambda s: [int(v) for v in s.split(",")], help="I,x")
    p.add_argument("--method", choices=["lumped", "engine"])
    p.add_argument("--ring-r", type=float)
    p.add_argument("--refined", action="store_true")
    p.add_argument("--horizon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    outputs(p)

    p = sub.add_parser("simulate", help="one trajectory")
    p.add_argument("--tree", type=parse_tree, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--init", type=_json_arg, help="JSON list of vertex paths, default [[]]")
    p.add_argument("--variant", choices=["standard", "no_parent_infection", "severed_edge"], default="standard")
    p.add_argument("--severed-r", type=int)
    p.add_argument("--jsonl", help="event log path")
    stochastic(p, runs=False)
    outputs(p)

    for name, experiments in (("estimate", ESTIMATE_EXPERIMENTS), ("sweep", SWEEP_EXPERIMENTS)):
        p = sub.add_parser(name, help="Monte Carlo estimate" if name == "estimate" else "estimate over a lambda grid")
        p.add_argument("--experiment", choices=experiments, required=True)
        p.add_argument("--tree", type=parse_tree, required=True)
        if name == "estimate":
            p.add_argument("--lambda", dest="lam", type=float)
        else:
            p.add_argument("--lam-grid", type=LambdaGrid.parse, required=True, help="linear:0.3:1.0:8 | log:... | values:0.4,0.8")
        p.add_argument("--horizon", type=float)
        p.add_argument("--params", type=_json_arg, default={}, help="JSON object of experiment parameters")
        p.add_argument("--variant", choices=["standard", "no_parent_infection", "severed_edge"], default="standard")
        p.add_argument("--severed-r", type=int)
        stochastic(p)
        outputs(p)

    p = sub.add_parser("run", help="run a JSON experiment document")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int)
    return parser


def document_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Translate flags into an ExperimentConfig document."""
    if args.command == "run":
        document = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if args.jobs is not None:
            document["jobs"] = args.jobs
        return document

    document: Dict[str, Any] = {"command": args.command, "outputs": {}}
    if getattr(args, "out", None):
        document["outputs"]["csv"] = args.out
    if getattr(args, "manifest", None):
        document["outputs"]["manifest"] = args.manifest
    for key in ("jobs", "seed", "runs", "horizon", "lam", "experiment", "tree"):
        value = getattr(args, key, None)
        if value is not None:
            document[key] = value
    if getattr(args, "variant", "standard") != "standard":
        document["variant"] = {"kind": args.variant, "r": args.severed_r}

    if args.command == "bounds":
        document["params"] = {"n": args.n}
    elif args.command == "certify":
        params = {"scheme": args.scheme, "n": args.n, "recipe": args.recipe}
        for name in ("r", "d", "Y", "a", "b", "tolerance"):
            if getattr(args, name) is not None:
                params[name] = getattr(args, name)
        document["params"] = params
    elif args.command == "star":
        params = {"n": args.n, "refined": args.refined}
        for key, name in (("a", "a"), ("a_grid", "a_grid"), ("r", "r"), ("eta", "eta"), ("method", "method"), ("ring_r", "ring_r")):
            if getattr(args, name) is not None:
                params[key] = getattr(args, name)
        document["params"] = params
    elif args.command == "simulate":
        document["params"] = {"init": args.init} if args.init is not None else {}
        if args.jsonl:
            document["outputs"]["jsonl"] = args.jsonl
    else:
        document["params"] = args.params
        if args.command == "sweep":
            document["lam_grid"] = args.lam_grid.model_dump(exclude_none=True)
    return document


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        Config.validate()
    except ValueError as e:
        print(f"❌ configuration error: {e}")
        return EXIT_INVALID
    try:
        document = document_from_args(args)
    except (OSError, json.JSONDecodeError) as e:
        print(f"❌ cannot read config: {e}")
        return EXIT_INVALID
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        _print_validation_error(e)
        return EXIT_INVALID
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
