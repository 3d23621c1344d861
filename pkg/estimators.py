"""Monte Carlo estimators for survival, root occupation and the meeting process.

Every estimator distributes independent runs over a worker pool. Run i of an
experiment with seed s always uses the schedule seeded by hash(s, "run", i),
so results do not depend on the number of workers.
"""

import heapq
import logging
import math
from multiprocessing import Pool
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.stats import norm

from certificates import WeightScheme, branching_mean_offspring
from config import Config
from engine import NO_PARENT_INFECTION, STANDARD, ContactProcess, EventSchedule, ProcessVariant, severed_edge
from topology import ROOT, HomogeneousSpec, TreeModel, keyed_digest

logger = logging.getLogger(__name__)

SurvivalPolicy = Literal["alive-at-horizon", "alive-or-escaped"]


class AllRunsCensoredError(RuntimeError):
    """Raised when no run finished inside the event budget."""


class Estimate(BaseModel):
    """A probability estimate with its Wilson interval."""

    value: float
    ci_low: float
    ci_high: float
    runs: int
    successes: int
    censored: int = 0
    seed: int
    level: float = Field(default_factory=lambda: Config.CI_LEVEL)
    detail: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _interval_contains_value(self):
        if not 0.0 <= self.ci_low <= self.value <= self.ci_high <= 1.0:
            raise ValueError(f"inconsistent estimate {self.value} in [{self.ci_low}, {self.ci_high}]")
        return self


def wilson_interval(successes: int, trials: int, level: Optional[float] = None):
    level = Config.CI_LEVEL if level is None else level
    if trials <= 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + level / 2)
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, min(centre - half, p)), min(1.0, max(centre + half, p))


def estimate_from_counts(
    successes: int,
    runs: int,
    censored: int,
    seed: int,
    detail: Optional[dict] = None,
    level: Optional[float] = None,
) -> Estimate:
    """Estimate from non-censored run counts; censored runs are reported, never counted."""
    if runs <= 0:
        if censored:
            raise AllRunsCensoredError(f"all {censored} runs were censored")
        raise ValueError("no runs to estimate from")
    level = Config.CI_LEVEL if level is None else level
    lo, hi = wilson_interval(successes, runs, level)
    return Estimate(
        value=successes / runs,
        ci_low=lo,
        ci_high=hi,
        runs=runs,
        successes=successes,
        censored=censored,
        seed=seed,
        level=level,
        detail=detail or {},
    )


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

def run_seed(seed: int, *key) -> int:
    return int.from_bytes(keyed_digest(seed, "run", *key)[:8], "little") & (2**63 - 1)


def _call(task):
    fn, payload, seed, index = task
    return fn(payload, run_seed(seed, index))


def run_pool(fn: Callable, payload, runs: int, seed: int, jobs: Optional[int] = None) -> List[Any]:
    """Results of fn(payload, run_seed(seed, i)) for i < runs, in index order."""
    jobs = Config.JOBS if jobs is None else jobs
    tasks = [(fn, payload, seed, i) for i in range(runs)]
    if jobs <= 1 or runs <= 1:
        return [_call(task) for task in tasks]
    with Pool(processes=jobs) as pool:
        return pool.map(_call, tasks, chunksize=max(1, runs // (4 * jobs)))


def _count(results, seed, detail) -> Estimate:
    finished = [r for r in results if r is not None]
    censored = len(results) - len(finished)
    if censored:
        logger.warning("%d of %d runs censored", censored, len(results))
    return estimate_from_counts(sum(1 for r in finished if r), len(finished), censored, seed, detail)


# ---------------------------------------------------------------------------
# Survival
# ---------------------------------------------------------------------------

def _survival_run(payload, seed):
    spec, lam, lam_max, horizon, policy, threshold, variant, init = payload
    schedule = EventSchedule(TreeModel(spec), seed, lam_max)
    process = ContactProcess(schedule, init, lam, variant)
    stop = (lambda p: p.k >= threshold) if policy == "alive-or-escaped" else None
    escaped = process.run(horizon, stop=stop)
    if process.censored:
        return None
    if escaped:
        return "escaped"
    return "dead" if process.is_extinct else "alive"


def survival_probability(
    model: TreeModel,
    lam: float,
    horizon: float,
    runs: int,
    seed: int,
    policy: SurvivalPolicy = "alive-or-escaped",
    escape_threshold: Optional[int] = None,
    variant: ProcessVariant = STANDARD,
    init=None,
    lam_max: Optional[float] = None,
    jobs: Optional[int] = None,
) -> Estimate:
    """Fraction of runs from the root still infected at the horizon (or escaped, per policy)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    threshold = Config.ESCAPE_THRESHOLD if escape_threshold is None else escape_threshold
    init = [ROOT] if init is None else sorted(init)
    payload = (model.spec, lam, lam if lam_max is None else lam_max, horizon, policy, threshold, variant, init)
    results = run_pool(_survival_run, payload, runs, seed, jobs)
    finished = [r for r in results if r is not None]
    detail = {
        "policy": policy,
        "escape_threshold": threshold if policy == "alive-or-escaped" else None,
        "horizon": horizon,
        "lambda": lam,
        "escaped": finished.count("escaped"),
        "alive_at_horizon": finished.count("alive"),
        "died": finished.count("dead"),
    }
    return _count([None if r is None else r != "dead" for r in results], seed, detail)


# ---------------------------------------------------------------------------
# Root occupation
# ---------------------------------------------------------------------------

def _occupation_run(payload, seed):
    spec, lam, lam_max, grid = payload
    schedule = EventSchedule(TreeModel(spec), seed, lam_max)
    process = ContactProcess(schedule, [ROOT], lam)
    marks = []
    for t in grid:
        process.run(t)
        if process.censored:
            marks.extend([None] * (len(grid) - len(marks)))
            break
        marks.append(ROOT in process.infected)
    return marks


def root_occupation_curve(
    model: TreeModel,
    lam: float,
    time_grid: Sequence[float],
    runs: int,
    seed: int,
    lam_max: Optional[float] = None,
    jobs: Optional[int] = None,
) -> List[Estimate]:
    """P(root infected at t) for each t of the grid, starting from the root alone."""
    grid = sorted(float(t) for t in time_grid)
    results = run_pool(_occupation_run, (model.spec, lam, lam if lam_max is None else lam_max, grid), runs, seed, jobs)
    curve = [_count([marks[i] for marks in results], seed, {"t": t, "lambda": lam}) for i, t in enumerate(grid)]
    tail = curve[len(curve) // 2:]
    if tail:
        logger.info(
            "root occupation tail: liminf proxy %.4f, limsup proxy %.4f",
            min(e.value for e in tail), max(e.value for e in tail),
        )
    return curve


# ---------------------------------------------------------------------------
# Bisection
# ---------------------------------------------------------------------------

class BisectionStep(BaseModel):
    lam: float
    verdict: Literal["subcritical", "supercritical", "ambiguous"]
    estimate: Estimate


class BisectionResult(BaseModel):
    lam_lo: float
    lam_hi: float
    steps: List[BisectionStep]
    flags: List[str]
    caveat: str = "finite-horizon Monte Carlo brackets the transition; it never certifies it"

    @property
    def width(self) -> float:
        return self.lam_hi - self.lam_lo


def critical_bisection(
    model: TreeModel,
    lam_lo: float,
    lam_hi: float,
    tolerance: float,
    runs: int,
    seed: int,
    criterion: Literal["survival", "root-occupation"] = "survival",
    horizon: float = 200.0,
    floor: float = 0.01,
    escape_threshold: Optional[int] = None,
    jobs: Optional[int] = None,
) -> BisectionResult:
    """Bracket the empirical transition by CI separation from a small floor."""
    if not lam_lo < lam_hi:
        raise ValueError("need lam_lo < lam_hi")
    flags = []
    if model.is_finite:
        flags.append("finite graph: every run dies eventually, so the bracket drifts to lam_hi as the horizon grows")
        logger.info("bisection on a finite %s tree", model.family)

    def measure(lam, n_runs):
        if criterion == "survival":
            return survival_probability(
                model, lam, horizon, n_runs, seed, escape_threshold=escape_threshold, lam_max=lam_hi, jobs=jobs
            )
        return root_occupation_curve(model, lam, [horizon], n_runs, seed, lam_max=lam_hi, jobs=jobs)[0]

    def judge(est):
        if est.ci_high < floor:
            return "subcritical"
        if est.ci_low > floor:
            return "supercritical"
        return "ambiguous"

    steps: List[BisectionStep] = []
    lo, hi = lam_lo, lam_hi
    while hi - lo > tolerance:
        mid = (lo + hi) / 2
        est = measure(mid, runs)
        verdict = judge(est)
        if verdict == "ambiguous":
            est = measure(mid, 2 * runs)
            verdict = judge(est)
        steps.append(BisectionStep(lam=mid, verdict=verdict, estimate=est))
        if verdict == "subcritical":
            lo = mid
        elif verdict == "supercritical":
            hi = mid
        else:
            flags.append(f"ambiguous at lambda={mid:.6g} even with {2 * runs} runs; interval left wider than tolerance")
            break

    ordered = sorted(steps, key=lambda s: s.lam)
    for left, right in zip(ordered, ordered[1:]):
        if right.estimate.ci_high < left.estimate.ci_low:
            flags.append(f"non-monotone estimates between lambda={left.lam:.6g} and {right.lam:.6g}; interval widened")
            lo, hi = min(lo, left.lam), max(hi, right.lam)
    return BisectionResult(lam_lo=lo, lam_hi=hi, steps=steps, flags=flags)


# ---------------------------------------------------------------------------
# Two independent processes without parent infection
# ---------------------------------------------------------------------------

class IntersectionResult(BaseModel):
    intersection: Estimate
    branching: Estimate
    offspring_mean: float
    offspring_stderr: float
    offspring_formula: float
    offspring_samples: int


def _first_recovery_after(schedule: EventSchedule, v, t: float) -> float:
    for time, slot, _ in schedule.events(v, t, math.inf):
        if slot < 0:
            return time
    return math.inf


def _first_arrow(schedule: EventSchedule, v, slot: int, threshold: float, start: float, stop: float) -> float:
    for time, s, mark in schedule.events(v, start, stop):
        if s == slot and mark < threshold:
            return time
    return math.inf


def _meeting_branching(left: EventSchedule, right: EventSchedule, n: int, lam: float, horizon: float, threshold: int):
    """Embedded offspring process: children hit from the parent in both schedules before it dies."""
    model = left.model
    accept = lam / left.lam_max if left.lam_max > 0 else 0.0
    events = [(0.0, 0, ROOT)]
    alive = 0
    root_offspring = None
    survived = False
    while events:
        time, kind, v = heapq.heappop(events)
        if time > horizon:
            survived = True
            break
        if kind == 1:
            alive -= 1
            if alive == 0:
                break
            continue
        alive += 1
        if alive >= threshold:
            survived = True
            break
        death = min(_first_recovery_after(left, v, time), _first_recovery_after(right, v, time))
        heapq.heappush(events, (death, 1, v))
        offspring = 0
        for i in range(n):
            w = v + (i,)
            slot = model.slot_of(v, w)
            born = max(
                _first_arrow(left, v, slot, accept, time, death),
                _first_arrow(right, v, slot, accept, time, death),
            )
            if born < death:
                offspring += 1
                heapq.heappush(events, (born, 0, w))
        if v == ROOT:
            root_offspring = offspring
    return survived, root_offspring


def _intersection_run(payload, seed):
    n, lam, horizon, threshold, size_cap = payload
    model = TreeModel(HomogeneousSpec(n=n))
    left = EventSchedule(model, run_seed(seed, "left"), lam)
    right = EventSchedule(model, run_seed(seed, "right"), lam)
    z_survived, root_offspring = _meeting_branching(left, right, n, lam, horizon, threshold)

    a = ContactProcess(left, [ROOT], lam, NO_PARENT_INFECTION)
    b = ContactProcess(right, [ROOT], lam, NO_PARENT_INFECTION)
    shared = 1
    outcome = None
    while outcome is None:
        first, other = (a, b) if a.peek_time() <= b.peek_time() else (b, a)
        if first.peek_time() > horizon:
            outcome = "alive"
            break
        if first.events_processed >= first.max_events:
            return None
        change = first.step()
        if change is None:
            continue
        if change.vertex in other.infected:
            shared += change.kind
        if shared == 0:
            outcome = "empty"
        elif shared >= threshold:
            outcome = "escaped"
        elif a.k + b.k >= size_cap:
            outcome = "capped"
    return outcome, z_survived, root_offspring


def intersection_experiment(
    n: int,
    lam: float,
    horizon: float,
    runs: int,
    seed: int,
    escape_threshold: Optional[int] = None,
    size_cap: int = 20_000,
    jobs: Optional[int] = None,
) -> IntersectionResult:
    """Persistence of the overlap of two independent parent-blind processes, and its branching floor.

    The intersection estimate counts a run as a success unless the overlap empties
    before the horizon. Runs stopped by the escape threshold, by `size_cap` on the
    combined size, or by the horizon itself all count; `detail` splits them into
    `escaped`, `capped` and `alive_at_horizon`, so only `escaped` is a confirmed escape.
    """
    threshold = Config.ESCAPE_THRESHOLD if escape_threshold is None else escape_threshold
    results = run_pool(_intersection_run, (n, lam, horizon, threshold, size_cap), runs, seed, jobs)
    finished = [r for r in results if r is not None]
    outcomes = [r[0] for r in finished]
    detail = {
        "lambda": lam,
        "horizon": horizon,
        "escape_threshold": threshold,
        "size_cap": size_cap,
        "escaped": outcomes.count("escaped"),
        "capped": outcomes.count("capped"),
        "alive_at_horizon": outcomes.count("alive"),
        "emptied": outcomes.count("empty"),
    }
    intersection = _count([None if r is None else r[0] != "empty" for r in results], seed, detail)
    branching = _count(
        [None if r is None else r[1] for r in results],
        seed,
        {"lambda": lam, "mean_offspring": branching_mean_offspring(n, lam)},
    )
    samples = np.array([r[2] for r in finished], dtype=float)
    mean = float(samples.mean()) if samples.size else math.nan
    stderr = float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else math.nan
    return IntersectionResult(
        intersection=intersection,
        branching=branching,
        offspring_mean=mean,
        offspring_stderr=stderr,
        offspring_formula=branching_mean_offspring(n, lam),
        offspring_samples=int(samples.size),
    )


# ---------------------------------------------------------------------------
# Reach along a ray
# ---------------------------------------------------------------------------

def _reach_run(payload, seed):
    spec, lam, depth, horizon = payload
    schedule = EventSchedule(TreeModel(spec), seed, lam)
    process = ContactProcess(schedule, [ROOT], lam)
    ray = {(0,) * d: d for d in range(depth + 1)}
    hits = [math.inf] * (depth + 1)
    hits[0] = 0.0

    def on_change(change):
        d = ray.get(change.vertex)
        if d is not None and change.kind > 0 and hits[d] == math.inf:
            hits[d] = change.time

    process.run(horizon, on_change=on_change, stop=lambda p: hits[depth] < math.inf)
    if process.censored and hits[depth] == math.inf:
        return None
    return hits


def reach_decay_experiment(
    model: TreeModel,
    lam: float,
    distances: Sequence[int],
    runs: int,
    seed: int,
    horizon: float = 1000.0,
    jobs: Optional[int] = None,
) -> List[Estimate]:
    """P(the depth-d vertex of the first ray is ever infected) for each d."""
    depth = max(distances)
    results = run_pool(_reach_run, (model.spec, lam, depth, horizon), runs, seed, jobs)
    finished = [h for h in results if h is not None]
    ordered = all(all(h[d] <= h[d + 1] for d in range(depth)) for h in finished)
    if not ordered:
        logger.warning("ray hitting times out of order in some realization")
    censored = runs - len(finished)
    return [
        estimate_from_counts(
            sum(1 for h in finished if h[d] <= horizon), len(finished), censored, seed,
            {"distance": d, "lambda": lam, "ordered": ordered},
        )
        for d in distances
    ]


# ---------------------------------------------------------------------------
# Severed edges
# ---------------------------------------------------------------------------

class SeveredComparison(BaseModel):
    unaltered: Estimate
    severed: Dict[str, Estimate]
    gaps: Dict[str, int]
    violations: int


def _severed_run(payload, seed):
    spec, lam, r_grid, horizon, threshold = payload
    schedule = EventSchedule(TreeModel(spec), seed, lam)
    outcome = []
    for r in [None] + list(r_grid):
        process = ContactProcess(schedule, [ROOT], lam, severed_edge(r))
        process.run(horizon, stop=lambda p: p.k >= threshold)
        if process.censored:
            return None
        outcome.append(not process.is_extinct)
    return outcome


def severed_comparison(
    model: TreeModel,
    lam: float,
    r_grid: Sequence[Optional[int]],
    horizon: float,
    runs: int,
    seed: int,
    escape_threshold: Optional[int] = None,
    jobs: Optional[int] = None,
) -> SeveredComparison:
    """Survival with one ray edge severed at distance r, against the unaltered process on shared schedules."""
    threshold = Config.ESCAPE_THRESHOLD if escape_threshold is None else escape_threshold
    results = run_pool(_severed_run, (model.spec, lam, list(r_grid), horizon, threshold), runs, seed, jobs)
    finished = [r for r in results if r is not None]
    censored = runs - len(finished)
    label = ["unaltered"] + ["inf" if r is None else str(r) for r in r_grid]
    estimates = [
        estimate_from_counts(sum(1 for f in finished if f[i]), len(finished), censored, seed, {"r": label[i]})
        for i in range(len(label))
    ]
    gaps = {label[i]: sum(1 for f in finished if f[0] and not f[i]) for i in range(1, len(label))}
    violations = sum(1 for f in finished for i in range(1, len(label)) if f[i] and not f[0])
    return SeveredComparison(
        unaltered=estimates[0],
        severed={label[i]: estimates[i] for i in range(1, len(label))},
        gaps=gaps,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# Weight trajectories
# ---------------------------------------------------------------------------

class WeightTrajectoryResult(BaseModel):
    times: List[float]
    mean_weight: List[float]
    slope: Optional[float]
    slope_stderr: Optional[float]
    expected_sign: int
    extinction_times: List[float] = Field(default_factory=list)


def _weight_run(payload, seed):
    spec, lam, scheme, grid = payload
    model = TreeModel(spec)
    process = ContactProcess(EventSchedule(model, seed, lam), [ROOT], lam)
    weights = []
    for t in grid:
        process.run(t)
        if process.censored:
            return None
        weights.append(scheme.weight(process.infected, model.n or 1))
    return weights, process.extinction_time


def weight_trajectory(
    model: TreeModel,
    lam: float,
    scheme: WeightScheme,
    runs: int,
    seed: int,
    time_grid: Sequence[float] = tuple(np.linspace(0.0, 10.0, 11)),
    jobs: Optional[int] = None,
) -> WeightTrajectoryResult:
    """Slope of log mean weight against time, with the sign the certificate predicts."""
    grid = sorted(float(t) for t in time_grid)
    results = [r for r in run_pool(_weight_run, (model.spec, lam, scheme, grid), runs, seed, jobs) if r is not None]
    if not results:
        raise AllRunsCensoredError("every weight trajectory was censored")
    weights = np.array([w for w, _ in results])
    mean = weights.mean(axis=0)
    expected = scheme.expected_sign(model.n or 1, lam) if lam > 0 else -1
    positive = mean > 0
    slope = stderr = None
    if positive.sum() >= 3:
        coef, cov = np.polyfit(np.array(grid)[positive], np.log(mean[positive]), 1, cov=True)
        slope, stderr = float(coef[0]), float(math.sqrt(cov[0, 0]))
    elif positive.sum() == 2:
        t = np.array(grid)[positive]
        slope = float((math.log(mean[positive][1]) - math.log(mean[positive][0])) / (t[1] - t[0]))
    extinctions = sorted(t for _, t in results if t is not None)
    return WeightTrajectoryResult(
        times=grid,
        mean_weight=mean.tolist(),
        slope=slope,
        slope_stderr=stderr,
        expected_sign=expected,
        extinction_times=extinctions if slope is None else [],
    )


# ---------------------------------------------------------------------------
# Duality symmetry
# ---------------------------------------------------------------------------

class DualitySymmetry(BaseModel):
    a_hits_b: Estimate
    b_hits_a: Estimate
    z_score: float


def _hit_run(payload, seed):
    spec, lam, source, target, t = payload
    process = ContactProcess(EventSchedule(TreeModel(spec), seed, lam), source, lam)
    process.run(t)
    if process.censored:
        return None
    return bool(process.infected & set(target))


def duality_symmetry_experiment(
    model: TreeModel, lam: float, A, B, t: float, runs: int, seed: int, jobs: Optional[int] = None
) -> DualitySymmetry:
    """P_A(B hit at t) and P_B(A hit at t) from independent schedules."""
    A = sorted(model.validate(v) for v in A)
    B = sorted(model.validate(v) for v in B)
    forward = _count(run_pool(_hit_run, (model.spec, lam, A, B, t), runs, seed, jobs), seed, {"direction": "A->B"})
    other_seed = run_seed(seed, "reverse")
    backward = _count(run_pool(_hit_run, (model.spec, lam, B, A, t), runs, other_seed, jobs), other_seed, {"direction": "B->A"})
    pooled = (forward.successes + backward.successes) / (forward.runs + backward.runs)
    spread = math.sqrt(max(pooled * (1 - pooled), 1e-300) * (1 / forward.runs + 1 / backward.runs))
    return DualitySymmetry(a_hits_b=forward, b_hits_a=backward, z_score=(forward.value - backward.value) / spread)
