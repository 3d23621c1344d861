"""Exact analysis of the contact process on a finite star.

With only the root and its n leaves, the process lumps to the chain
(I, x): I says whether the root is infected, x counts infected leaves.
Everything here works on that chain, except the engine-based experiments
which run the full graph for cross-checks and for the relay chain.
"""

import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy import integrate, optimize, sparse
from scipy.sparse.linalg import spsolve

from config import Config, check_star_constants
from engine import ContactProcess, EventSchedule
from estimators import Estimate, estimate_from_counts, run_pool
from topology import Configuration, StarChainSpec, StarSpec, TreeModel, keyed_rng

logger = logging.getLogger(__name__)


class StarParameterError(ValueError):
    """Raised when star parameters fall outside an operation's domain."""


class SingularSystemError(ValueError):
    """Raised when the absorbing-chain system has no unique solution."""


class SingularityError(ValueError):
    """Raised when a scale-function grid reaches the pole at x = a."""


class StarState(NamedTuple):
    I: int
    x: int


class StarParams(BaseModel):
    n: int = Field(ge=1)
    a: float = Field(gt=0.0)
    c5: float = Field(default_factory=lambda: Config.C5)
    c9: float = Field(default_factory=lambda: Config.C9)
    c10: float = Field(default_factory=lambda: Config.C10)
    c11: float = Field(default_factory=lambda: Config.C11)

    @model_validator(mode="after")
    def _constants_chain(self):
        check_star_constants(self.c5, self.c9, self.c10, self.c11)
        return self

    @property
    def lam(self) -> float:
        return self.a / math.sqrt(self.n)

    @property
    def y(self) -> int:
        return math.floor(self.a * math.sqrt(self.n) / self.c10)

    @property
    def drop_level(self) -> float:
        return self.a * math.sqrt(self.n) / self.c9

    @property
    def rise_level(self) -> float:
        return self.y + self.a * math.sqrt(self.n) / self.c11

    @property
    def holding_horizon(self) -> float:
        return math.exp(self.a**2 / self.c5) / (2 * self.c11)

    def threshold_n(self) -> float:
        """(1/c10 - 1/c9 - 1/c5)^-1, the size above which the star theorem applies."""
        return 1.0 / (1 / self.c10 - 1 / self.c9 - 1 / self.c5)

    def hypothesis_violations(self) -> List[str]:
        problems = []
        if not self.n > self.threshold_n():
            problems.append(f"n={self.n} must exceed {self.threshold_n():.2f}")
        if not 4 <= self.a <= math.sqrt(self.n):
            problems.append(f"a={self.a} must lie in [4, sqrt(n)={math.sqrt(self.n):.4f}]")
        return problems

    def require_theorem_mode(self):
        problems = self.hypothesis_violations()
        if problems:
            raise StarParameterError("star theorem hypotheses fail: " + "; ".join(problems))


def _check_state(state: StarState, params: StarParams) -> StarState:
    state = StarState(*state)
    if state.I not in (0, 1) or not 0 <= state.x <= params.n:
        raise StarParameterError(f"{tuple(state)} is not a state of the star with n={params.n}")
    return state


def generator_rates(state, params: StarParams) -> List[Tuple[StarState, float]]:
    """Outgoing transitions with positive rate."""
    I, x = _check_state(state, params)
    n, lam = params.n, params.lam
    if I == 0:
        moves = [(StarState(0, x - 1), float(x)), (StarState(1, x), lam * x)]
    else:
        moves = [
            (StarState(0, x), 1.0),
            (StarState(1, x - 1), float(x)),
            (StarState(1, x + 1), lam * (n - x)),
        ]
    return [(s, r) for s, r in moves if r > 0]


def _weight_step(params: StarParams) -> float:
    return params.a / (10 * math.sqrt(params.n))


def weight_W(state, params: StarParams) -> float:
    """Supermartingale weight of a star state."""
    I, x = _check_state(state, params)
    if params.a > math.sqrt(params.n):
        raise StarParameterError(f"W needs a <= sqrt(n), got a={params.a}, n={params.n}")
    step = _weight_step(params)
    root_term = math.sqrt(params.n) * math.expm1(step) / params.a
    return math.exp(-step * x) * (1 - I * root_term)


def drift_W(state, params: StarParams) -> float:
    current = weight_W(state, params)
    return sum(rate * (weight_W(target, params) - current) for target, rate in generator_rates(state, params))


def drift_scale(state, params: StarParams) -> float:
    """Sum of the absolute drift terms; the magnitude a zero drift cancels from."""
    current = weight_W(state, params)
    return sum(abs(rate * (weight_W(target, params) - current)) for target, rate in generator_rates(state, params))


def star_table(params: StarParams) -> pd.DataFrame:
    """One row per state with W, its drift and the drift scale."""
    rows = []
    for I in (0, 1):
        for x in range(params.n + 1):
            s = StarState(I, x)
            rows.append({
                "I": I,
                "x": x,
                "W": weight_W(s, params),
                "drift": drift_W(s, params),
                "drift_scale": drift_scale(s, params),
            })
    return pd.DataFrame(rows, columns=["I", "x", "W", "drift", "drift_scale"])


def hitting_probability_exact(params: StarParams, start, lower: int, upper: int) -> float:
    """P(x drops below `lower` before reaching `upper`), by a sparse absorbing-chain solve."""
    start = _check_state(start, params)
    if upper > params.n:
        raise StarParameterError(f"upper={upper} exceeds n={params.n}")
    if start.x >= upper:
        return 0.0
    if start.x < lower:
        return 1.0

    transient = [StarState(I, x) for I in (0, 1) for x in range(lower, upper)]
    index = {s: i for i, s in enumerate(transient)}
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(transient))
    for s, i in index.items():
        moves = generator_rates(s, params)
        out = sum(rate for _, rate in moves)
        if out == 0:
            raise SingularSystemError(f"state {tuple(s)} is absorbing inside ({lower}, {upper})")
        rows.append(i)
        cols.append(i)
        vals.append(-out)
        for target, rate in moves:
            if target.x < lower:
                rhs[i] -= rate
            elif target.x < upper:
                rows.append(i)
                cols.append(index[target])
                vals.append(rate)
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(len(transient), len(transient)))
    h = spsolve(A, rhs)
    if not np.all(np.isfinite(h)):
        raise SingularSystemError("hitting system is singular (boundary unreachable)")
    residual = np.max(np.abs(A @ h - rhs)) if len(h) else 0.0
    if residual > 1e-12 * max(1.0, np.max(np.abs(rhs))) * len(h):
        logger.warning("hitting solve residual %.3e", residual)
    return float(np.clip(h[index[start]], 0.0, 1.0))


def supermartingale_hitting_bound(params: StarParams, start, lower: int) -> float:
    """Optional-stopping bound W(start) / W(1, lower - 1) on the drop probability."""
    if lower < 1:
        raise StarParameterError("lower must be at least 1")
    return min(1.0, weight_W(start, params) / weight_W(StarState(1, lower - 1), params))


class StarTheoremReport(BaseModel):
    n: int
    a: float
    lam: float
    y: int
    lower: int
    upper: int
    exact: float
    supermartingale_bound: float
    theorem_bound: float
    threshold_n: float
    hypotheses_hold: bool
    violations: List[str]
    within_supermartingale_bound: bool
    within_theorem_bound: bool


def theorem_star_report(params: StarParams) -> StarTheoremReport:
    """Exact drop probability from (0, y) against the supermartingale and theorem bounds."""
    root_n = math.sqrt(params.n)
    lower = math.ceil(params.a * root_n / params.c9)
    upper = min(math.ceil(params.y + params.a * root_n / params.c11), params.n)
    start = StarState(0, params.y)
    exact = hitting_probability_exact(params, start, lower, upper)
    bound = supermartingale_hitting_bound(params, start, lower)
    theorem = math.exp(-params.a**2 / params.c5)
    report = StarTheoremReport(
        n=params.n,
        a=params.a,
        lam=params.lam,
        y=params.y,
        lower=lower,
        upper=upper,
        exact=exact,
        supermartingale_bound=bound,
        theorem_bound=theorem,
        threshold_n=params.threshold_n(),
        hypotheses_hold=not params.hypothesis_violations(),
        violations=params.hypothesis_violations(),
        within_supermartingale_bound=exact <= bound + 1e-12,
        within_theorem_bound=exact <= theorem,
    )
    logger.info(
        "star n=%d a=%.3f: exact=%.6g, supermartingale=%.6g, exp(-a^2/c5)=%.6g",
        params.n, params.a, exact, bound, theorem,
    )
    return report


def Q(s: float, lam: float) -> float:
    """Chance a link infects within time s before its source recovers."""
    if s < 0 or lam < 0:
        raise ValueError(f"Q needs s >= 0 and lambda >= 0, got s={s}, lambda={lam}")
    return lam / (1 + lam) * -math.expm1(-(1 + lam) * s)


def transmission_probability_crude(r: float, lam: float) -> float:
    """e^{-r} Q(r): the source survives r and infects within r."""
    return math.exp(-r) * Q(r, lam)


def transmission_probability_refined(r: float, lam: float) -> float:
    """Also credits infections after the target's own early recovery within the window."""
    if r < 0 or lam < 0:
        raise ValueError(f"need r >= 0 and lambda >= 0, got r={r}, lambda={lam}")
    miss = -math.expm1(-(1 + lam) * r)
    return lam / (1 + lam) * math.exp(-r) * (miss + r - miss / (1 + lam))


def ring_gain(n: int, r: float, lam: float, refined: bool = False) -> float:
    """n p(r)^2: expected relays through a ring of n children and back."""
    p = transmission_probability_refined(r, lam) if refined else transmission_probability_crude(r, lam)
    return n * p * p


def ring_threshold(n: int, r: float, refined: bool = False) -> float:
    """The lambda where ring_gain crosses 1."""
    def excess(lam):
        return ring_gain(n, r, lam, refined) - 1.0

    hi = 1.0
    while excess(hi) <= 0:
        hi *= 2
        if hi > 1e8:
            raise StarParameterError(f"ring gain never reaches 1 for n={n}, r={r}")
    return optimize.brentq(excess, 1e-15, hi, xtol=1e-14, rtol=1e-13)


# ---------------------------------------------------------------------------
# Continuous heuristic
# ---------------------------------------------------------------------------

_QUAD = {"epsabs": 1e-14, "epsrel": 1e-13, "limit": 200}


def _check_grid(a: float, xs) -> np.ndarray:
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if np.any(xs < 0) or np.any(xs >= a):
        raise SingularityError(f"scale functions need grid points in [0, a={a})")
    return xs


def _f_integrand(s: float, a: float) -> float:
    return math.exp(-a * s) / (a - s) ** 2


def _f_between(a: float, lo: float, hi: float) -> float:
    return integrate.quad(_f_integrand, lo, hi, args=(a,), **_QUAD)[0]


def _g_between(a: float, lo: float, hi: float) -> float:
    # g' = a e^{-ax} / (a - x)
    return integrate.quad(lambda s: a * math.exp(-a * s) / (a - s), lo, hi, **_QUAD)[0]


def scale_functions(a: float, xs) -> Tuple[np.ndarray, np.ndarray]:
    """Natural scale (f, g) of the continuous root/leaf-density process."""
    xs = _check_grid(a, xs)
    f = np.array([_f_between(a, 0.0, x) for x in xs])
    g = f - np.exp(-a * xs) / (a - xs)
    return f, g


def scale_residuals(a: float, xs, h: float = 1e-4) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals of (a-x)f' + (g-f) = 0 and -x g' + a x (f-g) = 0, derivatives by central differences."""
    xs = _check_grid(a, xs)
    if np.any(xs + h >= a):
        raise SingularityError("central difference steps past the pole")
    f, g = scale_functions(a, xs)
    first, second = [], []
    for x, fx, gx in zip(xs, f, g):
        df = _f_between(a, x - h, x + h) / (2 * h)
        tail = math.exp(-a * (x + h)) / (a - x - h) - math.exp(-a * (x - h)) / (a - x + h)
        dg = df - tail / (2 * h)
        first.append((a - x) * df + (gx - fx))
        second.append(-x * dg + a * x * (fx - gx))
    return np.array(first), np.array(second)


def scale_hitting_heuristic(a: float, k: float, l: float, m: float) -> Tuple[float, float]:
    """From x = a/l, chance of reaching a/m before a/k (k < l < m), and exp(-a^2 (1/l - 1/m))."""
    if not k < l < m:
        raise ValueError("need k < l < m")
    top, mid, low = a / k, a / l, a / m
    _check_grid(a, [top, mid, low])
    p_low = _g_between(a, mid, top) / _g_between(a, low, top)
    reference = math.exp(-a**2 * (1 / l - 1 / m))
    logger.info(
        "scale heuristic a=%.3f (k,l,m)=(%g,%g,%g): p=%.4e reference=%.4e ratio=%.3g",
        a, k, l, m, p_low, reference, p_low / reference,
    )
    return p_low, reference


# ---------------------------------------------------------------------------
# Lumped Monte Carlo, vectorized over runs
# ---------------------------------------------------------------------------

def _simulate_lumped(n, lam, I0, x0, runs, rng, judge) -> np.ndarray:
    """Advance `runs` copies of the (I, x) chain until `judge` settles each one.

    judge(t, t_next, I, x) sees each holding interval [t, t_next) of state (I, x)
    and returns (done, success) masks.
    """
    I = np.full(runs, I0, dtype=np.int64)
    x = np.full(runs, x0, dtype=np.int64)
    t = np.zeros(runs)
    outcome = np.zeros(runs, dtype=bool)
    live = np.arange(runs)
    while live.size:
        Il, xl = I[live], x[live]
        r_root = Il.astype(float)
        r_leaf = xl.astype(float)
        r_root_inf = (1 - Il) * lam * xl
        r_leaf_inf = Il * lam * (n - xl)
        total = r_root + r_leaf + r_root_inf + r_leaf_inf
        with np.errstate(divide="ignore"):
            dt = np.where(total > 0, rng.exponential(size=live.size) / np.where(total > 0, total, 1.0), np.inf)
        t_next = t[live] + dt
        done, success = judge(t[live], t_next, Il, xl)
        outcome[live[done]] = success[done]
        keep = ~done
        u = rng.random(live.size) * total
        c1 = r_root
        c2 = c1 + r_leaf
        c3 = c2 + r_root_inf
        new_I = np.where(u < c1, 0, np.where((u >= c2) & (u < c3), 1, Il))
        new_x = xl - ((u >= c1) & (u < c2)) + (u >= c3)
        idx = live[keep]
        I[idx] = new_I[keep]
        x[idx] = new_x[keep]
        t[idx] = t_next[keep]
        live = idx
    return outcome


def hitting_probability_mc(params: StarParams, start, lower: int, upper: int, runs: int, seed: int) -> Estimate:
    """Monte Carlo counterpart of hitting_probability_exact."""
    start = _check_state(start, params)

    def judge(t, t_next, I, x):
        low = x < lower
        high = x >= upper
        dead = ~np.isfinite(t_next)
        return low | high | dead, low

    outcome = _simulate_lumped(params.n, params.lam, start.I, start.x, runs, keyed_rng(seed, "hitting"), judge)
    return estimate_from_counts(int(outcome.sum()), runs, 0, seed, {"lower": lower, "upper": upper})


def holding_experiment(params: StarParams, runs: int, seed: int, method: str = "lumped") -> Estimate:
    """P(at least a sqrt(n)/c9 infected leaves throughout [1, e^{a^2/c5}/2c11]) from the root alone."""
    level = params.drop_level
    horizon = params.holding_horizon
    detail = {
        "level": level,
        "horizon": horizon,
        "floor": math.exp(-1) / 5,
        "method": method,
        "theorem_mode": not params.hypothesis_violations(),
    }
    if params.lam == 0 or horizon <= 1:
        return estimate_from_counts(0, runs, 0, seed, detail)
    if method == "engine":
        results = run_pool(_holding_engine_run, (params.n, params.lam, level, horizon), runs, seed)
        return _collect(results, runs, seed, detail)

    def judge(t, t_next, I, x):
        covers_window = (np.minimum(t_next, horizon) > 1.0) & (t < horizon)
        failed = covers_window & (x < level)
        finished = t_next >= horizon
        return failed | finished, finished & ~failed

    outcome = _simulate_lumped(params.n, params.lam, 1, 0, runs, keyed_rng(seed, "holding"), judge)
    return estimate_from_counts(int(outcome.sum()), runs, 0, seed, detail)


def _holding_engine_run(payload, run_seed):
    n, lam, level, horizon = payload
    schedule = EventSchedule(TreeModel(StarSpec(n=n)), run_seed, lam)
    process = ContactProcess(schedule, [()], lam)
    process.run(1.0)
    if process.censored:
        return None
    if process.k - (1 if () in process.infected else 0) < level:
        return False

    def dropped(p):
        return p.k - (1 if () in p.infected else 0) < level

    stopped = process.run(horizon, stop=dropped)
    if process.censored:
        return None
    return not stopped


def _collect(results, runs, seed, detail) -> Estimate:
    censored = sum(1 for r in results if r is None)
    successes = sum(1 for r in results if r)
    return estimate_from_counts(successes, runs - censored, censored, seed, detail)


def holding_curve(n: int, a_grid: Sequence[float], runs: int, seed: int, **constants) -> List[Estimate]:
    """Holding fractions over an a-grid, every point drawn from the same seed.

    The runs are not pathwise coupled across a: the level a sqrt(n)/c9 and the
    window e^{a^2/c5}/2c11 move with a, so the held event itself changes. The curve
    is expected to be nondecreasing only up to Monte Carlo error; drops are logged.
    """
    curve = [holding_experiment(StarParams(n=n, a=a, **constants), runs, seed) for a in a_grid]
    for (a0, e0), (a1, e1) in zip(zip(a_grid, curve), zip(a_grid[1:], curve[1:])):
        if e1.value < e0.value:
            logger.info("holding fraction fell from %.4f (a=%g) to %.4f (a=%g)", e0.value, a0, e1.value, a1)
    return curve


# ---------------------------------------------------------------------------
# Relay along a chain hanging off the star
# ---------------------------------------------------------------------------

def relay_lower_bound(params: StarParams, r: int, c: Optional[float] = None) -> Optional[float]:
    """e^-1/5 - (1 - (c lambda)^r)^(e^{a^2/c5} / (2 c11 r) - 2)."""
    if r <= 0:
        return None
    c = Config.HOLDSOUT_C if c is None else c
    exponent = math.exp(params.a**2 / params.c5) / (2 * params.c11 * r) - 2
    return math.exp(-1) / 5 - (1 - (c * params.lam) ** r) ** exponent


def _relay_run(payload, run_seed):
    n, r_max, lam, horizon = payload
    spec = StarChainSpec(n=n, r=r_max)
    schedule = EventSchedule(TreeModel(spec), run_seed, lam)
    process = ContactProcess(schedule, [()], lam)
    chain = {spec.chain_vertex(k): k for k in range(r_max + 1)}
    hits = [math.inf] * (r_max + 1)
    hits[0] = 0.0

    def on_change(change):
        k = chain.get(change.vertex)
        if k is not None and change.kind > 0 and hits[k] == math.inf:
            hits[k] = change.time

    process.run(horizon, on_change=on_change, stop=lambda p: hits[r_max] < math.inf)
    if process.censored and hits[r_max] == math.inf:
        return None
    return hits


def relay_curve(
    params: StarParams, r_max: int, runs: int, seed: int, horizon: Optional[float] = None, jobs: Optional[int] = None
) -> List[Estimate]:
    """P(v_r infected before the horizon) for r = 0..r_max from one coupled run set."""
    horizon = params.holding_horizon if horizon is None else horizon
    results = run_pool(_relay_run, (params.n, r_max, params.lam, horizon), runs, seed, jobs)
    finished = [h for h in results if h is not None]
    censored = runs - len(finished)
    ordered = all(all(h[k] <= h[k + 1] for k in range(r_max)) for h in finished)
    curve = []
    for r in range(r_max + 1):
        successes = sum(1 for h in finished if h[r] <= horizon)
        detail = {"r": r, "horizon": horizon, "lower_bound": relay_lower_bound(params, r), "ordered": ordered}
        curve.append(estimate_from_counts(successes, len(finished), censored, seed, detail))
    return curve


def relay_experiment(
    params: StarParams, r: int, runs: int, seed: int, horizon: Optional[float] = None, jobs: Optional[int] = None
) -> Estimate:
    """P(v_r infected before e^{a^2/c5} / 2c11) on a star with an r-chain."""
    return relay_curve(params, r, runs, seed, horizon, jobs)[r]


# ---------------------------------------------------------------------------
# Extinction within a logarithmic window
# ---------------------------------------------------------------------------

def _as_star_state(eta, n: int) -> StarState:
    if isinstance(eta, Configuration):
        I = 1 if () in eta.infected else 0
        return StarState(I, eta.k - I)
    return StarState(*eta)


def extinction_window(n: int, size: int) -> float:
    """ln n + 2 max(ln |eta|, 4)."""
    return math.log(n) + 2 * max(math.log(size), 4.0)


def extinction_window_experiment(n: int, a: float, eta, runs: int, seed: int) -> Estimate:
    """P(extinction before ln n + 2 max(ln|eta|, 4)) with lambda = a / sqrt(n) < 1."""
    lam = a / math.sqrt(n)
    if lam >= 1:
        raise StarParameterError(f"need a / sqrt(n) < 1, got {lam}")
    start = _as_star_state(eta, n)
    size = start.I + start.x
    detail = {"a": a, "floor": math.exp(-4 * a * a) / 10}
    if size == 0:
        return estimate_from_counts(runs, runs, 0, seed, dict(detail, window=0.0))
    window = extinction_window(n, size)
    detail["window"] = window

    def judge(t, t_next, I, x):
        extinct = (I == 0) & (x == 0)
        late = t_next > window
        return extinct | late, extinct

    outcome = _simulate_lumped(n, lam, start.I, start.x, runs, keyed_rng(seed, "extinction"), judge)
    return estimate_from_counts(int(outcome.sum()), runs, 0, seed, detail)


def _extinction_coupled_run(payload, run_seed):
    n, lams, init, window = payload
    schedule = EventSchedule(TreeModel(StarSpec(n=n)), run_seed, max(lams))
    outcome = []
    for lam in lams:
        process = ContactProcess(schedule, init, lam)
        process.run(window)
        if process.censored:
            return None
        outcome.append(process.is_extinct)
    return outcome


def extinction_window_curve(
    n: int, a_grid: Sequence[float], eta: Configuration, runs: int, seed: int, jobs: Optional[int] = None
) -> List[Estimate]:
    """Coupled extinction probabilities over an increasing a-grid; larger a never dies sooner."""
    lams = [a / math.sqrt(n) for a in a_grid]
    if max(lams) >= 1:
        raise StarParameterError("need a / sqrt(n) < 1 on the whole grid")
    window = extinction_window(n, max(eta.k, 1))
    results = run_pool(_extinction_coupled_run, (n, lams, sorted(eta.infected), window), runs, seed, jobs)
    finished = [r for r in results if r is not None]
    order = np.argsort(a_grid)
    violations = sum(
        1 for r in finished for i, j in zip(order, order[1:]) if r[j] and not r[i]
    )
    curve = []
    for i, a in enumerate(a_grid):
        successes = sum(1 for r in finished if r[i])
        detail = {"a": a, "window": window, "floor": math.exp(-4 * a * a) / 10, "coupling_violations": violations}
        curve.append(estimate_from_counts(successes, len(finished), runs - len(finished), seed, detail))
    return curve
