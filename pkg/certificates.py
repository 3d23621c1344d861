"""Closed-form critical-value bounds and drift-inequality certificates."""

import logging
import math
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field
from scipy.stats import gmean

from config import Config
from topology import GaltonWatsonSpec, as_vertex_set

logger = logging.getLogger(__name__)


class DomainError(ValueError):
    """Raised when a bound is evaluated outside its domain."""


# Parameter sets printed beside the parent-discounted weight, quoted to the printed digits.
PRINTED_RDY_PARAMETERS: Dict[int, Dict[str, float]] = {
    2: {"lam": 0.561722, "r": 0.7071, "d": 0.434212, "Y": 0.082293},
    3: {"lam": 0.425516, "r": 0.5773, "d": 0.407781, "Y": 0.089933},
    4: {"lam": 0.354246, "r": 0.5012, "d": 0.391747, "Y": 0.088349},
}

# Lower values printed for the root-reinfection threshold at n = 2, 3, 4.
PRINTED_LAMBDA2_LOWER: Dict[int, float] = {2: 0.561722, 3: 0.425516, 4: 0.354248}

RDY_CASES = (
    "parent healthy, no children infected",
    "parent healthy, all children infected",
    "parent infected, no children infected",
    "parent infected, all children infected",
)


class DriftCertificate(BaseModel):
    """Verdict of a weight scheme's drift inequalities (each value must be < 0)."""

    scheme: str
    parameters: Dict[str, float]
    cases: List[str]
    values: List[float]
    tolerance: float = 0.0
    extras: Dict[str, float] = Field(default_factory=dict)

    @property
    def slacks(self) -> List[float]:
        return [-v for v in self.values]

    @property
    def strict(self) -> List[bool]:
        return [v < 0 for v in self.values]

    @property
    def strict_count(self) -> int:
        return sum(self.strict)

    @property
    def feasible(self) -> bool:
        return all(self.strict)

    @property
    def feasible_within_tolerance(self) -> bool:
        return all(v < self.tolerance for v in self.values)

    @property
    def min_slack(self) -> float:
        return min(self.slacks)

    @property
    def violating_case(self) -> Optional[str]:
        worst = max(range(len(self.values)), key=lambda i: self.values[i])
        return self.cases[worst] if self.values[worst] >= 0 else None

    def summary(self) -> str:
        total = len(self.values)
        if self.feasible:
            return f"feasible, {total}/{total} strict"
        if self.tolerance > 0 and self.feasible_within_tolerance:
            return f"feasible within {self.tolerance:.0e} ({self.strict_count}/{total} strict)"
        return f"infeasible ({self.strict_count}/{total} strict; worst: {self.violating_case})"


# ---------------------------------------------------------------------------
# Infected-count / component-count weight a k + b c
# ---------------------------------------------------------------------------

def _require_n(n: int, least: int = 2):
    if n < least:
        raise DomainError(f"need n >= {least}, got n={n}")


def kc_drift(n: int, lam: float, a: float, b: float, k: int, c: int) -> float:
    """Lower bound on the drift of a k + b c (joining losses at their worst)."""
    _require_n(n)
    if not k >= c >= 0:
        raise DomainError(f"need k >= c >= 0, got k={k}, c={c}")
    return (((n - 1) * lam - 1) * k + 2 * lam * c) * a + (k - 2 * c - (n + 1) * lam * c) * b


def kc_supermartingale_drift(n: int, lam: float, a: float, b: float, k: int, c: int) -> float:
    """Upper bound on the drift of a k + b c (no joining losses)."""
    _require_n(n)
    return (((n - 1) * lam - 1) * k + 2 * lam * c) * a + (k - 2 * c) * b


def kc_certificate(n: int, lam: float, a: float, b: float) -> DriftCertificate:
    """Submartingale check at the extreme rays c = 0 and c = k, stated as values < 0."""
    values = [-kc_drift(n, lam, a, b, 1, 0), -kc_drift(n, lam, a, b, 1, 1)]
    return DriftCertificate(
        scheme="kc",
        parameters={"n": n, "lam": lam, "a": a, "b": b},
        cases=["isolated growth (c = 0 ray)", "all singletons (c = k)"],
        values=values,
    )


def kc_feasible_submartingale(n: int, lam: float) -> Tuple[bool, Optional[float], Optional[float]]:
    """Whether some a, b > 0 make a k + b c a strict submartingale, and one such pair."""
    _require_n(n)
    b = 1.0
    if (n + 1) * lam <= 1:
        return False, None, None
    lo = ((n + 1) * lam + 1) / ((n + 1) * lam - 1)
    shortfall = 1 - (n - 1) * lam
    if shortfall <= 0:
        return True, 2 * lo, b
    hi = 1 / shortfall
    if lo < hi:
        return True, (lo + hi) / 2, b
    return False, None, None


def kc_feasible_supermartingale(n: int, lam: float) -> Tuple[bool, Optional[float], Optional[float]]:
    """The dual check with joining losses dropped; feasible exactly when lam < 1/n."""
    _require_n(n)
    a = 1.0
    low = max(0.0, (n + 1) * lam - 1)
    high = 1 - (n - 1) * lam
    if low < high:
        return True, a, (low + high) / 2
    return False, None, None


def lambda1_upper(n: int) -> float:
    _require_n(n)
    return (math.sqrt(9 + 16 / (n - 1)) - 1) / (2 * (n + 1))


# ---------------------------------------------------------------------------
# Exponential weight n^{-depth/2}
# ---------------------------------------------------------------------------

def exponential_drift(n: int, lam: float) -> float:
    """Per-unit-weight drift coefficient 2 sqrt(n) lam - 1."""
    _require_n(n, 1)
    return 2 * math.sqrt(n) * lam - 1


def exponential_certificate(n: int, lam: float) -> DriftCertificate:
    return DriftCertificate(
        scheme="exponential",
        parameters={"n": n, "lam": lam},
        cases=["total weight"],
        values=[exponential_drift(n, lam)],
    )


# ---------------------------------------------------------------------------
# Parent-discounted weight r^depth (1 - d [parent infected]) with transfer Y
# ---------------------------------------------------------------------------

def rdy_values(n: int, lam: float, r: float, d: float, Y: float) -> List[float]:
    return [
        -1 + lam * (1 / r - d + n * r * (1 - d)),
        -1 + n * r * d + lam * (1 / r - d) - n * Y,
        -1 + d + lam * n * r * (1 - d) + Y / r,
        -1 + d + n * r * d + Y / r - n * Y,
    ]


def rdy_quadratic(n: int, lam: float) -> float:
    root = math.sqrt(n)
    return -((1 - root) ** 2) * lam**2 + (4 * root - 2) * lam - 2


def rdy_recipe(n: int, lam: float) -> Tuple[float, float, float]:
    """r = 1/sqrt(n) with d and Y making the first and third inequalities tight."""
    _require_n(n)
    if lam <= 0:
        raise DomainError("lambda must be positive")
    root = math.sqrt(n)
    r = 1 / root
    d = (2 * root - 1 / lam) / (1 + root)
    Y = (1 - root * lam) * ((1 - root + 1 / lam) / (1 + root)) / root
    return r, d, Y


def check_rdy(n: int, lam: float, r: float, d: float, Y: float, tolerance: float = 0.0) -> DriftCertificate:
    """Evaluate the four extreme-case inequalities of the parent-discounted weight."""
    _require_n(n)
    if r <= 0 or not 0 <= d < 1:
        raise DomainError(f"need r > 0 and 0 <= d < 1, got r={r}, d={d}")
    recipe = rdy_recipe(n, lam)
    extras = {
        "quadratic": rdy_quadratic(n, lam),
        "recipe_r": recipe[0],
        "recipe_d": recipe[1],
        "recipe_Y": recipe[2],
    }
    return DriftCertificate(
        scheme="rdy",
        parameters={"n": n, "lam": lam, "r": r, "d": d, "Y": Y},
        cases=list(RDY_CASES),
        values=rdy_values(n, lam, r, d, Y),
        tolerance=tolerance,
        extras=extras,
    )


def rdy_recipe_certificate(n: int, lam: float, margin: float = 1e-9) -> DriftCertificate:
    """Recipe parameters for lam, checked at lam (1 - margin) so the tight pair turns strict."""
    r, d, Y = rdy_recipe(n, lam)
    return check_rdy(n, lam * (1 - margin), r, d, Y)


def lambda_a_refined(n: int) -> float:
    """Smaller root of the recipe quadratic."""
    _require_n(n)
    s = math.sqrt(n) - 1
    return (4 + 2 / s - math.sqrt(8 + 16 / s + 4 / s**2)) / (2 * s)


# ---------------------------------------------------------------------------
# Branching meeting process
# ---------------------------------------------------------------------------

def branching_mean_offspring(n: int, lam: float) -> float:
    """n (2 lam / (2 lam + 2)) (lam / (lam + 2))."""
    _require_n(n)
    return n * lam**2 / ((lam + 1) * (lam + 2))


def meeting_threshold(n: int) -> float:
    _require_n(n)
    return (3 + math.sqrt(8 * n + 1)) / (2 * n - 2)


def meeting_supercritical(n: int, lam: float) -> bool:
    return branching_mean_offspring(n, lam) > 1


# ---------------------------------------------------------------------------
# Bound table
# ---------------------------------------------------------------------------

def lambda2_upper(n: int) -> float:
    """min(2, 4/(sqrt(n) - 4)), the second term only when sqrt(n) > 4."""
    root = math.sqrt(n)
    if root > 4:
        return min(2.0, 4 / (root - 4))
    return 2.0


class BoundTable(BaseModel):
    n: int
    lambda1_lower: float
    lambda1_upper: float
    lambda_a_lower_simple: float
    lambda_a_lower_refined: float
    lambda2_upper: float
    lambdac_upper: float
    branching_threshold: float
    printed_lambda2_lower: Optional[float] = None
    provenance: Dict[str, str]

    def row(self) -> Dict[str, float]:
        return self.model_dump(exclude={"provenance"})


def bound_table(n: int) -> BoundTable:
    _require_n(n)
    lam2 = lambda2_upper(n)
    threshold = meeting_threshold(n)
    return BoundTable(
        n=n,
        lambda1_lower=1 / n,
        lambda1_upper=lambda1_upper(n),
        lambda_a_lower_simple=1 / (2 * math.sqrt(n)),
        lambda_a_lower_refined=lambda_a_refined(n),
        lambda2_upper=lam2,
        lambdac_upper=max(lam2, threshold),
        branching_threshold=threshold,
        printed_lambda2_lower=PRINTED_LAMBDA2_LOWER.get(n),
        provenance={
            "lambda1_lower": "infected-count supermartingale",
            "lambda1_upper": "a k + b c submartingale",
            "lambda_a_lower_simple": "exponential weight n^(-depth/2)",
            "lambda_a_lower_refined": "parent-discounted weight, recipe quadratic",
            "lambda2_upper": "lattice bound 2" if math.sqrt(n) <= 4 else "star relay, 4/(sqrt(n)-4) capped at 2",
            "lambdac_upper": "max of lambda2 bound and branching meeting threshold",
            "branching_threshold": "meeting process mean offspring = 1",
            "printed_lambda2_lower": "printed digits",
        },
    )


# ---------------------------------------------------------------------------
# Non-homogeneous trees
# ---------------------------------------------------------------------------

def alternating_bound(deg_a: float, deg_b: float) -> float:
    """1/(sqrt(deg_a) + sqrt(deg_b))."""
    if deg_a < 1 or deg_b < 1:
        raise DomainError("degrees must be at least 1")
    return 1 / (math.sqrt(deg_a) + math.sqrt(deg_b))


def _rlogr_bound(constant: float, r: float, n: int) -> float:
    return constant * math.sqrt(r * math.log(r) * math.log(n) / n)


def gw_r(spec: GaltonWatsonSpec, n: int, c2: Optional[float] = None) -> float:
    c2 = Config.C2 if c2 is None else c2
    log_an = spec.log_pmf(n)
    if log_an == -math.inf:
        raise DomainError(f"P(C = {n}) = 0, so r is infinite")
    growth = spec.mean()
    if growth <= 1:
        raise DomainError(f"mean offspring {growth} must exceed 1")
    return max(2.0, c2 * (-math.log(n) - log_an) / math.log(growth))


def gw_lambda2_upper(spec: GaltonWatsonSpec, n: int, c2: Optional[float] = None, c3: Optional[float] = None) -> float:
    """c3 sqrt(r ln r ln n / n) with r from the offspring law at n children (shape-only)."""
    if n <= 1:
        raise DomainError("need n > 1")
    c3 = Config.C3 if c3 is None else c3
    return _rlogr_bound(c3, gw_r(spec, n, c2), n)


def periodic_lambda2_upper(n: int, j: int, m: int, c4: Optional[float] = None) -> float:
    """c4 sqrt(r ln r ln n / n) with r = max(2, ceil(j / ln m)) (shape-only)."""
    if m < 2:
        raise DomainError("need at least two glue vertices")
    if n <= 1:
        raise DomainError("need n > 1")
    c4 = Config.C4 if c4 is None else c4
    r = max(2, math.ceil(j / math.log(m)))
    return _rlogr_bound(c4, r, n)


def geometric_mean_bound(degrees: Sequence[float], c: Optional[float] = None) -> float:
    """c sqrt(G) with G the geometric mean of the degree sequence (shape-only)."""
    c = Config.C if c is None else c
    if len(degrees) == 0 or min(degrees) <= 0:
        raise DomainError("degree sequence must be non-empty and positive")
    return c * math.sqrt(float(gmean(degrees)))


def geometric_vs_alternating(n: int, c: Optional[float] = None) -> float:
    """Ratio of the geometric-mean bound to the alternating bound for degrees (1, n)."""
    ratio = geometric_mean_bound([1, n], c) / alternating_bound(1, n)
    logger.info("degrees (1, %d): geometric-mean / alternating bound = %.4g", n, ratio)
    return ratio


def decorated_binary_lambda1_lower(n: int) -> float:
    """sqrt(ln n) / (10 sqrt(n)), valid for large n."""
    if n <= 1:
        raise DomainError("need n > 1")
    return math.sqrt(math.log(n)) / (10 * math.sqrt(n))


def decorated_binary_lambda2_upper(n: int, c4: Optional[float] = None) -> float:
    """Periodic bound for the decorated binary tree (star size n + 2, j = 1, m = 2)."""
    return periodic_lambda2_upper(n + 2, 1, 2, c4)


# ---------------------------------------------------------------------------
# Weights on configurations
# ---------------------------------------------------------------------------

def kc_weight(xi, a: float, b: float) -> float:
    S = as_vertex_set(xi)
    c = sum(1 for v in S if not v or v[:-1] not in S)
    return a * len(S) + b * c


def exponential_weight(xi, n: int) -> float:
    return sum(n ** (-len(v) / 2) for v in as_vertex_set(xi))


def rdy_weight(xi, r: float, d: float) -> float:
    S = as_vertex_set(xi)
    return sum(r ** len(v) * (1 - d * (1 if v and v[:-1] in S else 0)) for v in S)


class WeightScheme(BaseModel):
    """A weight on configurations plus the drift sign its certificate predicts."""

    kind: Literal["kc", "exponential", "rdy"]
    a: float = 1.0
    b: float = 1.0
    r: Optional[float] = None
    d: Optional[float] = None
    Y: Optional[float] = None

    def weight(self, xi, n: int) -> float:
        if self.kind == "kc":
            return kc_weight(xi, self.a, self.b)
        if self.kind == "exponential":
            return exponential_weight(xi, n)
        return rdy_weight(xi, self.r, self.d)

    def certificate(self, n: int, lam: float) -> DriftCertificate:
        if self.kind == "kc":
            return kc_certificate(n, lam, self.a, self.b)
        if self.kind == "exponential":
            return exponential_certificate(n, lam)
        return check_rdy(n, lam, self.r, self.d, self.Y)

    def expected_sign(self, n: int, lam: float) -> int:
        """+1 growth certified, -1 decay certified, 0 when the certificate is silent."""
        if self.kind == "kc":
            if kc_certificate(n, lam, self.a, self.b).feasible:
                return 1
            low = max(0.0, (n + 1) * lam - 1) * self.a
            high = (1 - (n - 1) * lam) * self.a
            return -1 if low < self.b < high else 0
        if self.kind == "exponential":
            drift = exponential_drift(n, lam)
            return -1 if drift < 0 else 0
        return -1 if self.certificate(n, lam).feasible else 0
