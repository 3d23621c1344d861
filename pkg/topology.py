"""Rooted trees, infected configurations and the exact combinatorics on them.

Vertices are addressed by child-index paths from the root: ``()`` is the root,
``(2, 0)`` is the first child of the root's third child. Every tree family is
lazy: child counts are computed on demand and memoized, so infinite trees cost
only what a simulation touches.
"""

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Annotated, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter, model_validator
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

VertexId = Tuple[int, ...]
ROOT: VertexId = ()


class InvalidVertexError(ValueError):
    """Raised when a path does not name a vertex of the tree."""


class UnsupportedFamilyError(ValueError):
    """Raised when an operation is only defined for some tree families."""


# ---------------------------------------------------------------------------
# Counter-based randomness
# ---------------------------------------------------------------------------

def keyed_digest(seed: int, *key) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed),) + tuple(key)).encode("utf-8"))
    return h.digest()


def keyed_rng(seed: int, *key) -> np.random.Generator:
    """Generator seeded by a hash of (seed, key); identical across processes."""
    return np.random.default_rng(int.from_bytes(keyed_digest(seed, *key), "little"))


def keyed_uniform(seed: int, *key) -> float:
    """Deterministic uniform in (0, 1) from (seed, key)."""
    x = int.from_bytes(keyed_digest(seed, *key)[:8], "little")
    return (x + 0.5) / 2.0**64


# ---------------------------------------------------------------------------
# Offspring laws
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def heavy_tail_log_normaliser(gamma: float) -> float:
    """log of sum_k exp(-k**gamma), summed until the terms fall below e^-60."""
    cutoff = int(min(math.ceil(60.0 ** (1.0 / gamma)), 10_000_000))
    k = np.arange(cutoff + 1, dtype=float)
    return float(logsumexp(-(k**gamma)))


def heavy_tail_log_pmf(k: int, gamma: float) -> float:
    return -(float(k) ** gamma) - heavy_tail_log_normaliser(gamma)


# ---------------------------------------------------------------------------
# Tree specs (JSON documents)
# ---------------------------------------------------------------------------

class HomogeneousSpec(BaseModel):
    family: Literal["homogeneous"] = "homogeneous"
    n: int = Field(ge=1)
    depth_limit: Optional[int] = Field(default=None, ge=0)


class GaltonWatsonSpec(BaseModel):
    family: Literal["galton_watson"] = "galton_watson"
    offspring: Optional[List[float]] = None
    heavy_tail_gamma: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    heavy_tail_kmax: int = Field(default=400, ge=1)
    seed: int = 0
    depth_limit: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one_law(self):
        if (self.offspring is None) == (self.heavy_tail_gamma is None):
            raise ValueError("give exactly one of 'offspring' or 'heavy_tail_gamma'")
        if self.offspring is not None:
            if any(p < 0 for p in self.offspring):
                raise ValueError("offspring probabilities must be non-negative")
            if abs(sum(self.offspring) - 1.0) > 1e-9:
                raise ValueError(f"offspring probabilities sum to {sum(self.offspring)}, not 1")
        return self

    def pmf(self) -> np.ndarray:
        """Offspring probabilities used for simulation (heavy tails truncated at kmax)."""
        if self.offspring is not None:
            return np.asarray(self.offspring, dtype=float)
        k = np.arange(self.heavy_tail_kmax + 1, dtype=float)
        logw = -(k**self.heavy_tail_gamma)
        return np.exp(logw - logsumexp(logw))

    def log_pmf(self, k: int) -> float:
        """log P(C = k) of the untruncated law."""
        if self.offspring is not None:
            if k >= len(self.offspring) or self.offspring[k] == 0.0:
                return -math.inf
            return math.log(self.offspring[k])
        return heavy_tail_log_pmf(k, self.heavy_tail_gamma)

    def mean(self) -> float:
        if self.offspring is not None:
            return float(np.dot(np.arange(len(self.offspring)), self.offspring))
        g = self.heavy_tail_gamma
        cutoff = int(min(math.ceil(80.0 ** (1.0 / g)), 10_000_000))
        k = np.arange(cutoff + 1, dtype=float)
        return float(np.exp(logsumexp(-(k**g), b=k) - heavy_tail_log_normaliser(g)))


class PeriodicSpec(BaseModel):
    """Pattern tree G (vertex 0 is its root) glued recursively at the glue vertices."""

    family: Literal["periodic"] = "periodic"
    children: List[List[int]]
    glue: List[int]
    sigma: int = 0
    depth_limit: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _pattern_is_rooted_tree(self):
        size = len(self.children)
        if size == 0:
            raise ValueError("pattern graph is empty")
        seen = {0}
        stack = [0]
        while stack:
            p = stack.pop()
            for q in self.children[p]:
                if not 0 < q < size or q in seen:
                    raise ValueError(f"pattern is not a rooted tree at edge {p}->{q}")
                seen.add(q)
                stack.append(q)
        if len(seen) != size:
            raise ValueError("pattern has vertices unreachable from its root")
        if not self.glue:
            raise ValueError("at least one glue vertex is required")
        if len(set(self.glue)) != len(self.glue) or any(not 0 < g < size for g in self.glue):
            raise ValueError("glue vertices must be distinct non-root pattern vertices")
        if not 0 <= self.sigma < size:
            raise ValueError("sigma must be a pattern vertex")
        return self

    def pattern_parent(self) -> List[Optional[int]]:
        parent: List[Optional[int]] = [None] * len(self.children)
        for p, kids in enumerate(self.children):
            for q in kids:
                parent[q] = p
        return parent

    def pattern_depth(self, p: int) -> int:
        parent = self.pattern_parent()
        depth = 0
        while parent[p] is not None:
            p = parent[p]
            depth += 1
        return depth

    def theorem_parameters(self) -> Tuple[int, int, int]:
        """(n, j, m): neighbors of sigma minus one in a glued copy, j1 + j2, glue count."""
        root_kids = len(self.children[0])
        if self.sigma == 0:
            n = min(root_kids + len(self.children[g]) for g in self.glue)
        else:
            n = len(self.children[self.sigma])
            if self.sigma in self.glue:
                n += root_kids
        j1 = self.pattern_depth(self.sigma)
        sigma_depth = j1
        j2 = 0
        for g in self.glue:
            j2 = max(j2, self.pattern_depth(g) - sigma_depth)
        return n, j1 + j2, len(self.glue)


class StarSpec(BaseModel):
    family: Literal["star"] = "star"
    n: int = Field(ge=1)


class StarChainSpec(BaseModel):
    """Star of n leaves; leaf 0 starts a chain v_1 = (0,), v_k = (0,)*k up to v_r."""

    family: Literal["star_chain"] = "star_chain"
    n: int = Field(ge=1)
    r: int = Field(ge=0)

    def chain_vertex(self, k: int) -> VertexId:
        if not 0 <= k <= max(self.r, 0):
            raise InvalidVertexError(f"chain has no vertex v_{k} (r={self.r})")
        return (0,) * k


TreeSpec = Annotated[
    Union[HomogeneousSpec, GaltonWatsonSpec, PeriodicSpec, StarSpec, StarChainSpec],
    Field(discriminator="family"),
]

_tree_spec_adapter = TypeAdapter(TreeSpec)


def parse_tree_spec(document) -> BaseModel:
    """Build a tree spec from a dict or JSON string."""
    if isinstance(document, (str, bytes)):
        return _tree_spec_adapter.validate_json(document)
    return _tree_spec_adapter.validate_python(document)


def decorated_binary(n: int) -> PeriodicSpec:
    """Binary tree in which every vertex also carries n childless children."""
    return PeriodicSpec(children=[list(range(1, n + 3))] + [[] for _ in range(n + 2)], glue=[1, 2])


def alternating(first: int, second: int) -> PeriodicSpec:
    """Generations alternate between `first` and `second` children per vertex."""
    children: List[List[int]] = [list(range(1, first + 1))]
    grand = first + 1
    for _ in range(first):
        children.append(list(range(grand, grand + second)))
        grand += second
    children.extend([] for _ in range(first * second))
    return PeriodicSpec(children=children, glue=list(range(first + 1, grand)))


# ---------------------------------------------------------------------------
# Tree model
# ---------------------------------------------------------------------------

class TreeModel:
    """Lazily expanded rooted tree answering neighbor queries."""

    def __init__(self, spec):
        if isinstance(spec, dict):
            spec = parse_tree_spec(spec)
        self.spec = spec
        self.family: str = spec.family
        self.depth_limit: Optional[int] = getattr(spec, "depth_limit", None)
        self._counts: dict = {}
        if self.family == "galton_watson":
            self._cdf = np.cumsum(spec.pmf())
        if self.family == "periodic":
            self._glue = frozenset(spec.glue)
            self._states: dict = {ROOT: 0}

    @property
    def is_finite(self) -> bool:
        return self.family in ("star", "star_chain") or self.depth_limit is not None

    @property
    def n(self) -> Optional[int]:
        return getattr(self.spec, "n", None)

    def __repr__(self):
        return f"TreeModel({self.spec!r})"

    # -- child counts ------------------------------------------------------

    def _pattern_kids(self, p: int) -> List[int]:
        kids = list(self.spec.children[p])
        if p in self._glue:
            kids.extend(self.spec.children[0])
        return kids

    def _periodic_state(self, v: VertexId) -> int:
        state = self._states.get(v)
        if state is None:
            state = self._pattern_kids(self._periodic_state(v[:-1]))[v[-1]]
            self._states[v] = state
        return state

    def _raw_count(self, v: VertexId) -> int:
        if self.depth_limit is not None and len(v) >= self.depth_limit:
            return 0
        family = self.family
        if family == "homogeneous":
            return self.spec.n + 1 if not v else self.spec.n
        if family == "star":
            return self.spec.n if not v else 0
        if family == "star_chain":
            if not v:
                return self.spec.n
            return 1 if len(v) < self.spec.r and all(i == 0 for i in v) else 0
        if family == "galton_watson":
            u = keyed_uniform(self.spec.seed, "gw", v)
            return int(min(np.searchsorted(self._cdf, u, side="right"), len(self._cdf) - 1))
        if family == "periodic":
            return len(self._pattern_kids(self._periodic_state(v)))
        raise UnsupportedFamilyError(f"unknown tree family {family!r}")

    def child_count(self, v: VertexId) -> int:
        count = self._counts.get(v)
        if count is None:
            if v:
                parent = v[:-1]
                if v[-1] < 0 or v[-1] >= self.child_count(parent):
                    raise InvalidVertexError(f"{v} is not a vertex of {self.family} tree")
            count = self._raw_count(v)
            self._counts[v] = count
        return count

    def validate(self, v: VertexId) -> VertexId:
        v = tuple(v)
        self.child_count(v)
        return v

    def contains(self, v: VertexId) -> bool:
        try:
            self.child_count(tuple(v))
        except InvalidVertexError:
            return False
        return True

    # -- adjacency ---------------------------------------------------------

    def parent(self, v: VertexId) -> Optional[VertexId]:
        return v[:-1] if v else None

    def children(self, v: VertexId) -> List[VertexId]:
        return [v + (i,) for i in range(self.child_count(v))]

    def degree(self, v: VertexId) -> int:
        return self.child_count(v) + (1 if v else 0)

    def neighbors(self, v: VertexId) -> List[VertexId]:
        """Parent first (if any), then children in index order."""
        v = self.validate(v)
        kids = self.children(v)
        return [v[:-1]] + kids if v else kids

    def neighbor_at(self, v: VertexId, slot: int) -> VertexId:
        """Neighbor in position `slot` of neighbors(v)."""
        if v:
            return v[:-1] if slot == 0 else v + (slot - 1,)
        return (slot,)

    def slot_of(self, v: VertexId, w: VertexId) -> int:
        """Position of neighbor w in neighbors(v)."""
        if v and w == v[:-1]:
            return 0
        if len(w) == len(v) + 1 and w[:-1] == v:
            return w[-1] + (1 if v else 0)
        raise InvalidVertexError(f"{w} is not adjacent to {v}")


def is_homogeneous(model: TreeModel) -> bool:
    return model.family == "homogeneous" and model.depth_limit is None


def _require_homogeneous(model: TreeModel, operation: str) -> int:
    if not is_homogeneous(model):
        raise UnsupportedFamilyError(
            f"{operation} needs an untruncated homogeneous tree, got {model.family}"
            " (use boundary_edge_count for the brute-force path)"
        )
    return model.spec.n


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

def _component_count(S) -> int:
    # each component of an induced forest has exactly one vertex whose parent is outside it
    return sum(1 for v in S if not v or v[:-1] not in S)


@dataclass(frozen=True)
class Configuration:
    """Finite set of infected vertices with cached k and c."""

    infected: frozenset

    @classmethod
    def of(cls, vertices: Iterable[VertexId]) -> "Configuration":
        return cls(frozenset(tuple(v) for v in vertices))

    @property
    def k(self) -> int:
        return len(self.infected)

    @cached_property
    def c(self) -> int:
        return _component_count(self.infected)

    def __contains__(self, v) -> bool:
        return v in self.infected

    def __len__(self) -> int:
        return len(self.infected)

    def __iter__(self):
        return iter(sorted(self.infected))


def as_vertex_set(S) -> frozenset:
    if isinstance(S, Configuration):
        return S.infected
    return frozenset(tuple(v) for v in S)


def count_components(model: Optional[TreeModel], S) -> int:
    """Number of connected components of the subgraph induced by S."""
    S = as_vertex_set(S)
    if model is not None:
        for v in S:
            model.validate(v)
    return _component_count(S)


@dataclass(frozen=True)
class Rate:
    """A rate stored as integer coefficient times lambda."""

    coefficient: int
    lam: float = 1.0

    @property
    def value(self) -> float:
        return self.coefficient * self.lam


def infection_rate(model: TreeModel, xi, lam: float) -> Rate:
    """Total rate of new infections, lambda((n-1)k + 2c)."""
    n = _require_homogeneous(model, "infection_rate")
    S = as_vertex_set(xi)
    return Rate((n - 1) * len(S) + 2 * _component_count(S), lam)


def boundary_edge_count(model: TreeModel, S) -> int:
    """Directed edges from an infected vertex to a healthy one, by enumeration."""
    S = as_vertex_set(S)
    return sum(1 for v in S for w in model.neighbors(v) if w not in S)


def component_formation_rate(xi) -> int:
    """k - 2c: net components created per unit time by recoveries."""
    S = as_vertex_set(xi)
    return len(S) - 2 * _component_count(S)


def component_formation_oracle(model: Optional[TreeModel], S) -> int:
    """Sum over infected v of the component change caused by removing v."""
    S = as_vertex_set(S)
    base = count_components(model, S)
    return sum(count_components(model, S - {v}) - base for v in S)


def _component_labels(S: frozenset) -> dict:
    labels = {}
    for v in sorted(S, key=len):
        parent = v[:-1]
        labels[v] = labels[parent] if v and parent in S else v
    return labels


def joining_loss_rate_and_bound(model: TreeModel, xi, lam: float) -> Tuple[Rate, Rate]:
    """Exact rate at which infections merge components, and the (n+1)lambda(c-1) bound."""
    n = _require_homogeneous(model, "joining_loss_rate_and_bound")
    S = as_vertex_set(xi)
    labels = _component_labels(S)
    arrivals: Counter = Counter()
    touching: dict = {}
    for v in S:
        for w in model.neighbors(v):
            if w not in S:
                arrivals[w] += 1
                touching.setdefault(w, set()).add(labels[v])
    exact = sum(arrivals[w] * (len(touching[w]) - 1) for w in arrivals)
    c = _component_count(S)
    return Rate(exact, lam), Rate((n + 1) * max(c - 1, 0), lam)


def surrounded_vertices(model: TreeModel, S) -> set:
    """Vertices of S such that every component of the tree minus v meets S."""
    S = as_vertex_set(S)
    if not S:
        return set()
    under: Counter = Counter()
    for s in S:
        for i in range(len(s) + 1):
            under[s[:i]] += 1
    total = len(S)
    result = set()
    for v in S:
        if v and total - under[v] <= 0:
            continue
        if all(under[u] > 0 for u in model.children(v)):
            result.add(v)
    return result


# ---------------------------------------------------------------------------
# Random sets for property tests and experiments
# ---------------------------------------------------------------------------

def random_connected_set(model: TreeModel, size: int, rng: np.random.Generator) -> frozenset:
    """Grow a connected set from the root by uniformly chosen boundary additions."""
    chosen = [ROOT]
    boundary: List[VertexId] = list(model.children(ROOT))
    while len(chosen) < size and boundary:
        i = int(rng.integers(len(boundary)))
        v = boundary[i]
        boundary[i] = boundary[-1]
        boundary.pop()
        chosen.append(v)
        boundary.extend(model.children(v))
    return frozenset(chosen)


def random_configuration(
    model: TreeModel, size: int, rng: np.random.Generator, keep: float = 0.6
) -> Configuration:
    """A connected set thinned independently, so it usually has several components."""
    grown = sorted(random_connected_set(model, size, rng))
    kept = [v for v in grown if rng.random() < keep]
    if not kept:
        kept = [grown[int(rng.integers(len(grown)))]]
    return Configuration.of(kept)
