import math

import networkx as nx
import numpy as np
import pytest
from networkx.utils import UnionFind
from pydantic import ValidationError

from topology import (
    ROOT,
    Configuration,
    GaltonWatsonSpec,
    HomogeneousSpec,
    InvalidVertexError,
    PeriodicSpec,
    StarChainSpec,
    StarSpec,
    TreeModel,
    UnsupportedFamilyError,
    alternating,
    boundary_edge_count,
    component_formation_oracle,
    component_formation_rate,
    count_components,
    decorated_binary,
    heavy_tail_log_pmf,
    infection_rate,
    joining_loss_rate_and_bound,
    keyed_rng,
    parse_tree_spec,
    random_configuration,
    random_connected_set,
    surrounded_vertices,
)


def _networkx_components(S):
    graph = nx.Graph()
    graph.add_nodes_from(S)
    graph.add_edges_from((v, v[:-1]) for v in S if v and v[:-1] in S)
    return nx.number_connected_components(graph)


def _union_find_components(S):
    uf = UnionFind(S)
    for v in S:
        if v and v[:-1] in S:
            uf.union(v, v[:-1])
    return len({uf[v] for v in S})


# -- neighbors -------------------------------------------------------------

def test_homogeneous_root_has_n_plus_one_neighbors(binary_tree):
    assert binary_tree.neighbors(ROOT) == [(0,), (1,), (2,)]
    assert len(binary_tree.neighbors((1, 0))) == 3


def test_neighbors_list_parent_first(binary_tree):
    assert binary_tree.neighbors((2, 1)) == [(2,), (2, 1, 0), (2, 1, 1)]


def test_star_leaf_only_touches_root(star5):
    assert star5.neighbors((0,)) == [ROOT]
    assert len(star5.neighbors(ROOT)) == 5


def test_star_chain_geometry():
    spec = StarChainSpec(n=4, r=3)
    model = TreeModel(spec)
    assert spec.chain_vertex(3) == (0, 0, 0)
    assert model.neighbors((0, 0)) == [(0,), (0, 0, 0)]
    assert model.neighbors((0, 0, 0)) == [(0, 0)]
    assert model.neighbors((1,)) == [ROOT]
    with pytest.raises(InvalidVertexError):
        spec.chain_vertex(4)


@pytest.mark.parametrize("v", [(3,), (0, 2), (0, -1), (1, 1, 5)])
def test_invalid_paths_raise(binary_tree, v):
    with pytest.raises(InvalidVertexError):
        binary_tree.neighbors(v)
    assert not binary_tree.contains(v)


def test_depth_limit_truncates():
    model = TreeModel(HomogeneousSpec(n=2, depth_limit=2))
    assert model.is_finite
    assert model.children((0, 1)) == []
    assert model.neighbors((0, 1)) == [(0,)]


def test_galton_watson_queries_are_reproducible():
    spec = GaltonWatsonSpec(offspring=[0.2, 0.3, 0.5], seed=7)
    first, second = TreeModel(spec), TreeModel(spec)
    frontier = [ROOT]
    seen = 0
    while frontier and seen < 300:
        v = frontier.pop()
        assert first.neighbors(v) == first.neighbors(v) == second.neighbors(v)
        frontier.extend(first.children(v))
        seen += 1


def test_galton_watson_seed_changes_tree():
    roots = {TreeModel(GaltonWatsonSpec(offspring=[0.5, 0.0, 0.5], seed=s)).child_count(ROOT) for s in range(40)}
    assert roots == {0, 2}


def test_galton_watson_spec_needs_exactly_one_law():
    with pytest.raises(ValidationError):
        GaltonWatsonSpec(seed=1)
    with pytest.raises(ValidationError):
        GaltonWatsonSpec(offspring=[0.5, 0.4])


def test_heavy_tail_law_is_normalised():
    gamma = 0.5
    total = sum(math.exp(heavy_tail_log_pmf(k, gamma)) for k in range(20_000))
    assert total == pytest.approx(1.0, abs=1e-9)
    spec = GaltonWatsonSpec(heavy_tail_gamma=gamma, heavy_tail_kmax=400, seed=3)
    assert spec.pmf().sum() == pytest.approx(1.0)
    assert spec.log_pmf(5) == pytest.approx(heavy_tail_log_pmf(5, gamma))


def test_decorated_binary_preset():
    model = TreeModel(decorated_binary(3))
    assert model.child_count(ROOT) == 5
    # glue vertices repeat the root's pattern; the rest are leaves
    assert model.child_count((0,)) == 5
    assert model.child_count((1, 0)) == 5
    assert model.child_count((2,)) == 0
    assert decorated_binary(3).theorem_parameters() == (5, 1, 2)


def test_alternating_preset_alternates():
    model = TreeModel(alternating(2, 3))
    assert [model.child_count((0,) * d) for d in range(5)] == [2, 3, 2, 3, 2]


def test_periodic_pattern_must_be_a_tree():
    with pytest.raises(ValidationError):
        PeriodicSpec(children=[[1], [0]], glue=[1])
    with pytest.raises(ValidationError):
        PeriodicSpec(children=[[1], []], glue=[])


def test_tree_spec_documents_round_trip():
    spec = parse_tree_spec('{"family": "homogeneous", "n": 3}')
    assert isinstance(spec, HomogeneousSpec) and spec.n == 3
    assert isinstance(parse_tree_spec({"family": "star", "n": 64}), StarSpec)
    with pytest.raises(ValidationError):
        parse_tree_spec({"family": "lattice", "n": 2})


# -- configurations ----------------------------------------------------------

def test_count_components_examples(binary_tree):
    assert count_components(binary_tree, [(0,)]) == 1
    assert count_components(binary_tree, [(0,), (0, 1)]) == 1
    assert count_components(binary_tree, [(0,), (0, 1, 1)]) == 2
    assert count_components(binary_tree, []) == 0


def test_configuration_k_and_c():
    xi = Configuration.of([(), (0,), (1, 0)])
    assert (xi.k, xi.c) == (3, 2)
    assert Configuration.of([]).c == 0


def test_count_components_matches_union_find(rng):
    model = TreeModel(HomogeneousSpec(n=3))
    for _ in range(1000):
        xi = random_configuration(model, int(rng.integers(1, 30)), rng)
        S = xi.infected
        expected = _union_find_components(S)
        assert count_components(model, S) == expected == _networkx_components(S)
        assert 1 <= xi.c <= xi.k


# -- rate identities ---------------------------------------------------------

def test_infection_rate_single_vertex(binary_tree):
    rate = infection_rate(binary_tree, [(1,)], 0.7)
    assert rate.coefficient == 3
    assert rate.value == pytest.approx(2.1)


def test_infection_rate_adjacent_pair(binary_tree):
    pair = [(0,), (0, 1)]
    assert infection_rate(binary_tree, pair, 1.0).coefficient == 4
    assert boundary_edge_count(binary_tree, pair) == 4


def test_infection_rate_needs_homogeneous_tree(star5):
    with pytest.raises(UnsupportedFamilyError):
        infection_rate(star5, [ROOT], 1.0)
    assert boundary_edge_count(star5, [ROOT]) == 5


def test_component_formation_examples():
    assert component_formation_rate([(0,)]) == -1
    assert component_formation_rate([(0,), (0, 0)]) == 0


def test_joining_loss_examples(binary_tree):
    exact, bound = joining_loss_rate_and_bound(binary_tree, [(0,), (0, 1)], 1.0)
    assert (exact.coefficient, bound.coefficient) == (0, 0)
    exact, bound = joining_loss_rate_and_bound(binary_tree, [(0,), (0, 0, 0)], 0.5)
    assert exact.coefficient == 2 and bound.coefficient == 3
    assert exact.value == pytest.approx(1.0)


def test_rate_identities_on_random_configurations(homogeneous):
    rng = keyed_rng(11, "identities", homogeneous.n)
    for _ in range(1000):
        xi = random_configuration(homogeneous, int(rng.integers(1, 25)), rng)
        assert infection_rate(homogeneous, xi, 1.0).coefficient == boundary_edge_count(homogeneous, xi)
        assert component_formation_rate(xi) == component_formation_oracle(homogeneous, xi)
        exact, bound = joining_loss_rate_and_bound(homogeneous, xi, 1.0)
        assert exact.coefficient <= bound.coefficient


# -- surrounded vertices ------------------------------------------------------

def test_star_of_root_is_surrounded_at_root(homogeneous):
    n = homogeneous.n
    S = [ROOT] + homogeneous.neighbors(ROOT)
    assert surrounded_vertices(homogeneous, S) == {ROOT}
    assert 1 < len(S) / n


def test_path_has_no_surrounded_vertex(binary_tree):
    assert surrounded_vertices(binary_tree, [ROOT, (0,), (0, 0)]) == set()


def test_surrounded_count_below_size_over_n(homogeneous):
    rng = np.random.default_rng(homogeneous.n)
    for _ in range(1000):
        S = random_connected_set(homogeneous, int(rng.integers(1, 60)), rng)
        assert len(surrounded_vertices(homogeneous, S)) < len(S) / homogeneous.n
