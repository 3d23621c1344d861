import numpy as np
import pytest

from topology import HomogeneousSpec, StarSpec, TreeModel


@pytest.fixture
def binary_tree():
    return TreeModel(HomogeneousSpec(n=2))


@pytest.fixture(params=[2, 3, 4], ids=lambda n: f"n={n}")
def homogeneous(request):
    return TreeModel(HomogeneousSpec(n=request.param))


@pytest.fixture
def star5():
    return TreeModel(StarSpec(n=5))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def results_dir(tmp_path, monkeypatch):
    from config import Config

    monkeypatch.setattr(Config, "OUTPUT_DIR", str(tmp_path / "results"))
    return tmp_path / "results"
