"""
Shared fixtures: small catalogs, neighborhood indexes, the Flask app and its CLI runner
"""
import numpy as np
import pytest

from main import create_app
from models import DissimilaritySpec, TieBreak
from services.catalog import CatalogService


def build_index(points, threshold, tie_break=TieBreak.BY_ID):
    catalog = CatalogService.from_embeddings(points)
    return CatalogService.build_neighborhood_index(catalog, DissimilaritySpec(threshold=threshold), tie_break)


def random_instance(seed, n_items=None, dimension=2):
    """Random points, a threshold giving a few neighbors each, random q in [0, 1] and random rates"""
    rng = np.random.default_rng(seed)
    n_items = n_items or int(rng.integers(20, 31))
    points = rng.uniform(0.0, 10.0, size=(n_items, dimension))
    threshold = float(rng.uniform(1.5, 3.0))
    index = build_index(points, threshold)
    acceptance = np.where(index.mask, rng.uniform(0.0, 1.0, index.neighbors.shape), 0.0)
    rates = rng.dirichlet(np.ones(n_items))
    return index, acceptance, rates


@pytest.fixture
def grid3_index():
    catalog = CatalogService.grid_catalog(3)
    return CatalogService.build_neighborhood_index(
        catalog, DissimilaritySpec(threshold=1.0), TieBreak.COUNTERCLOCKWISE
    )


@pytest.fixture
def isolated_index():
    """100 items on a line, 10 apart, so d = 1 gives empty neighborhoods"""
    return build_index([[10.0 * n] for n in range(100)], 1.0)


@pytest.fixture
def zipf_rates():
    return CatalogService.zipf_popularity(100, 1.0).rates


@pytest.fixture
def small_grid_index():
    catalog = CatalogService.grid_catalog(6)
    return CatalogService.build_neighborhood_index(
        catalog, DissimilaritySpec(threshold=1.0), TieBreak.COUNTERCLOCKWISE
    )


@pytest.fixture
def small_grid_rates():
    catalog = CatalogService.grid_catalog(6)
    return CatalogService.synthetic_popularity(catalog, [(1.0, 1.0), (4.0, 4.0)], 2.5).rates


@pytest.fixture
def app():
    return create_app({'TESTING': True})


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def cli_runner(app):
    return app.test_cli_runner()
