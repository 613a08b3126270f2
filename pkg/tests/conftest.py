import numpy as np
import pytest

from wavecell.assembly import ElementIntegralCache, Grid
from wavecell.basis import BasisSpec
from wavecell.geometry import ElementClass, ImmersedGeometry


@pytest.fixture(scope="session")
def benchmark_geometry():
    return ImmersedGeometry.from_angles(0.3, 0.5, (10.0, 10.0, 10.0))


@pytest.fixture(scope="session")
def small_grid(benchmark_geometry):
    """Immersed p=2, n_e=4 grid: cheap but has all three element classes."""
    spec = BasisSpec(family="lagrange", p=2, n_e=4)
    grid = Grid.build(benchmark_geometry, spec)
    classes = np.asarray(grid.classes).ravel()
    for klass in (ElementClass.OUTSIDE, ElementClass.INSIDE, ElementClass.CUT):
        assert (classes == klass).any()
    return grid


@pytest.fixture(scope="session")
def small_cache(small_grid):
    return ElementIntegralCache(small_grid, octree_depth=2)
