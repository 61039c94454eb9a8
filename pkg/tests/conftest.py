import pytest
import torch

from vecloc.bev import BevGrid
from vecloc.geometry import GridSpec, Pose6
from vecloc.map_core import MapElement, SemanticType
from vecloc.matcher import Matcher, MatcherDims


SMALL_DIMS = MatcherDims(channels=8, heads=2, points=2, layers=2, ffn_hidden=16,
                         score_hidden=16, pyramid_channels=(8, 6, 4))


@pytest.fixture
def small_dims():
    return SMALL_DIMS


@pytest.fixture
def small_matcher():
    return Matcher(SMALL_DIMS, seed=7)


@pytest.fixture
def flat_pose():
    return Pose6.from_ypr(0.0, 0.0, 1.8, 0.0)


@pytest.fixture
def small_spec():
    return GridSpec.centered(16, 16, 1.0)


@pytest.fixture
def small_elements():
    return (
        MapElement.segment(0, SemanticType.LANE_LINE, -5.0, -2.0, 5.0, -2.0),
        MapElement.segment(1, SemanticType.ROAD_BOUNDARY, -5.0, 3.0, 5.0, 3.0),
        MapElement.vertical(2, SemanticType.POLE, 2.0, 4.0, 6.0),
        MapElement.surfel(3, (-3.0, 4.0), (0.6, 0.8, 0.0), (0.05, 0.02)),
    )


def random_grid(rng, spec, channels, layer=0, scale=1.0):
    data = rng.standard_normal((spec.H, spec.W, channels)) * scale
    return BevGrid(spec, torch.as_tensor(data, dtype=torch.float64), layer=layer)


@pytest.fixture
def grid_factory():
    return random_grid
