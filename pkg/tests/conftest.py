import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cblkit.cloud import PointCloud


FIXTURES = Path(__file__).parent / "fixtures"


def random_cloud(rng, num_points=200, num_classes=3, extent=1.0, with_pred=True):
    """Uniform random positions with random labels; labels are spatially
    uncorrelated on purpose so boundary sets are dense and exercised hard."""
    pos = rng.uniform(0.0, extent, size=(num_points, 3))
    gt = rng.integers(0, num_classes, size=num_points)
    pred = rng.integers(0, num_classes, size=num_points) if with_pred else None
    return PointCloud(pos, gt, pred, num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
