import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventpose.geometry import PoseSE3


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_pose(rng, max_translation=1.0) -> PoseSE3:
    rot = Rotation.random(rng=rng).as_matrix()
    trans = rng.uniform(-max_translation, max_translation, size=3)
    return PoseSE3(rot, trans)
