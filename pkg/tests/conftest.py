import hypothesis
import numpy as np
import pytest

from geoaff.bench import _merge
from geoaff.mldepth import render_mld
from geoaff.scene import Camera, box_mesh

hypothesis.settings.register_profile("toolkit", deadline=None,
                                     max_examples=50)
hypothesis.settings.load_profile("toolkit")


@pytest.fixture(scope="session")
def small_camera():
    """Identity-pose 64x64 camera whose frustum the test scenes fully cover."""
    return Camera(fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
                  rotation=np.eye(3), translation=np.zeros(3))


@pytest.fixture(scope="session")
def two_box_mesh():
    """Frontal slab z in [1000, 1400] and a second one z in [3000, 3100],
    both wide enough to cover the whole small_camera frustum."""
    return _merge([
        box_mesh([-2000, -2000, 1000], [2000, 2000, 1400]),
        box_mesh([-3000, -3000, 3000], [3000, 3000, 3100]),
    ])


@pytest.fixture(scope="session")
def two_box_mld(two_box_mesh, small_camera):
    return render_mld(two_box_mesh, small_camera, layers=15)


def make_layer_mld(columns, size=8, camera=None):
    """Build a MultiLayerDepthMap whose every pixel has the given layer
    column (list of finite depths), padded with NaN."""
    from geoaff.mldepth import MultiLayerDepthMap
    layers = max(len(columns), 1)
    grid = np.full((size, size, layers), np.nan, dtype=np.float32)
    for i, v in enumerate(columns):
        grid[:, :, i] = v
    if camera is None:
        camera = Camera(fx=100.0, fy=100.0, cx=size / 2, cy=size / 2,
                        width=size, height=size, rotation=np.eye(3),
                        translation=np.zeros(3))
    return MultiLayerDepthMap(grid, camera)
