import os

import matplotlib
import numpy as np
import pytest
from hypothesis import settings

matplotlib.use("Agg")

from pcvs.autodiff import default_dtype  # noqa: E402
from pcvs.scenes import SceneSpec, generate_benchmark, generate_scene  # noqa: E402

settings.register_profile("pcvs", max_examples=25, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "pcvs"))


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(height=24, width=24, seed=3))


@pytest.fixture(scope="session")
def toy_scenes():
    return generate_benchmark(None, 5, seed=200, height=16, width=16)


@pytest.fixture(scope="session")
def scene_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    generate_benchmark(str(root), 2, seed=40, height=16, width=16)
    return root
