import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcvs.geometry import Camera
from pcvs.scenes import (
    Box,
    Rect,
    SceneGenerationError,
    SceneSpec,
    Sphere,
    add_depth_noise,
    coverage,
    generate_scene,
    ray_cast,
    surface_distance,
)

TEX = {"base": [0.5, 0.5, 0.5], "waves": []}


def _cam(size=17):
    return Camera(20, 20, (size - 1) / 2, (size - 1) / 2, width=size, height=size)


def test_fronto_parallel_plane_depth():
    cam = _cam()
    plane = Rect([0, 0, 2.0], [1, 0, 0], [0, 1, 0], [10, 10], TEX)
    r = ray_cast([plane], cam)
    np.testing.assert_allclose(r.depth, 2.0, atol=1e-12)
    assert (r.ids == 0).all()


def test_sphere_centre_depth():
    cam = _cam()
    r = ray_cast([Sphere([0, 0, 3.0], 1.0, TEX)], cam)
    assert r.depth[8, 8] == pytest.approx(2.0, abs=1e-12)
    assert r.depth[0, 0] == 0 and r.ids[0, 0] == -1
    np.testing.assert_allclose(r.image[0, 0], 0.0)


def test_nearest_primitive_wins():
    cam = _cam()
    prims = [Rect([0, 0, 5.0], [1, 0, 0], [0, 1, 0], [10, 10], TEX), Box([0, 0, 3.0], [0.3] * 3, 0.0, TEX)]
    r = ray_cast(prims, cam)
    assert r.ids[8, 8] == 1 and r.depth[8, 8] == pytest.approx(2.7)
    assert r.ids[0, 0] == 0


@given(seed=st.integers(0, 10_000))
def test_ray_cast_hits_lie_on_surfaces(seed):
    scene = generate_scene(SceneSpec(height=12, width=12, seed=seed % 50))
    from pcvs.geometry import unproject

    cam = scene.target_cam
    v, u = np.nonzero(scene.target_depth > 0)
    pts = unproject(np.stack([u, v], 1).astype(float), scene.target_depth[v, u], cam)
    from pcvs.scenes import primitives_from_json

    assert surface_distance(pts, primitives_from_json(scene.primitives)).max() < 1e-9


def test_generated_scene_meets_coverage():
    spec = SceneSpec(height=24, width=24, seed=5)
    scene = generate_scene(spec)
    from pcvs.scenes import primitives_from_json

    cams = [scene.target_cam, *scene.source_cams]
    rng = np.random.default_rng(0)
    for p in primitives_from_json(scene.primitives):
        assert coverage(p, cams, scene.target_cam, rng, n=2000) >= 0.75
    assert scene.n_views == 2 and (scene.target_depth > 0).mean() > 0.6


def test_impossible_spec_raises():
    with pytest.raises(SceneGenerationError):
        generate_scene(SceneSpec(height=12, width=12, min_coverage=1.01, max_tries=3))


def test_depth_noise_keeps_invalid_pixels():
    d = np.array([[0.0, 2.0], [3.0, 0.0]])
    noisy = add_depth_noise(d, 0.5, np.random.default_rng(0))
    assert noisy[0, 0] == 0 and noisy[1, 1] == 0
    assert (noisy[d > 0] > 0).all()
