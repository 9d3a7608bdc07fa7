import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import hull_residual, random_neighborhood

from pcvs.autodiff import Tensor, default_dtype, grad_check, ops
from pcvs.cloud import SubPointCloud, build_sub_cloud
from pcvs.fusion import (
    FusionConfig,
    FusionNet,
    FusionWeights,
    build_embedding,
    cascade_fuse,
    fuse_clouds,
    fuse_neighborhood,
    neighbor_embeddings,
    predict_weights,
)
from pcvs.geometry import Camera


def _fuse_one(anchor, nbrs, adesc, ndesc, net, rotation_invariant=False):
    K = len(nbrs)
    emb = neighbor_embeddings(Tensor(anchor[None]), Tensor(nbrs[None]), Tensor(adesc[None]),
                              Tensor(ndesc[None]), rotation_invariant=rotation_invariant)
    w = predict_weights(emb, net)
    pos, desc = fuse_neighborhood(nbrs.reshape(1, K, 3), ndesc.reshape(1, K, -1), w)
    return pos.data[0], desc.data[0], w


def _sub(points, rng, view=0):
    n = len(points)
    desc = rng.uniform(size=(n, 35))
    return SubPointCloud(Tensor(points), desc[:, :3], Tensor(desc), None, view, np.arange(n))


def test_embedding_of_anchor_itself():
    e = build_embedding([1, 2, 3], [1, 2, 3], np.ones(35), np.ones(35))
    assert e.as_vector().tolist() == [0, 0, 0, 0, 1]


def test_embedding_similarity_and_quality():
    a = np.zeros(35)
    a[0] = 1
    b = np.zeros(35)
    b[1] = 1
    assert build_embedding([0, 0, 0], [1, 0, 0], a, b).similarity == 0
    assert build_embedding([0, 0, 0], [1, 0, 0], a, -a).similarity == pytest.approx(-1)
    assert build_embedding([0, 0, 0], [1, 0, 0], np.zeros(35), a).similarity == 0
    e = build_embedding([0, 0, 0], [0, 3, 4], a, a, quality=0.25)
    assert e.as_vector().tolist() == [0, 3, 4, 5, 0.25, 1]


def test_batched_embedding_matches_scalar_version(f64):
    rng = np.random.default_rng(0)
    anchor, nbrs, adesc, ndesc = random_neighborhood(rng, 6)
    q = rng.uniform(size=6)
    emb = neighbor_embeddings(Tensor(anchor[None]), Tensor(nbrs[None]), Tensor(adesc[None]),
                              Tensor(ndesc[None]), Tensor(q[None])).data[0]
    for k in range(6):
        ref = build_embedding(anchor, nbrs[k], adesc, ndesc[k], q[k]).as_vector()
        np.testing.assert_allclose(emb[k], ref, atol=1e-12)


def test_single_neighbour_weights_are_one():
    net = FusionNet(FusionConfig(K=1), np.random.default_rng(0))
    w = predict_weights(np.random.default_rng(1).normal(size=(4, 1, 5)), net)
    assert w.position.data.tolist() == [[1.0]] * 4
    assert w.descriptor.data.tolist() == [[1.0]] * 4


def test_identical_embeddings_give_uniform_weights():
    net = FusionNet(FusionConfig(), np.random.default_rng(0))
    emb = np.broadcast_to(np.random.default_rng(1).normal(size=5), (2, 8, 5))
    w = predict_weights(emb, net)
    np.testing.assert_allclose(w.position.data, 1 / 8, rtol=1e-6)
    np.testing.assert_allclose(w.descriptor.data, 1 / 8, rtol=1e-6)


def test_fuse_neighborhood_matches_loop(f64):
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(3, 4, 3))
    desc = rng.normal(size=(3, 4, 35))
    wp = rng.dirichlet(np.ones(4), 3)
    wf = rng.dirichlet(np.ones(4), 3)
    x, f = fuse_neighborhood(pos, desc, FusionWeights(Tensor(wp), Tensor(wf)))
    for m in range(3):
        np.testing.assert_allclose(x.data[m], sum(wp[m, k] * pos[m, k] for k in range(4)), atol=1e-12)
        np.testing.assert_allclose(f.data[m], sum(wf[m, k] * desc[m, k] for k in range(4)), atol=1e-12)


def test_coincident_neighbours_fuse_to_that_point():
    pos = np.broadcast_to([1.0, -2.0, 3.0], (1, 5, 3))
    w = FusionWeights(Tensor(np.random.default_rng(0).dirichlet(np.ones(5), 1)), Tensor(np.full((1, 5), 0.2)))
    x, _ = fuse_neighborhood(pos, np.ones((1, 5, 35)), w)
    np.testing.assert_allclose(x.data[0], [1, -2, 3], atol=1e-6)


def test_weight_gradients(f64):
    rng = np.random.default_rng(3)
    net = FusionNet(FusionConfig(), rng)
    emb = Tensor(rng.normal(size=(3, 8, 5)))
    R = Tensor(rng.normal(size=(3, 8)))
    err = grad_check(lambda: ops.sum((predict_weights(emb, net).position + predict_weights(emb, net).descriptor) * R),
                     net.parameters(), max_samples=20)
    assert err < 1e-4


@given(K=st.integers(1, 12), seed=st.integers(0, 100_000))
def test_fused_point_inside_hull_and_order_free(K, seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        net = FusionNet(FusionConfig(K=K), rng)
        anchor, nbrs, adesc, ndesc = random_neighborhood(rng, K)
        x, f, _ = _fuse_one(anchor, nbrs, adesc, ndesc, net)
        assert hull_residual(x, nbrs) <= 1e-5
        perm = rng.permutation(K)
        xp, fp, _ = _fuse_one(anchor, nbrs[perm], adesc, ndesc[perm], net)
        assert np.abs(xp - x).max() <= 1e-6
        assert np.abs(fp - f).max() <= 1e-6


@given(seed=st.integers(0, 100_000))
def test_translation_equivariance(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        net = FusionNet(FusionConfig(), rng)
        anchor, nbrs, adesc, ndesc = random_neighborhood(rng, 8)
        shift = rng.normal(size=3) * 5
        x, _, _ = _fuse_one(anchor, nbrs, adesc, ndesc, net)
        xs, _, _ = _fuse_one(anchor + shift, nbrs + shift, adesc, ndesc, net)
        np.testing.assert_allclose(xs, x + shift, atol=1e-9)


@given(seed=st.integers(0, 100_000))
def test_rotation_equivariance_of_invariant_variant(seed):
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cfg = FusionConfig(rotation_invariant=True)
        net = FusionNet(cfg, rng)
        anchor, nbrs, adesc, ndesc = random_neighborhood(rng, 8)
        R = Rotation.random(random_state=seed).as_matrix()
        t = rng.normal(size=3)
        x, _, _ = _fuse_one(anchor, nbrs, adesc, ndesc, net, rotation_invariant=True)
        xr, _, _ = _fuse_one(R @ anchor + t, nbrs @ R.T + t, adesc, ndesc, net, rotation_invariant=True)
        np.testing.assert_allclose(xr, R @ x + t, atol=1e-9)


def test_k1_full_anchor_set_reproduces_cloud():
    rng = np.random.default_rng(4)
    sub = _sub(rng.normal(size=(30, 3)), rng)
    net = FusionNet(FusionConfig(K=1), rng)
    u = fuse_clouds([sub], FusionConfig(K=1, anchor_ratio=1.0), net, (5, 6), seed=0)
    assert len(u) == 30
    order = u.anchor_index
    np.testing.assert_array_equal(u.positions.data, sub.positions.data[order])
    np.testing.assert_array_equal(u.descriptors.data, sub.descriptors.data[order])


def test_duplicated_view_fuses_onto_original_points():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(40, 3))
    a = _sub(pts, rng, 0)
    b = SubPointCloud(a.positions, a.colors, a.descriptors, None, 1, a.pixel_index)
    net = FusionNet(FusionConfig(K=2), rng)
    u = fuse_clouds([a, b], FusionConfig(K=2, anchor_ratio=1.0), net, (5, 8), seed=1)
    d = np.linalg.norm(u.positions.data[:, None] - pts[None], axis=-1).min(axis=1)
    assert d.max() <= 1e-6


def test_cascade_of_identical_clouds():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(25, 3))
    a = _sub(pts, rng)
    clouds = [SubPointCloud(a.positions, a.colors, a.descriptors, None, v, a.pixel_index) for v in range(4)]
    # ratio 3 keeps every copy as an anchor, so each pass only sees coincident neighbours
    cfg = FusionConfig(K=3, anchor_ratio=3.0)
    u = cascade_fuse(clouds, cfg, FusionNet(cfg, rng), (5, 5), seed=0)
    assert u.passes == 2
    assert len(u) == 75
    d = np.linalg.norm(u.positions.data[:, None] - pts[None], axis=-1).min(axis=1)
    assert d.max() <= 1e-6


def test_noisy_plane_copies_are_denoised():
    rng = np.random.default_rng(7)
    H = W = 20
    cam = Camera(20, 20, (W - 1) / 2, (H - 1) / 2, width=W, height=H)
    view = np.full((H, W, 3), 0.5)
    feats = Tensor(np.zeros((H, W, 32)))
    subs = [build_sub_cloud(view, 2.0 + rng.normal(0, 0.02, (H, W)), feats, None, cam, v) for v in range(2)]
    cfg = FusionConfig(K=8)
    u = fuse_clouds(subs, cfg, FusionNet(cfg, rng), (H, W), seed=0)
    raw = np.concatenate([s.positions.data[:, 2] for s in subs])
    assert np.abs(u.positions.data[:, 2] - 2.0).mean() < np.abs(raw - 2.0).mean()


def test_fusion_pipeline_gradients(f64):
    rng = np.random.default_rng(8)
    cfg = FusionConfig(K=4, anchor_ratio=1.0)
    net = FusionNet(cfg, rng)
    pos = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
    desc = Tensor(rng.uniform(size=(10, 35)), requires_grad=True)
    sub = SubPointCloud(pos, desc.data[:, :3], desc, None, 0, np.arange(10))
    R1, R2 = Tensor(rng.normal(size=(10, 3))), Tensor(rng.normal(size=(10, 35)))

    def fn():
        u = fuse_clouds([sub], cfg, net, (2, 5), seed=0)
        return ops.sum(u.positions * R1) + ops.sum(u.descriptors * R2)

    assert grad_check(fn, {"pos": pos, "desc": desc, **net.parameters()}, eps=1e-6, max_samples=24, atol=1e-6) < 1e-4


def test_quality_requires_quality_inputs():
    rng = np.random.default_rng(9)
    cfg = FusionConfig(use_quality=True)
    with pytest.raises(ValueError, match="quality"):
        fuse_clouds([_sub(rng.normal(size=(12, 3)), rng)], cfg, FusionNet(cfg, rng), (3, 4), seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(K=0)
    assert FusionConfig().embedding_dim == 5
    assert FusionConfig(use_quality=True).embedding_dim == 6
