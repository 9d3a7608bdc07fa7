"""Independent reference implementations used as test oracles.

Everything here is written from the definitions with plain loops or
exhaustive search, sharing no code with the library beyond the camera
dataclass and the analytic ray caster.
"""

import numpy as np

from pcvs.geometry import project, unproject
from pcvs.scenes import primitives_from_json, ray_cast


def loop_unproject(depth, cam):
    """(H*W, 3) world points, one pixel at a time from the pinhole equations."""
    H, W = depth.shape
    out = np.zeros((H * W, 3))
    Kinv = np.linalg.inv(cam.K)
    for v in range(H):
        for u in range(W):
            x_cam = Kinv @ np.array([u, v, 1.0]) * depth[v, u]
            out[v * W + u] = cam.R.T @ (x_cam - cam.t)
    return out


def brute_knn(points, query, k):
    """Exhaustive k nearest neighbours, ties broken by index."""
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g = np.outer(g, g)
    return g / g.sum()


def loop_ssim(x, y, c1=0.01 ** 2, c2=0.03 ** 2):
    """Windowed SSIM averaged over valid window positions and channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = gaussian_window()
    k = g.shape[0]
    H, W, C = x.shape
    vals = []
    for c in range(C):
        for i in range(H - k + 1):
            for j in range(W - k + 1):
                a = x[i:i + k, j:j + k, c]
                b = y[i:i + k, j:j + k, c]
                mx, my = (g * a).sum(), (g * b).sum()
                sxx = (g * a * a).sum() - mx * mx
                syy = (g * b * b).sum() - my * my
                sxy = (g * a * b).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                            / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


def loop_conv_stride2_edge(x, w):
    """3x3 stride-2 convolution with edge-replicated borders (HWC, kernel 3x3xCinxCout)."""
    H, W, _ = x.shape
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    out = np.zeros((Ho, Wo, w.shape[-1]))
    for i in range(Ho):
        for j in range(Wo):
            patch = p[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            out[i, j] = np.einsum("abc,abcd->d", patch, w)
    return out


def loop_photometric(pred, target, kernels):
    """Mean L1 plus inverse-neuron-count weighted L1 of the ReLU conv pyramid."""
    loss = np.abs(pred - target).mean()
    a, b = pred, target
    for w in kernels:
        a = np.maximum(loop_conv_stride2_edge(a, w), 0)
        b = np.maximum(loop_conv_stride2_edge(b, w), 0)
        loss += np.abs(a - b).sum() / a.size
    return loss


def composite(alphas, attrs, background):
    """Front-to-back over operator for an already ordered list."""
    out = np.zeros_like(np.asarray(background, dtype=np.float64))
    T = 1.0
    for a, c in zip(alphas, attrs):
        out = out + T * a * np.asarray(c)
        T *= 1 - a
    return out + T * np.asarray(background)


def visibility_mask(scene, src_index):
    """Target pixels whose surface point is seen unoccluded by source ``src_index``.

    A pixel qualifies when all four bilinear taps in the source hit the same
    primitive as the target ray and the source depth agrees with the point's
    source-camera depth within 2%.
    """
    prims = primitives_from_json(scene.primitives)
    cam = scene.source_cams[src_index]
    tgt = ray_cast(prims, scene.target_cam)
    src = ray_cast(prims, cam)
    H, W = scene.target_depth.shape
    vv, uu = np.mgrid[0:H, 0:W]
    ok = scene.target_depth > 0
    pts = unproject(np.stack([uu[ok], vv[ok]], -1), scene.target_depth[ok], scene.target_cam)
    uv, z, front = project(pts, cam)
    u0 = np.floor(uv[:, 0]).astype(int)
    v0 = np.floor(uv[:, 1]).astype(int)
    res = front & (u0 >= 0) & (v0 >= 0) & (u0 + 1 < W) & (v0 + 1 < H)
    ids = tgt.ids[ok]
    for du in (0, 1):
        for dv in (0, 1):
            res &= src.ids[np.clip(v0 + dv, 0, H - 1), np.clip(u0 + du, 0, W - 1)] == ids
    uc = np.clip(np.round(uv[:, 0]).astype(int), 0, W - 1)
    vc = np.clip(np.round(uv[:, 1]).astype(int), 0, H - 1)
    res &= np.abs(src.depth[vc, uc] - z) < 0.02 * z
    vis = np.zeros((H, W), bool)
    vis[ok] = res
    return vis


def masked_psnr(a, b, mask):
    err = ((np.asarray(a) - np.asarray(b))[mask] ** 2).mean()
    return 10 * np.log10(1.0 / err)


def random_camera(rng, size=64):
    from pcvs.geometry import Camera

    eye = rng.uniform(-0.3, 0.3, 3)
    target = np.array([0.0, 0.0, 4.0]) + rng.uniform(-0.3, 0.3, 3)
    f = rng.uniform(40, 80)
    return Camera.look_at(eye, target, f, f, (size - 1) / 2 + rng.uniform(-2, 2),
                          (size - 1) / 2 + rng.uniform(-2, 2), size, size)


def hull_residual(point, vertices):
    """Distance from ``point`` to the convex hull of ``vertices`` (NNLS on barycentric weights)."""
    from scipy.optimize import nnls

    V = np.asarray(vertices, dtype=np.float64)
    big = 1e3
    A = np.vstack([V.T, big * np.ones(len(V))])
    b = np.concatenate([np.asarray(point, dtype=np.float64), [big]])
    w, _ = nnls(A, b)
    return float(np.linalg.norm(V.T @ w - point) + abs(w.sum() - 1.0))


def random_neighborhood(rng, K, C=35):
    """Anchor plus K neighbours with descriptors; positions are Gaussian around the anchor."""
    anchor = rng.normal(size=3)
    nbrs = anchor + rng.normal(0, rng.uniform(0.01, 1.0), (K, 3))
    nbrs[0] = anchor
    desc = rng.uniform(size=(K, C))
    return anchor, nbrs, desc[0], desc
