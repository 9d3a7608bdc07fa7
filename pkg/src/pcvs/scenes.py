"""Procedural scenes rendered by exact ray casting.

Primitives are textured rectangles, spheres and (y-rotated) boxes.  Colour
is a smooth function of the world position (a few sinusoids around a base
colour, optionally a soft checker) times a view-independent Lambertian
shading term, so every view of a surface point sees the same colour and
depth is exact up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera
from .io import SceneSample, save_scene


class SceneGenerationError(RuntimeError):
    pass


# -- textures -----------------------------------------------------------------------

def _random_texture(rng, checker=False):
    base = rng.uniform(0.3, 0.7, size=3)
    waves = []
    for _ in range(3):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        wavelength = rng.uniform(0.8, 2.0)
        k = d * (2 * np.pi / wavelength)
        waves.append([*k, rng.uniform(0, 2 * np.pi), *rng.uniform(-0.12, 0.12, size=3)])
    tex = {"base": base.tolist(), "waves": waves}
    if checker:
        tex["checker"] = {"period": float(rng.uniform(0.8, 1.4)), "amplitude": 0.08}
    return tex


def texture_color(tex, points):
    points = np.asarray(points, dtype=np.float64)
    col = np.broadcast_to(np.asarray(tex["base"]), points.shape[:-1] + (3,)).copy()
    for w in tex.get("waves", []):
        w = np.asarray(w)
        phase = points @ w[:3] + w[3]
        col += np.sin(phase)[..., None] * w[4:7]
    chk = tex.get("checker")
    if chk:
        # tanh-softened checker: keeps the texture smooth enough for bilinear sampling
        s = np.sin(np.pi * points / chk["period"])
        col += chk["amplitude"] * np.tanh(3.0 * s[..., 0] * s[..., 1] * s[..., 2])[..., None]
    return np.clip(col, 0.02, 0.98)


# -- primitives ----------------------------------------------------------------------

class Primitive:
    kind = ""

    def __init__(self, texture):
        self.texture = texture

    def intersect(self, origin, dirs):
        """Ray parameter of the first hit (inf on miss) and unit normals."""
        raise NotImplementedError

    def distance(self, points):
        raise NotImplementedError

    def sample_surface(self, n, rng):
        """Roughly uniform surface samples and their outward normals."""
        raise NotImplementedError

    @staticmethod
    def from_dict(d):
        kinds = {"rect": Rect, "sphere": Sphere, "box": Box}
        if d.get("type") not in kinds:
            raise ValueError(f"unknown primitive type {d.get('type')!r}")
        return kinds[d["type"]].from_dict(d)


class Rect(Primitive):
    """Rectangle spanned by orthonormal axes ``e1, e2``; ``half=None`` is an infinite plane."""

    kind = "rect"

    def __init__(self, center, e1, e2, half, texture):
        super().__init__(texture)
        self.center = np.asarray(center, dtype=np.float64)
        self.e1 = np.asarray(e1, dtype=np.float64)
        self.e2 = np.asarray(e2, dtype=np.float64)
        self.normal = np.cross(self.e1, self.e2)
        self.half = None if half is None else np.asarray(half, dtype=np.float64)

    def to_dict(self):
        return {"type": "rect", "center": self.center.tolist(), "e1": self.e1.tolist(),
                "e2": self.e2.tolist(), "half": None if self.half is None else self.half.tolist(),
                "texture": self.texture}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["e1"], d["e2"], d["half"], d["texture"])

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origin) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        hit = origin + t[:, None] * dirs
        if self.half is not None:
            rel = hit - self.center
            inside = (np.abs(rel @ self.e1) <= self.half[0]) & (np.abs(rel @ self.e2) <= self.half[1])
            t = np.where(inside, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        n = np.where((denom < 0)[:, None], self.normal, -self.normal)
        return t, n

    def distance(self, points):
        rel = np.asarray(points) - self.center
        a = rel @ self.e1
        b = rel @ self.e2
        h = rel @ self.normal
        if self.half is not None:
            a = a - np.clip(a, -self.half[0], self.half[0])
            b = b - np.clip(b, -self.half[1], self.half[1])
        else:
            a = b = 0.0
        return np.sqrt(a * a + b * b + h * h)

    def sample_surface(self, n, rng):
        ab = rng.uniform(-1, 1, size=(n, 2)) * self.half
        pts = self.center + ab[:, :1] * self.e1 + ab[:, 1:] * self.e2
        return pts, np.broadcast_to(self.normal, pts.shape)


class Sphere(Primitive):
    kind = "sphere"

    def __init__(self, center, radius, texture):
        super().__init__(texture)
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius,
                "texture": self.texture}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["radius"], d["texture"])

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / (2 * a)
        t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        hit = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        return t, (hit - self.center) / self.radius

    def distance(self, points):
        return np.abs(np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius)

    def sample_surface(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d, d


def _rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class Box(Primitive):
    """Box with half extents ``half``, rotated by ``yaw`` about the world y axis."""

    kind = "box"

    def __init__(self, center, half, yaw, texture):
        super().__init__(texture)
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)
        self.yaw = float(yaw)
        self.rot = _rot_y(self.yaw)  # local -> world

    def to_dict(self):
        return {"type": "box", "center": self.center.tolist(), "half": self.half.tolist(),
                "yaw": self.yaw, "texture": self.texture}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["half"], d["yaw"], d["texture"])

    def _local(self, points):
        return (np.asarray(points) - self.center) @ self.rot

    def intersect(self, origin, dirs):
        o = self._local(origin[None])[0]
        d = dirs @ self.rot
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half - o) * inv
            t2 = (self.half - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        t_near = near.max(axis=1)
        t_far = far.min(axis=1)
        hit_ok = (t_near <= t_far) & (t_far > 1e-9)
        t = np.where(hit_ok, np.where(t_near > 1e-9, t_near, t_far), np.inf)
        axis = np.argmax(near, axis=1)
        n_local = np.zeros_like(d)
        rows = np.arange(len(d))
        n_local[rows, axis] = -np.sign(d[rows, axis])
        return t, n_local @ self.rot.T

    def distance(self, points):
        q = np.abs(self._local(points)) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)

    def sample_surface(self, n, rng):
        h = self.half
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        rows = np.arange(n)
        pts[rows, axis] = sign * h[axis]
        normals = np.zeros((n, 3))
        normals[rows, axis] = sign
        return self.center + pts @ self.rot.T, normals @ self.rot.T


def primitives_from_json(items):
    return [Primitive.from_dict(d) for d in items]


def surface_distance(points, primitives):
    """Unsigned distance from each point to the nearest primitive surface."""
    prims = [p if isinstance(p, Primitive) else Primitive.from_dict(p) for p in primitives]
    points = np.asarray(points, dtype=np.float64)
    return np.min(np.stack([p.distance(points) for p in prims]), axis=0)


# -- ray casting ---------------------------------------------------------------------

@dataclass
class RayCast:
    image: np.ndarray
    depth: np.ndarray
    ids: np.ndarray


def ray_cast(primitives, cam, light=(0.3, -0.5, -1.0), ambient=0.55, background=0.0):
    """Exact first-hit colour, camera-z depth (0 on miss) and primitive id (-1 on miss).

    Rays are ``R^T K^-1 (u, v, 1)`` from the camera centre, so the ray
    parameter of a hit is the camera-z depth directly.
    """
    H, W = cam.height, cam.width
    dirs = cam.rays() @ cam.R
    origin = cam.center
    best_t = np.full(H * W, np.inf)
    best_n = np.zeros((H * W, 3))
    ids = np.full(H * W, -1)
    for i, prim in enumerate(primitives):
        t, n = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        ids[closer] = i
    hit = np.isfinite(best_t)
    image = np.full((H * W, 3), float(background))
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for i, prim in enumerate(primitives):
        sel = ids == i
        if not sel.any():
            continue
        pts = origin + best_t[sel, None] * dirs[sel]
        shade = ambient + (1 - ambient) * np.clip(-(best_n[sel] @ light), 0.0, 1.0)
        image[sel] = texture_color(prim.texture, pts) * shade[:, None]
    depth = np.where(hit, best_t, 0.0)
    return RayCast(image.reshape(H, W, 3), depth.reshape(H, W), ids.reshape(H, W))


# -- scene layout -------------------------------------------------------------------

@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_sources: int = 2
    focal_factor: float = 0.9
    baseline: tuple = (0.25, 0.5)
    look_jitter: float = 0.05
    wall_depth: tuple = (4.5, 5.5)
    wall_tilt: float = 0.2
    object_depth: tuple = (2.2, 3.6)
    n_objects: tuple = (2, 3)
    depth_range: tuple = (1.0, 6.0)
    checker: bool = False
    min_coverage: float = 0.8
    max_tries: int = 1000
    seed: int = 0
    # explicit layouts bypass the random generator
    primitives: list | None = None
    cameras: list | None = None
    name: str = ""
    extra: dict = field(default_factory=dict)


def _intrinsics(spec):
    f = spec.focal_factor * spec.width
    return f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0


def _cameras(spec, rng):
    fx, fy, cx, cy = _intrinsics(spec)
    size = dict(width=spec.width, height=spec.height)
    look = np.array([0.0, 0.0, 4.0]) + rng.uniform(-1, 1, 3) * spec.look_jitter * 4.0
    eye_t = rng.uniform(-1, 1, 3) * 0.05
    target = Camera.look_at(eye_t, look, fx, fy, cx, cy, **size)
    right, down = target.R[0], target.R[1]
    n = spec.n_sources
    # left, right, then above / below for the larger rigs
    angles = [np.pi, 0.0, -np.pi / 2, np.pi / 2][:n] if n <= 4 else list(np.linspace(np.pi, 3 * np.pi, n, endpoint=False))
    sources = []
    for a in angles:
        b = rng.uniform(*spec.baseline)
        eye = eye_t + b * (np.cos(a) * right + np.sin(a) * down)
        aim = look + rng.uniform(-1, 1, 3) * spec.look_jitter * 4.0
        sources.append(Camera.look_at(eye, aim, fx, fy, cx, cy, **size))
    return target, sources


def _random_layout(spec, target, rng):
    fx, fy, cx, cy = _intrinsics(spec)
    fwd, right, down = target.R[2], target.R[0], target.R[1]
    centre = target.center
    zw = rng.uniform(*spec.wall_depth)
    hw = 0.9 * zw * (spec.width / 2) / fx
    hh = 0.85 * zw * (spec.height / 2) / fy
    hw *= 0.95
    # a slight random tilt keeps the wall from being exactly fronto-parallel,
    # where every wall point would share one camera depth
    yaw, pitch = rng.uniform(-1, 1, 2) * spec.wall_tilt
    e_down = np.cos(pitch) * down + np.sin(pitch) * fwd
    e_right = np.cos(yaw) * right + np.sin(yaw) * fwd
    e_right -= (e_right @ e_down) * e_down
    e_right /= np.linalg.norm(e_right)
    prims = [Rect(centre + zw * fwd, e_down, e_right, [hh, hw], _random_texture(rng, spec.checker))]
    for _ in range(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1)):
        z = rng.uniform(*spec.object_depth)
        x = rng.uniform(-0.45, 0.45) * z * spec.width / (2 * fx)
        y = rng.uniform(-0.45, 0.45) * z * spec.height / (2 * fy)
        c = centre + z * fwd + x * right + y * down
        tex = _random_texture(rng, spec.checker)
        if rng.random() < 0.5:
            prims.append(Sphere(c, rng.uniform(0.3, 0.6), tex))
        else:
            prims.append(Box(c, rng.uniform(0.2, 0.45, size=3), rng.uniform(-0.7, 0.7), tex))
    return prims


def coverage(prim, cams, facing_cam, rng, n=400):
    """Worst-case fraction, over ``cams``, of the surface facing ``facing_cam`` that projects in frame."""
    pts, normals = prim.sample_surface(n, rng)
    facing = np.einsum("ij,ij->i", normals, facing_cam.center - pts) > 0
    pts = pts[facing]
    if len(pts) == 0:
        return 0.0
    worst = 1.0
    for cam in cams:
        x = pts @ cam.R.T + cam.t
        z = x[:, 2]
        zs = np.where(z > 1e-9, z, 1.0)
        u = cam.fx * x[:, 0] / zs + cam.cx
        v = cam.fy * x[:, 1] / zs + cam.cy
        inside = (z > 1e-9) & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
        worst = min(worst, float(inside.mean()))
    return worst


def generate_scene(spec, directory=None):
    """Lay out, validate and ray-cast one scene; optionally write it to ``directory``.

    Layouts are rejection sampled until every primitive keeps at least
    ``spec.min_coverage`` of its target-facing surface inside every camera.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_tries):
        if spec.cameras is not None:
            target, sources = spec.cameras[0], list(spec.cameras[1:])
        else:
            target, sources = _cameras(spec, rng)
        if spec.primitives is not None:
            prims = [p if isinstance(p, Primitive) else Primitive.from_dict(p) for p in spec.primitives]
            break
        prims = _random_layout(spec, target, rng)
        cams = [target, *sources]
        if all(coverage(p, cams, target, rng) >= spec.min_coverage for p in prims):
            break
    else:
        raise SceneGenerationError(f"no valid layout after {spec.max_tries} tries (seed {spec.seed})")
    renders = [ray_cast(prims, cam) for cam in sources]
    tgt = ray_cast(prims, target)
    scene = SceneSample(
        name=spec.name or f"scene_{spec.seed:05d}",
        source_images=[r.image for r in renders],
        source_depths=[r.depth for r in renders],
        source_cams=sources,
        target_image=tgt.image,
        target_cam=target,
        target_depth=tgt.depth,
        depth_range=tuple(float(x) for x in spec.depth_range),
        primitives=[p.to_dict() for p in prims],
    )
    if directory is not None:
        save_scene(scene, directory, seed=spec.seed)
    return scene


def generate_benchmark(root, count, seed=0, **spec_kwargs):
    """``count`` scenes in ``root/scene_XXX`` with seeds ``seed, seed+1, ...``."""
    scenes = []
    for i in range(count):
        spec = SceneSpec(seed=seed + i, name=f"scene_{i:03d}", **spec_kwargs)
        scenes.append(generate_scene(spec, None if root is None else f"{root}/scene_{i:03d}"))
    return scenes


def add_depth_noise(depth, sigma, rng):
    """Gaussian noise of std ``sigma`` on valid (> 0) depths; results stay positive."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    noisy = depth + rng.normal(0.0, sigma, size=depth.shape)
    return np.where(valid, np.maximum(noisy, 1e-3), 0.0)
