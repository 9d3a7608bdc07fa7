"""File formats: PFM, PNG, the PCVS checkpoint, scene directories, config files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Camera

CHECKPOINT_MAGIC = b"PCVS"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


# -- PFM ------------------------------------------------------------------------

def write_pfm(path, array):
    """Grayscale (H, W) or colour (H, W, 3) float32 PFM, little-endian (scale -1)."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        tag = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"cannot write array of shape {array.shape} as PFM")
    H, W = array.shape[:2]
    body = np.flipud(array).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n" + body)


def read_pfm(path):
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file (header {tag!r})")
        try:
            W, H = (int(x) for x in f.readline().split())
            scale = float(f.readline().strip())
        except ValueError:
            raise FormatError(f"{path}: malformed PFM header") from None
        channels = 1 if tag == b"Pf" else 3
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    count = W * H * channels
    if len(raw) < 4 * count:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw[:4 * count], dtype=dtype).astype(np.float32)
    shape = (H, W) if channels == 1 else (H, W, 3)
    return np.flipud(data.reshape(shape)).copy()


# -- PNG ------------------------------------------------------------------------

def write_png(path, image):
    """(H, W, 3) floats in [0, 1] -> 8-bit RGB PNG."""
    image = np.asarray(image, dtype=np.float64)
    q = np.clip(np.round(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# -- checkpoint ---------------------------------------------------------------------

def save_checkpoint(path, tensors):
    """Binary: magic, u32 version, then per record name, rank, dims, f32 payload."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in tensors.items():
        value = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<I", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(value.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise FormatError(f"{path}: truncated record {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint") from None
    return tensors


# -- config -----------------------------------------------------------------------

def read_config(path):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


# -- scenes ---------------------------------------------------------------------------

@dataclass
class SceneSample:
    """Source views plus the target view; target depth is for oracles only."""

    name: str
    source_images: list
    source_depths: list
    source_cams: list
    target_image: np.ndarray
    target_cam: Camera
    target_depth: np.ndarray | None = None
    depth_range: tuple = (0.1, 10.0)
    primitives: list = field(default_factory=list)

    @property
    def n_views(self):
        return len(self.source_images)

    @property
    def image_size(self):
        return self.target_image.shape[:2]


def _camera_entry(cam):
    return {"K": cam.K.reshape(-1).tolist(), "world_to_camera": cam.world_to_camera.reshape(-1).tolist()}


def save_scene(scene, directory, seed=None):
    """Write ``scene.json``, ``view_XX.png`` and ``depth_XX.pfm`` files.

    Views are numbered with the target in the middle of the sources, as in
    a left / centre / right triplet.
    """
    os.makedirs(directory, exist_ok=True)
    H, W = scene.image_size
    n = scene.n_views
    order = list(range(n))
    target_slot = n // 2
    names, views, cameras = [], [], {}
    items = [("source", i) for i in order[:target_slot]] + [("target", None)] + \
            [("source", i) for i in order[target_slot:]]
    for slot, (role, i) in enumerate(items):
        name = f"view_{slot:02d}"
        img = scene.target_image if role == "target" else scene.source_images[i]
        depth = scene.target_depth if role == "target" else scene.source_depths[i]
        cam = scene.target_cam if role == "target" else scene.source_cams[i]
        write_png(os.path.join(directory, f"{name}.png"), img)
        entry = {"name": name, "role": role, "image": f"{name}.png"}
        if depth is not None:
            write_pfm(os.path.join(directory, f"depth_{slot:02d}.pfm"), depth)
            entry["depth"] = f"depth_{slot:02d}.pfm"
        views.append(entry)
        cameras[name] = _camera_entry(cam)
        names.append(name)
    meta = {
        "format": "pcvs-scene",
        "version": 1,
        "name": scene.name,
        "height": int(H),
        "width": int(W),
        "depth_range": [float(scene.depth_range[0]), float(scene.depth_range[1])],
        "seed": seed,
        "views": views,
        "cameras": cameras,
        "primitives": scene.primitives,
    }
    with open(os.path.join(directory, "scene.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def _require(mapping, key, where):
    if key not in mapping:
        raise FormatError(f"{where}: missing field {key!r}")
    return mapping[key]


def load_scene(directory):
    path = os.path.join(directory, "scene.json")
    try:
        with open(path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{path}: not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    H = int(_require(meta, "height", path))
    W = int(_require(meta, "width", path))
    cameras = _require(meta, "cameras", path)
    srcs, depths, cams = [], [], []
    target = None
    for view in _require(meta, "views", path):
        name = _require(view, "name", path)
        if name not in cameras:
            raise FormatError(f"camera for {name} not found")
        entry = cameras[name]
        try:
            K = np.asarray(entry["K"], dtype=np.float64).reshape(3, 3)
            T = np.asarray(entry["world_to_camera"], dtype=np.float64).reshape(4, 4)
        except (KeyError, ValueError):
            raise FormatError(f"{path}: malformed camera for {name}") from None
        try:
            cam = Camera.from_matrices(K, T, W, H)
        except ValueError as exc:
            raise FormatError(f"{path}: camera for {name}: {exc}") from None
        img_file = os.path.join(directory, _require(view, "image", f"{path}:{name}"))
        if not os.path.exists(img_file):
            raise FormatError(f"{img_file}: image for {name} not found")
        img = read_png(img_file)
        if img.shape != (H, W, 3):
            raise FormatError(f"{img_file}: expected {H}x{W} RGB, got {img.shape}")
        depth = None
        if "depth" in view:
            depth_file = os.path.join(directory, view["depth"])
            if not os.path.exists(depth_file):
                raise FormatError(f"{depth_file}: depth for {name} not found")
            depth = read_pfm(depth_file)
            if depth.shape != (H, W):
                raise FormatError(f"{depth_file}: expected {H}x{W}, got {depth.shape}")
            if np.any(depth < 0) or not np.all(np.isfinite(depth)):
                raise FormatError(f"{depth_file}: depth must be finite and >= 0 (0 marks invalid)")
        role = view.get("role", "source")
        if role == "target":
            if target is not None:
                raise FormatError(f"{path}: more than one target view")
            target = (img, cam, depth)
        elif role == "source":
            if depth is None:
                raise FormatError(f"{path}: source {name} has no depth map")
            srcs.append(img)
            depths.append(depth)
            cams.append(cam)
        else:
            raise FormatError(f"{path}: unknown role {role!r} for {name}")
    if target is None:
        raise FormatError(f"{path}: no target view")
    if not srcs:
        raise FormatError(f"{path}: no source views")
    return SceneSample(
        name=meta.get("name", os.path.basename(os.path.normpath(directory))),
        source_images=srcs,
        source_depths=depths,
        source_cams=cams,
        target_image=target[0],
        target_cam=target[1],
        target_depth=target[2],
        depth_range=tuple(meta.get("depth_range", (0.1, 10.0))),
        primitives=meta.get("primitives", []),
    )


def list_scenes(root):
    """Scene directories under ``root`` (or ``root`` itself), sorted by name."""
    if os.path.exists(os.path.join(root, "scene.json")):
        return [root]
    dirs = sorted(d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "scene.json")))
    return [os.path.join(root, d) for d in dirs]


def load_scenes(root):
    return [load_scene(d) for d in list_scenes(root)]
