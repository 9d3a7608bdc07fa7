import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcvs.io import (
    FormatError,
    load_checkpoint,
    load_scene,
    load_scenes,
    read_config,
    read_pfm,
    read_png,
    save_checkpoint,
    write_pfm,
    write_png,
)
from pcvs.scenes import SceneSpec, generate_scene


@given(seed=st.integers(0, 10_000), colour=st.booleans())
def test_pfm_round_trip_is_exact(tmp_path_factory, seed, colour):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9))) + ((3,) if colour else ())
    a = rng.normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("pfm") / "a.pfm"
    write_pfm(path, a)
    np.testing.assert_array_equal(read_pfm(path), a)


def test_pfm_layout_and_big_endian(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "le.pfm", a)
    raw = (tmp_path / "le.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    # rows are stored bottom to top
    assert struct.unpack("<3f", raw[-24:-12]) == (3.0, 4.0, 5.0)
    body = np.flipud(a).astype(">f4").tobytes()
    (tmp_path / "be.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + body)
    np.testing.assert_array_equal(read_pfm(tmp_path / "be.pfm"), a)


def test_pfm_errors(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(FormatError, match="not a PFM"):
        read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n4 4\n-1.0\n\0\0\0\0")
    with pytest.raises(FormatError, match="truncated"):
        read_pfm(tmp_path / "short.pfm")
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


@given(seed=st.integers(0, 10_000))
def test_png_round_trip_within_one_level(tmp_path_factory, seed):
    img = np.random.default_rng(seed).uniform(-0.1, 1.1, (5, 7, 3))
    path = tmp_path_factory.mktemp("png") / "a.png"
    write_png(path, img)
    back = read_png(path)
    assert back.shape == img.shape
    assert np.abs(back - np.clip(img, 0, 1)).max() <= 0.5 / 255 + 1e-12


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"enc.w": rng.normal(size=(3, 3, 3, 8)), "bias": rng.normal(size=8), "scalar": np.float32(2.5),
               "empty": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "m.pcvs", tensors)
    back = load_checkpoint(tmp_path / "m.pcvs")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], np.asarray(v, dtype=np.float32))
    raw = (tmp_path / "m.pcvs").read_bytes()
    assert raw[:4] == b"PCVS" and struct.unpack("<I", raw[4:8]) == (1,)


def test_checkpoint_errors(tmp_path):
    save_checkpoint(tmp_path / "m.pcvs", {"w": np.ones((4, 4))})
    raw = (tmp_path / "m.pcvs").read_bytes()
    (tmp_path / "cut.pcvs").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "cut.pcvs")
    (tmp_path / "magic.pcvs").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.pcvs")
    (tmp_path / "ver.pcvs").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "ver.pcvs")


def test_config_parsing(tmp_path):
    (tmp_path / "c.txt").write_text("# comment\nlr = 0.001\n\nrefine-iterations=20  # trailing\nname=a=b\n")
    assert read_config(tmp_path / "c.txt") == {"lr": "0.001", "refine_iterations": "20", "name": "a=b"}
    (tmp_path / "bad.txt").write_text("lr 0.1\n")
    with pytest.raises(FormatError, match=":1:"):
        read_config(tmp_path / "bad.txt")


def _scene(tmp_path, seed=11):
    d = tmp_path / f"s{seed}"
    scene = generate_scene(SceneSpec(height=16, width=16, seed=seed), d)
    return scene, d


def test_scene_round_trip(tmp_path):
    scene, d = _scene(tmp_path)
    back = load_scene(d)
    assert back.n_views == scene.n_views and back.image_size == (16, 16)
    for a, b in zip(scene.source_depths, back.source_depths):
        np.testing.assert_array_equal(b, a.astype(np.float32))
    for a, b in zip(scene.source_images, back.source_images):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12
    for a, b in zip(scene.source_cams + [scene.target_cam], back.source_cams + [back.target_cam]):
        np.testing.assert_allclose(a.K, b.K)
        np.testing.assert_allclose(a.world_to_camera, b.world_to_camera)
    meta = json.loads((d / "scene.json").read_text())
    assert [v["role"] for v in meta["views"]] == ["source", "target", "source"]


def test_scene_directories_are_byte_identical(tmp_path):
    _, a = _scene(tmp_path / "a")
    _, b = _scene(tmp_path / "b")
    files = sorted(os.listdir(a))
    assert files == sorted(os.listdir(b))
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_missing_camera_is_reported(tmp_path):
    _, d = _scene(tmp_path)
    meta = json.loads((d / "scene.json").read_text())
    del meta["cameras"]["view_02"]
    (d / "scene.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="camera for view_02 not found"):
        load_scene(d)


@pytest.mark.parametrize("edit,message", [
    (lambda m: m.pop("height"), "height"),
    (lambda m: m["views"][1].update(role="source"), "no target"),
    (lambda m: m["views"][0].pop("depth"), "no depth map"),
    (lambda m: m["views"][0].update(role="odd"), "unknown role"),
    (lambda m: m["cameras"]["view_00"].update(K=[1, 2]), "malformed camera"),
])
def test_malformed_scene_files(tmp_path, edit, message):
    _, d = _scene(tmp_path)
    meta = json.loads((d / "scene.json").read_text())
    edit(meta)
    (d / "scene.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError, match=message):
        load_scene(d)


def test_negative_depth_rejected(tmp_path):
    _, d = _scene(tmp_path)
    depth = read_pfm(d / "depth_00.pfm")
    depth[0, 0] = -1
    write_pfm(d / "depth_00.pfm", depth)
    with pytest.raises(FormatError, match=">= 0"):
        load_scene(d)


def test_load_scenes_sorted(scene_root):
    scenes = load_scenes(scene_root)
    assert [s.name for s in scenes] == ["scene_000", "scene_001"]
