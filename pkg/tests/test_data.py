import hashlib
import json

import numpy as np
import pytest

from mfos import data as D
from mfos import proxy as P
from mfos.errors import BadIntrinsics, EmptyBBox, InsufficientViews, MissingFile, ParseError
from mfos.geom import Intrinsics, look_at, project
from oracles import march_render


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    path = D.synth_generate(3, 16, 32, np.random.default_rng(5), root)
    return path, D.load_manifest(path)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- manifest ---------------------------------------------------------------

def test_minimal_manifest(tmp_path):
    D.write_image(tmp_path / "a.png", np.zeros((8, 10, 3)))
    doc = {"objects": [{"id": "x", "proxy": {"dims": [0.1, 0.2, 0.3]},
                        "views": [{"image": "a.png", "R": np.eye(3).ravel().tolist(),
                                   "t": [0, 0, 1], "fx": 10, "fy": 10, "cx": 5, "cy": 4,
                                   "width": 10, "height": 8}]}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    (obj,) = D.load_manifest(tmp_path / "m.json")
    assert obj.id == "x" and len(obj.views) == 1
    assert np.allclose(obj.proxy.frame.half_extents, [0.05, 0.1, 0.15])

    doc["objects"][0]["views"][0]["width"] = 12
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(BadIntrinsics):
        D.load_manifest(tmp_path / "m.json")

    doc["objects"][0]["views"][0]["image"] = "gone.png"
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(MissingFile, match="gone.png"):
        D.load_manifest(tmp_path / "m.json")


def test_malformed_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ParseError):
        D.load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text(json.dumps({"objects": [{"id": "x"}]}))
    with pytest.raises(ParseError):
        D.load_manifest(tmp_path / "m.json")
    with pytest.raises(MissingFile):
        D.load_manifest(tmp_path / "nope.json")


def test_manifest_roundtrip(synth, tmp_path):
    path, objs = synth
    again = D.load_manifest(D.write_manifest(objs, path.parent / "copy.json"))
    assert json.loads((path.parent / "copy.json").read_text()) == json.loads(path.read_text())
    for a, b in zip(objs, again):
        assert a.id == b.id and a.diameter == b.diameter
        assert np.array_equal(a.model_pts, b.model_pts)
        for va, vb in zip(a.views, b.views):
            assert va.image == vb.image and va.bbox2d == vb.bbox2d
            assert np.array_equal(va.pose.matrix(), vb.pose.matrix())
            assert va.intrinsics == vb.intrinsics


def test_find_object(synth):
    _, objs = synth
    assert D.find_object(objs, "obj_001").id == "obj_001"
    with pytest.raises(ParseError):
        D.find_object(objs, "missing")


# -- arrays -----------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8])
def test_array_container_roundtrip(tmp_path, dtype):
    a = (np.random.default_rng(0).random((3, 4, 5)) * 200).astype(dtype)
    D.write_array(tmp_path / "a.bin", a)
    b = D.read_array(tmp_path / "a.bin")
    assert b.dtype == a.dtype and np.array_equal(a, b)
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == b"MFOSARR\0"
    assert raw[20:32] == np.array([3, 4, 5], "<u4").tobytes()


def test_array_container_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello world, not an array")
    with pytest.raises(ParseError):
        D.read_array(tmp_path / "x.bin")
    D.write_array(tmp_path / "y.bin", np.zeros(10, np.float32))
    (tmp_path / "y.bin").write_bytes((tmp_path / "y.bin").read_bytes()[:-4])
    with pytest.raises(ParseError):
        D.read_array(tmp_path / "y.bin")


# -- crops ------------------------------------------------------------------

K = Intrinsics(300, 300, 160.3, 119.7, 320, 240)


def dot_image(uv, h=240, w=320):
    img = np.zeros((h, w, 3), np.float32)
    v, u = np.mgrid[0:h, 0:w]
    img[..., 0] = np.exp(-((u - uv[0]) ** 2 + (v - uv[1]) ** 2) / (2 * 3.0 ** 2))
    return img


def peak(img):
    """Sub-pixel intensity centroid around the maximum."""
    ch = img[..., 0].astype(np.float64)
    w = np.where(ch > 0.5 * ch.max(), ch, 0)
    v, u = np.mgrid[0:ch.shape[0], 0:ch.shape[1]]
    return np.array([(w * u).sum(), (w * v).sum()]) / w.sum()


def test_crop_center_projection():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0, y0 = rng.uniform(20, 150), rng.uniform(20, 100)
        bbox = (x0, y0, x0 + rng.uniform(20, 120), y0 + rng.uniform(20, 120))
        centre = np.array([(bbox[0] + bbox[2]) / 2 - 0.5, (bbox[1] + bbox[3]) / 2 - 0.5])
        depth = rng.uniform(0.5, 2)
        x = np.array([(centre[0] - K.cx) / K.fx, (centre[1] - K.cy) / K.fy, 1.0]) * depth
        crop = D.crop_resize(np.zeros((240, 320, 3)), bbox, 64, K)
        assert np.allclose(project(crop.intrinsics, crop.rotation @ x), 31.5, atol=0.5)


def test_crop_dot_tracks_projection():
    rng = np.random.default_rng(1)
    for rot in (0.0, 25.0):
        for _ in range(10):
            uv = np.array([rng.uniform(40, 280), rng.uniform(40, 200)])
            x = np.array([(uv[0] - K.cx) / K.fx, (uv[1] - K.cy) / K.fy, 1.0])
            half = rng.uniform(10, 35)
            bbox = (uv[0] - half, uv[1] - half, uv[0] + half, uv[1] + half)
            aug = D.CropAugment(0.05, 0.1, rot)
            crop = D.crop_resize(dot_image(uv), bbox, 96, K, aug, rng)
            want = project(crop.intrinsics, crop.rotation @ x)
            assert np.linalg.norm(peak(crop.image) - want) < 0.5


def test_identity_crop():
    img = np.random.default_rng(2).random((48, 48, 3)).astype(np.float32)
    k = Intrinsics(50, 50, 23.5, 23.5, 48, 48)
    crop = D.crop_resize(img, D.full_bbox(k), 48, k)
    assert np.array_equal(crop.image, img) and crop.intrinsics == k
    assert np.array_equal(crop.rotation, np.eye(3))


def test_zero_range_augment_is_no_augment():
    img = np.random.default_rng(3).random((240, 320, 3)).astype(np.float32)
    a = D.crop_resize(img, (50, 40, 150, 120), 32, K)
    b = D.crop_resize(img, (50, 40, 150, 120), 32, K, D.CropAugment(), np.random.default_rng(0))
    assert np.array_equal(a.image, b.image) and a.intrinsics == b.intrinsics


def test_crop_errors():
    with pytest.raises(EmptyBBox):
        D.crop_resize(np.zeros((10, 10, 3)), (5, 5, 5, 8), 8, Intrinsics(10, 10, 5, 5, 10, 10))
    with pytest.raises(ValueError):
        D.CropAugment(scale=1.5)


# -- batches ----------------------------------------------------------------

def test_split_views():
    train, test = D.split_views(16)
    assert test == [7, 15] and len(train) == 14
    assert D.split_views(5, 0) == ([0, 1, 2, 3, 4], [])


def test_make_batch_shapes_and_disjoint(synth):
    _, objs = synth
    spec = D.BatchSpec(2, 3, 5)
    b = D.make_batch(objs, spec, np.random.default_rng(0), 32)
    assert b.q_img.shape == (2, 3, 32, 32, 3) and b.q_coords.shape == (2, 3, 32, 32, 3)
    assert b.q_mask.shape == (2, 3, 32, 32)
    assert b.r_img.shape == b.r_map.shape == (2, 5, 32, 32, 3)
    for (oq, q), (orf, r) in zip(b.q_idx, b.r_idx):
        assert oq == orf and not set(q) & set(r)
        assert len(set(q)) == 3 and len(set(r)) == 5
    with pytest.raises(InsufficientViews):
        D.make_batch(objs, D.BatchSpec(2, 10, 10), np.random.default_rng(0), 32)
    with pytest.raises(InsufficientViews):
        D.make_batch(objs, D.BatchSpec(4, 1, 1), np.random.default_rng(0), 32)


def test_renderer_consistency(synth):
    _, objs = synth
    b = D.make_batch(objs, D.TOY_BATCH, np.random.default_rng(1), 32)
    images = D.ImageCache()
    for bi, (oid, refs) in enumerate(b.r_idx):
        obj = D.find_object(objs, oid)
        for j, vi in enumerate(refs):
            img, pm, *_ = D.prepare_view(obj, obj.views[vi], obj.proxy, 32, images, None, None)
            assert np.array_equal(pm.coords.astype(np.float32), b.r_map[bi, j])
            assert np.array_equal(img, b.r_img[bi, j])


def test_shared_frame_perturbation(synth):
    _, objs = synth
    b = D.make_batch(objs, D.TOY_BATCH, np.random.default_rng(2), 32, D.PAPER_AUGMENT)
    for frames in b.frames:
        assert len(frames) == 6
        for f in frames[1:]:
            assert np.array_equal(f.r, frames[0].r) and np.array_equal(f.center, frames[0].center)
            assert np.array_equal(f.half_extents, frames[0].half_extents)
    assert not np.array_equal(b.frames[0][0].r, b.frames[1][0].r)


def test_batch_determinism(synth):
    _, objs = synth
    a = D.make_batch(objs, D.TOY_BATCH, np.random.default_rng(9), 32, D.PAPER_AUGMENT)
    b = D.make_batch(objs, D.TOY_BATCH, np.random.default_rng(9), 32, D.PAPER_AUGMENT)
    assert np.array_equal(a.q_img, b.q_img) and np.array_equal(a.r_map, b.r_map)


# -- synthetic generator ----------------------------------------------------

def test_synth_bitwise_deterministic(tmp_path):
    D.synth_generate(2, 4, 16, np.random.default_rng(3), tmp_path / "a")
    D.synth_generate(2, 4, 16, np.random.default_rng(3), tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_synth_centers_inside(synth):
    _, objs = synth
    for o in objs:
        for v in o.views:
            uv = project(v.intrinsics, v.pose.apply(o.proxy.frame.center))
            assert 0 <= uv[0] < v.intrinsics.width and 0 <= uv[1] < v.intrinsics.height
            x0, y0, x1, y1 = v.bbox2d
            assert x1 > x0 and y1 > y0


def test_synth_face_colors_match_oracle(synth):
    _, objs = synth
    agree = total = 0
    for o in objs[:2]:
        for v in o.views[:4]:
            img = D.read_image(v.image)
            coords, mask = march_render(o.proxy, v.pose, v.intrinsics, (32, 32))
            face = P.cuboid_face_ids(coords, mask)
            bg = ~mask
            agree += int(np.sum(np.all(np.abs(img[bg] - D.BACKGROUND) < 1 / 255, axis=-1)))
            total += int(bg.sum())
            modal = {}
            for f in np.unique(face[mask]):
                cols, counts = np.unique(img[face == f], axis=0, return_counts=True)
                modal[int(f)] = cols[counts.argmax()]
                agree += int(np.sum(np.all(np.abs(img[face == f] - modal[int(f)]) < 1.5 / 255,
                                           axis=-1)))
                total += int(np.sum(face == f))
            vals = list(modal.values())
            assert all(not np.allclose(a, b, atol=2 / 255) for i, a in enumerate(vals)
                       for b in vals[i + 1:])
    assert agree / total >= 0.999


def test_synth_bad_output_dir(tmp_path):
    (tmp_path / "file").write_text("x")
    from mfos.errors import IoError
    with pytest.raises(IoError):
        D.synth_generate(1, 2, 16, np.random.default_rng(0), tmp_path / "file")


# -- BOP conversion ---------------------------------------------------------

def test_bop_converter(tmp_path):
    scene = tmp_path / "000001"
    (scene / "rgb").mkdir(parents=True)
    pose = look_at([0, -400, 300], [0, 0, 0])
    gt, cam, info = {}, {}, {}
    for i in range(3):
        D.write_image(scene / "rgb" / f"{i:06d}.png", np.zeros((48, 64, 3)))
        gt[str(i)] = [{"obj_id": 5, "cam_R_m2c": pose.r.ravel().tolist(),
                       "cam_t_m2c": pose.t.tolist()}]
        cam[str(i)] = {"cam_K": [100, 0, 32, 0, 100, 24, 0, 0, 1]}
        info[str(i)] = [{"bbox_obj": [10, 5, 20, 30]}]
    (scene / "scene_gt.json").write_text(json.dumps(gt))
    (scene / "scene_camera.json").write_text(json.dumps(cam))
    (scene / "scene_gt_info.json").write_text(json.dumps(info))
    (tmp_path / "models_info.json").write_text(json.dumps({"5": {
        "diameter": 120.0, "min_x": -30, "min_y": -20, "min_z": -10,
        "size_x": 60, "size_y": 40, "size_z": 20}}))
    path = D.bop_to_manifest(scene, tmp_path / "models_info.json", tmp_path / "m.json")
    (obj,) = D.load_manifest(path)
    assert obj.id == "obj_000005" and len(obj.views) == 3
    assert obj.diameter == pytest.approx(0.12)
    assert np.allclose(obj.proxy.frame.half_extents, [0.03, 0.02, 0.01])
    v = obj.views[0]
    assert np.allclose(v.pose.t, pose.t / 1000) and v.bbox2d == (10, 5, 30, 35)
    assert (v.intrinsics.width, v.intrinsics.height) == (64, 48)
