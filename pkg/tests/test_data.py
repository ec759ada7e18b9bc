import json
import shutil

import numpy as np
import pytest

from partnerf.body import posed_vertices
from partnerf.data import (
    DatasetError,
    SequenceSpec,
    default_splits,
    generate_synthetic_sequence,
    load_dataset,
    save_dataset,
)


def silhouette_oracle(body, pose, camera):
    """Pixel centres covered by any projected front-of-camera triangle."""
    v = posed_vertices(body, pose)
    cam = (camera.world_to_camera @ np.c_[v, np.ones(len(v))].T)[:3].T
    h = (camera.K @ cam.T).T
    xy = h[:, :2] / h[:, 2:]
    tri = xy[body.faces]
    W, H = camera.width, camera.height
    ys, xs = np.mgrid[0:H, 0:W]
    p = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], 1)
    covered = np.zeros(len(p), bool)
    for t in tri:
        d = []
        for i in range(3):
            e, q = t[(i + 1) % 3] - t[i], p - t[i]
            d.append(e[0] * q[:, 1] - e[1] * q[:, 0])
        covered |= ((d[0] >= 0) & (d[1] >= 0) & (d[2] >= 0)) | ((d[0] <= 0) & (d[1] <= 0) & (d[2] <= 0))
    return covered.reshape(H, W)


@pytest.fixture(scope="module")
def seq24():
    return generate_synthetic_sequence(SequenceSpec(frames=24, resolution=32, seed=7))


def test_frame_and_split_counts(seq24):
    ds = seq24
    assert len(ds.poses) == 24
    assert len(ds.split("train")) == 16 and len(ds.split("novel-pose")) == 8 and len(ds.split("novel-view")) == 16
    times = [p.time for p in ds.poses]
    assert all(b > a for a, b in zip(times, times[1:]))
    train = set(ds.train_frames())
    assert not train & {im.frame for im in ds.split("novel-pose")}
    assert {im.frame for im in ds.split("novel-view")} <= train
    assert sorted(im.index for im in ds.images) == list(range(len(ds.images)))


def test_masks_match_projected_silhouette(seq24):
    ds = seq24
    for im in ds.images[::7]:
        oracle = silhouette_oracle(ds.body, ds.poses[im.frame], im.camera)
        assert np.array_equal(im.mask, oracle)
        assert np.all(im.image[~im.mask] == 0)


def test_same_seed_bit_identical():
    a = generate_synthetic_sequence(SequenceSpec(frames=4, resolution=16, seed=11))
    b = generate_synthetic_sequence(SequenceSpec(frames=4, resolution=16, seed=11))
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
        assert np.array_equal(x.camera.world_to_camera, y.camera.world_to_camera)
    c = generate_synthetic_sequence(SequenceSpec(frames=4, resolution=16, seed=12))
    assert not np.array_equal(a.images[0].image, c.images[0].image)


def test_static_motion_has_constant_pose():
    ds = generate_synthetic_sequence(SequenceSpec(frames=5, resolution=16, motion="static"))
    for p in ds.poses[1:]:
        assert np.array_equal(p.joint_rotations, ds.poses[0].joint_rotations)
        assert np.array_equal(p.root_translation, ds.poses[0].root_translation)


def test_arm_swing_moves_arms():
    ds = generate_synthetic_sequence(SequenceSpec(frames=5, resolution=16))
    arm = ds.body.joint_names.index("left_arm_0")
    assert np.ptp([p.joint_rotations[arm, 2] for p in ds.poses]) > 0.3


def test_unknown_motion_rejected():
    with pytest.raises(DatasetError):
        generate_synthetic_sequence(SequenceSpec(frames=2, resolution=8, motion="dance"))


def test_save_load_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back.images) == len(small_dataset.images)
    for a, b in zip(small_dataset.images, back.images):
        assert (a.index, a.frame, a.split) == (b.index, b.frame, b.split)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.camera.K, b.camera.K)
        np.testing.assert_array_equal(a.camera.world_to_camera, b.camera.world_to_camera)
    for p, q in zip(small_dataset.poses, back.poses):
        np.testing.assert_array_equal(p.joint_rotations, q.joint_rotations)
        assert p.time == q.time and p.frame_index == q.frame_index
    np.testing.assert_array_equal(small_dataset.body.vertices, back.body.vertices)


def test_dataset_directory_is_deterministic(tmp_path):
    spec = SequenceSpec(frames=3, resolution=16, seed=5)
    for name in ("a", "b"):
        save_dataset(generate_synthetic_sequence(spec), tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _edit_json(path, fn):
    obj = json.loads(path.read_text())
    obj = fn(obj) or obj
    path.write_text(json.dumps(obj))


@pytest.fixture
def saved(small_dataset, tmp_path):
    root = tmp_path / "ds"
    save_dataset(small_dataset, root)
    return root


def test_overlapping_splits_rejected(saved):
    def overlap(meta):
        meta["splits"]["novel-pose"].append(meta["splits"]["train"][0])

    _edit_json(saved / "meta.json", overlap)
    with pytest.raises(DatasetError, match="both"):
        load_dataset(saved)


def test_missing_frame_rejected(saved):
    (saved / "frames" / "000002.png").unlink()
    with pytest.raises(DatasetError, match="missing frame"):
        load_dataset(saved)


def test_camera_count_mismatch_rejected(saved):
    _edit_json(saved / "cameras.json", lambda c: c[:-1])
    with pytest.raises(DatasetError, match="camera"):
        load_dataset(saved)


def test_pose_shape_rejected(saved):
    def drop(poses):
        poses[1]["joint_rotations"] = poses[1]["joint_rotations"][:3]

    _edit_json(saved / "poses.json", drop)
    with pytest.raises(DatasetError, match="pose 1"):
        load_dataset(saved)


def test_non_increasing_time_rejected(saved):
    def freeze(poses):
        poses[2]["time"] = poses[1]["time"]

    _edit_json(saved / "poses.json", freeze)
    with pytest.raises(DatasetError, match="strictly"):
        load_dataset(saved)


def test_missing_directory_and_manifest(tmp_path, saved):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")
    (saved / "meta.json").unlink()
    with pytest.raises(DatasetError, match="meta.json"):
        load_dataset(saved)


def test_default_split_convention():
    s = default_splits(750)
    assert len(s["train"]) == 100 and len(s["novel-pose"]) == 50
    assert s["train"][:3] == [0, 5, 10] and s["train"][-1] < s["novel-pose"][0]


def test_manifest_without_splits_uses_default(tmp_path):
    ds = generate_synthetic_sequence(SequenceSpec(frames=12, resolution=8, novel_views=False))
    root = tmp_path / "ds"
    save_dataset(ds, root)

    def strip(meta):
        del meta["splits"], meta["images"]
        meta["stride"] = 5

    _edit_json(root / "meta.json", strip)
    back = load_dataset(root)
    assert [im.frame for im in back.split("train")] == [0, 5]
    assert [im.frame for im in back.split("novel-pose")] == [10]


def test_missing_masks_load_as_none(saved):
    shutil.rmtree(saved / "masks")
    assert all(im.mask is None for im in load_dataset(saved).images)
