import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.data import (DECOMPOSITION_TOL, SceneGenConfig, decomposition_error, generate_dataset, generate_scene,
                          load_dataset, read_scene, remove_ground, remove_ground_pair, scene_from_text, scene_seed,
                          scene_to_text, strip_labels, write_scene)
from resflow.errors import EmptyResult, InvalidConfig, ParseError, ValidationError, VersionMismatch
from resflow.flow_model import ego_motion_flow
from resflow.metrics import evaluate_3d

FULL = SceneGenConfig(n=300, m=280, noise=0.01, dropout=0.2, ground=True, seed=3)


def same_scene(a, b):
    for name in ("p1", "p2", "gt_total", "gt_nonrigid"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert np.array_equal(a.gt_relative.matrix(), b.gt_relative.matrix())


def test_determinism_and_seed_sensitivity():
    same_scene(generate_scene(FULL), generate_scene(FULL))
    other = generate_scene(FULL.with_seed(4))
    assert not np.array_equal(other.p1, generate_scene(FULL).p1)
    assert scene_seed(0, 1) != scene_seed(0, 2) and scene_seed(0, 1) == scene_seed(0, 1)


def test_static_scene_is_a_shuffle():
    s = generate_scene(SceneGenConfig(n=200, max_rotation_deg=0, max_translation=0, blob_amplitude=0, seed=1))
    assert np.array_equal(s.gt_total, np.zeros((200, 3)))
    assert np.array_equal(s.gt_nonrigid, np.zeros((200, 3)))
    assert not np.array_equal(s.p1, s.p2)  # independently shuffled
    assert np.array_equal(np.sort(s.p1, axis=0), np.sort(s.p2, axis=0))
    assert sorted(map(tuple, s.p1)) == sorted(map(tuple, s.p2))


def test_pure_camera_motion():
    s = generate_scene(SceneGenConfig(n=200, blob_amplitude=0, seed=2))
    assert np.array_equal(s.gt_nonrigid, np.zeros((200, 3)))
    assert np.array_equal(s.gt_total, ego_motion_flow(s.p1, s.gt_relative).vectors)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.5), st.floats(0, 0.9), st.booleans())
def test_decomposition_identity_holds(seed, amp, dropout, ground):
    cfg = SceneGenConfig(n=150, blob_amplitude=amp, dropout=dropout, ground=ground, noise=0.01, seed=seed)
    s = generate_scene(cfg)
    assert decomposition_error(s) < 1e-12
    assert s.m == max(1, round(150 * (1 - dropout)))
    assert s.gt_relative.is_valid()


def test_p2_contains_warped_points_without_noise():
    s = generate_scene(SceneGenConfig(n=200, dropout=0.25, seed=6))
    warped = s.p1 + s.gt_total
    d = np.sqrt(((s.p2[:, None, :] - warped[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    assert d.max() < 1e-12
    assert s.metadata["kept_in_p2"] == 150


def test_extra_points_in_p2():
    s = generate_scene(SceneGenConfig(n=100, m=130, seed=7))
    assert (s.n, s.m) == (100, 130) and s.metadata["extra_in_p2"] == 30


def test_invalid_configs():
    for bad in (dict(n=0), dict(dropout=1.0), dict(noise=-1), dict(object_size=(2, 1)), dict(extent_z=(0, 1))):
        with pytest.raises(InvalidConfig):
            generate_scene(SceneGenConfig(**bad))


def test_dataset_ids_and_seeds():
    ds = generate_dataset(SceneGenConfig(n=50, seed=9), 3)
    assert [s.scene_id for s in ds] == ["scene_00000", "scene_00001", "scene_00002"]
    same_scene(ds[1], generate_scene(SceneGenConfig(n=50, seed=scene_seed(9, 1))))


# ground removal ----------------------------------------------------------------------
def test_remove_ground_examples():
    P = np.array([[0, 1.0, 5], [0, 0.5, 5], [1, 2.0, 3]])
    kept, idx = remove_ground(P)
    assert np.array_equal(kept, P) and list(idx) == [0, 1, 2]
    s = generate_scene(SceneGenConfig(n=400, ground=True, ground_fraction=0.25, seed=8))
    kept, idx = remove_ground(s.p1, 0.3)
    mask = s.metadata["ground_mask"]
    assert not np.any(np.isin(np.flatnonzero(mask), idx))  # the whole plane at y = 0 goes
    assert np.array_equal(idx, np.flatnonzero(s.p1[:, 1] >= 0.3))
    with pytest.raises(EmptyResult):
        remove_ground(np.zeros((4, 3)))


def test_remove_ground_pair_keeps_ground_truth_aligned():
    s = generate_scene(SceneGenConfig(n=400, ground=True, seed=10))
    r = remove_ground_pair(s)
    idx = r.metadata["kept_indices"]
    assert np.array_equal(r.p1, s.p1[idx]) and np.array_equal(r.gt_total, s.gt_total[idx])
    assert decomposition_error(r) < 1e-12
    pred = s.gt_total + np.random.default_rng(0).normal(scale=0.05, size=s.gt_total.shape)
    assert evaluate_3d(pred[idx], r.gt_total) == evaluate_3d(pred[s.p1[:, 1] >= 0.3], s.gt_total[s.p1[:, 1] >= 0.3])


# scene files -------------------------------------------------------------------------
def test_round_trip_byte_exact(tmp_path):
    s = generate_scene(FULL, "abc")
    path = tmp_path / "abc.rfsp"
    write_scene(path, s)
    back = read_scene(path)
    same_scene(s, back)
    assert back.intrinsics == s.intrinsics and back.time_delta == s.time_delta and back.scene_id == "abc"
    assert scene_to_text(back).encode() == path.read_bytes()
    assert path.read_bytes().startswith(b"RFSP 1\nn 300 m 280 delta 0.10000000000000001\npose ")


def test_label_stripped_round_trip():
    s = strip_labels(generate_scene(FULL))
    assert not s.has_ground_truth
    text = scene_to_text(s)
    assert "pose" not in text
    back = scene_from_text(text)
    assert back.gt_total is None and np.array_equal(back.p1, s.p1) and np.array_equal(back.p2, s.p2)
    assert scene_to_text(back) == text


def test_parse_errors():
    text = scene_to_text(generate_scene(SceneGenConfig(n=20, seed=1)))
    with pytest.raises(ParseError):
        scene_from_text(text[:-1])  # no final newline
    lines = text.split("\n")
    with pytest.raises(ParseError) as exc:
        scene_from_text("\n".join(lines[:-3]) + "\n")  # whole lines missing
    assert exc.value.line is not None
    with pytest.raises(ParseError):
        scene_from_text(text.replace("p2 ", "p3 ", 1))
    with pytest.raises(ParseError):
        scene_from_text("XXXX 1\n")
    with pytest.raises(VersionMismatch):
        scene_from_text(text.replace("RFSP 1", "RFSP 2", 1))
    bad = lines[:]
    bad[5] = bad[5].split(" ", 1)[0] + " 1.0 oops" + " 0" * 7
    with pytest.raises(ParseError):
        scene_from_text("\n".join(bad))


def test_decomposition_violation_rejected():
    s = generate_scene(SceneGenConfig(n=20, seed=1))
    s.gt_total[3, 0] += 1e-6
    with pytest.raises(ValidationError):
        scene_from_text(scene_to_text(s))
    s.gt_total[3, 0] -= 1e-6
    s.gt_total[3, 0] += DECOMPOSITION_TOL / 10
    scene_from_text(scene_to_text(s))


def test_load_dataset_sorted(tmp_path):
    for i in (2, 0, 1):
        write_scene(tmp_path / f"scene_{i:05d}.rfsp", generate_scene(SceneGenConfig(n=10, seed=i)))
    ds = load_dataset(tmp_path)
    assert [s.scene_id for s in ds] == ["scene_00000", "scene_00001", "scene_00002"]
    with pytest.raises(InvalidConfig):
        load_dataset(tmp_path / "nothing")


def test_non_finite_values_rejected():
    s = generate_scene(SceneGenConfig(n=20, seed=1))
    text = scene_to_text(s).split("\n")
    for row in (5, -2):  # a p1 line carrying flows, then a p2 line
        bad = text[:]
        bad[row] = bad[row].rsplit(" ", 1)[0] + " nan"
        with pytest.raises(ValidationError):
            scene_from_text("\n".join(bad))
