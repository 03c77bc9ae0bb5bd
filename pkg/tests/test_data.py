import json

import numpy as np
import pytest
import torch

from motionprim.body import KinematicBody
from motionprim.errors import InsufficientDiversity, ParseError, SchemaVersionMismatch, SourceTooShort
from motionprim.fileio import (
    PointCloudSequence, load_motion, load_point_clouds, motion_to_dict, save_motion, save_point_clouds,
)
from motionprim.motion import FrameSequence, denormalize, normalize
from motionprim.rotation import rot6d_to_matrix
from motionprim.synthetic import BLEND_WINDOW, KINDS, MotionSpec, _Program, generate, make_specs, make_splits, random_shapes
from motionprim.training import sample_subsequence


def seq_of(kind="walk_line", duration=4.0, fps=30, seed=0, shape=(0.0,) * 8, **kw):
    return generate(MotionSpec(kind, duration, fps, shape, seed, **kw))


def test_normalize_cases():
    n = 3
    seq = FrameSequence(
        [10.0, 12.5, 15.0], np.tile([1.0, 0, 0, 0, 1, 0], (n, 1, 1)),
        [[-2.0, 0.0, 0.7], [0.0, 1.0, 0.7], [2.0, 3.0, 0.7]], np.zeros(8),
    )
    norm, info = normalize(seq)
    np.testing.assert_allclose(norm.timestamps, [0, 0.5, 1])
    np.testing.assert_allclose(norm.gamma[:, 0], [-1, 0, 1])
    np.testing.assert_allclose(norm.gamma[:, 1], [-1, -1 / 3, 1])
    np.testing.assert_array_equal(norm.gamma[:, 2], 0)
    assert info.constant_axes == (False, False, True)
    back = denormalize(norm, info)
    np.testing.assert_allclose(back.gamma, seq.gamma, atol=1e-9)
    np.testing.assert_allclose(back.timestamps, seq.timestamps, atol=1e-9)


def test_normalize_roundtrip_generated():
    seq = seq_of("run_arc", seed=3)
    norm, info = normalize(seq)
    assert norm.gamma.min() >= -1 - 1e-12 and norm.gamma.max() <= 1 + 1e-12
    back = denormalize(norm, info)
    assert np.abs(back.gamma - seq.gamma).max() < 1e-9
    assert np.abs(back.timestamps - seq.timestamps).max() < 1e-9


def test_frame_sequence_validation():
    with pytest.raises(ValueError):
        FrameSequence([0.0], np.zeros((1, 2, 6)), np.zeros((1, 3)), np.zeros(8))
    with pytest.raises(ValueError):
        FrameSequence([0.0, 0.0], np.zeros((2, 2, 6)), np.zeros((2, 3)), np.zeros(8))


def test_resample_hits_source_frames_and_interpolates():
    seq = seq_of("wave_arm", 2.0)
    same = seq.resample(seq.timestamps[3:6])
    np.testing.assert_allclose(same.gamma, seq.gamma[3:6], atol=1e-12)
    np.testing.assert_allclose(same.theta, seq.theta[3:6], atol=1e-9)
    mid = seq.resample((seq.timestamps[4:6] + seq.timestamps[5:7]) / 2)
    np.testing.assert_allclose(mid.gamma, (seq.gamma[4:6] + seq.gamma[5:7]) / 2, atol=1e-12)
    with pytest.raises(ValueError):
        seq.resample([seq.timestamps[-1] + 1.0])


def test_sample_subsequence():
    source = seq_of("walk_circle", 6.0)
    rng = np.random.default_rng(0)
    durations = []
    for _ in range(200):
        sub = sample_subsequence(source, rng)
        assert sub.n_frames == 100
        assert np.all(np.diff(sub.timestamps) > 0)
        durations.append(sub.duration)
    assert 3.0 <= min(durations) < 3.1 and 4.9 < max(durations) <= 5.0
    a = sample_subsequence(source, np.random.default_rng(5))
    b = sample_subsequence(source, np.random.default_rng(5))
    np.testing.assert_array_equal(a.theta, b.theta)
    with pytest.raises(SourceTooShort):
        sample_subsequence(seq_of("idle", 2.0), rng)


def test_sample_subsequence_duration_audit():
    # many cheap draws of the window length alone
    source = seq_of("idle", 6.0, fps=5)
    rng = np.random.default_rng(1)
    d = [sample_subsequence(source, rng, n_frames=2).duration for _ in range(10000)]
    assert min(d) >= 3.0 and max(d) <= 5.0
    assert np.histogram(d, bins=4, range=(3, 5))[0].min() > 2000


@pytest.mark.parametrize("kind", KINDS)
def test_generated_sequences_are_valid_and_deterministic(kind):
    a = seq_of(kind, 2.0, seed=11)
    b = seq_of(kind, 2.0, seed=11)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.gamma, b.gamma)
    R = rot6d_to_matrix(torch.tensor(a.theta))
    eye = torch.eye(3, dtype=torch.float64)
    assert (R.transpose(-1, -2) @ R - eye).abs().max() < 1e-9
    assert torch.allclose(torch.linalg.det(R), torch.ones((), dtype=torch.float64), atol=1e-9)
    assert a.n_frames == 61


def test_idle_is_constant():
    seq = seq_of("idle", 3.0, seed=4)
    np.testing.assert_array_equal(seq.theta, np.broadcast_to(seq.theta[0], seq.theta.shape))
    np.testing.assert_array_equal(seq.gamma, np.broadcast_to(seq.gamma[0], seq.gamma.shape))


def test_walk_line_speed_matches_stride():
    spec = MotionSpec("walk_line", 5.0, 30, (0.0,) * 8, 2)
    seq = generate(spec)
    # replay the seeded draws to recover the programmed speed and heading
    rng = np.random.default_rng(spec.seed)
    heading = rng.uniform(0, 2 * np.pi)
    rng.uniform(-1, 1)
    rng.uniform(-1, 1)
    prog = _Program("walk_line", rng, None)
    forward = np.array([np.sin(heading), 0.0, np.cos(heading)])
    moved = (seq.gamma[-1] - seq.gamma[0]) @ forward
    expected = prog.speed * seq.duration
    assert abs(moved - expected) < 0.01 * expected


def test_composite_transitions_are_continuous():
    seq = seq_of("composite", 6.0, components=("walk_line", "squat", "wave_arm"), seed=9)
    joints = KinematicBody().joints(seq.theta, seq.gamma, seq.beta).numpy()
    jumps = np.linalg.norm(np.diff(joints, axis=0), axis=-1).max(-1)
    t = seq.timestamps[1:]
    near = np.zeros(len(t), bool)
    for b in (2.0, 4.0):
        near |= np.abs(t - b) < BLEND_WINDOW / 2 + 1 / 30
    assert jumps[near].max() < 2 * jumps[~near].max()
    assert np.linalg.norm(np.diff(seq.gamma, axis=0), axis=-1).max() < 0.2


def test_make_splits_contract():
    rng = np.random.default_rng(0)
    specs = make_specs(KINDS, random_shapes(8, rng), 2.0, seed=1)
    train, val = make_splits(specs, 3)
    assert not set(train) & set(val)
    assert len(train) + len(val) == len(specs)
    held_kinds = {s.kind for s in specs} - {s.kind for s in train}
    held_shapes = {s.shape for s in specs} - {s.shape for s in train}
    assert len(held_kinds) == 1 and len(held_shapes) == 2
    assert all(s.kind in held_kinds or s.shape in held_shapes for s in val)
    assert make_splits(specs, 3) == (train, val)
    with pytest.raises(InsufficientDiversity):
        make_splits(make_specs(["idle"], random_shapes(3, rng), 2.0), 0)


def test_motion_file_roundtrip(tmp_path):
    seq = seq_of("squat", 1.5, shape=tuple(np.linspace(-1, 1, 8)))
    path = save_motion(seq, tmp_path / "a.motion.json", {"note": "test"})
    back = load_motion(path)
    assert np.abs(back.theta - seq.theta).max() < 1e-9
    assert np.abs(back.gamma - seq.gamma).max() < 1e-9
    np.testing.assert_allclose(back.beta, seq.beta, atol=1e-12)
    assert back.meta["provenance"] == {"note": "test"}


def test_motion_file_errors(tmp_path):
    seq = seq_of("idle", 1.0)
    d = motion_to_dict(seq)
    del d["frames"][2]["gamma"]
    (tmp_path / "a.json").write_text(json.dumps(d))
    with pytest.raises(ParseError, match="gamma"):
        load_motion(tmp_path / "a.json")
    d = motion_to_dict(seq)
    d["frames"] = [{**f, "theta": f["theta"][:5]} for f in d["frames"]]
    (tmp_path / "b.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionMismatch):
        load_motion(tmp_path / "b.json")
    d = motion_to_dict(seq)
    d["format_version"] = 7
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionMismatch):
        load_motion(tmp_path / "c.json")
    (tmp_path / "d.json").write_text('{"format_version": 1,\n "beta": [1, 2,\n')
    with pytest.raises(ParseError, match="line"):
        load_motion(tmp_path / "d.json")


@pytest.mark.parametrize("fmt", ["bin", "txt"])
def test_point_cloud_roundtrip(tmp_path, fmt):
    rng = np.random.default_rng(0)
    pcs = PointCloudSequence([0.0, 0.1, 0.2], [rng.normal(size=(k, 3)) for k in (5, 7, 6)])
    path = save_point_clouds(pcs, tmp_path / "seq.manifest.json", fmt)
    back = load_point_clouds(path)
    np.testing.assert_array_equal(back.timestamps, pcs.timestamps)
    for a, b in zip(back.clouds, pcs.clouds):
        np.testing.assert_array_equal(a, b)
