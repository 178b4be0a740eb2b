"""Dataset directory format: bit-exact round trips in both encodings."""

import json

import numpy as np
import pytest

from dtrl.datasets import dataset_digest, load_dataset, save_dataset, spec_hash
from dtrl.envs import generate_offline_dataset, make_env
from dtrl.trajectory import Trajectory


def sample_trajs():
    env = make_env("dense")
    return generate_offline_dataset(env, "medium", 250, seed=11), env.spec


def awkward_traj():
    """Floats that expose any decimal formatting loss."""
    states = np.array([[1e-300, -0.0], [np.pi, 1 / 3], [2e300, 5e-324]])
    return Trajectory(
        states=states,
        actions=np.array([[0.1], [-1.0 / 7.0], [1e-17]]),
        rewards=np.array([0.3, -0.7, 1e-12]),
        rtgs=np.array([0.3 - 0.7 + 1e-12, -0.7 + 1e-12, 1e-12]),
        g_init=10.1,
        rtg_form="rollout",
        seed=-3,
        final_state=np.array([0.25, -0.5]),
        terminated=True,
    )


def assert_traj_equal(a: Trajectory, b: Trajectory):
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)
    assert np.array_equal(a.rtgs, b.rtgs)
    assert a.g_init == b.g_init
    assert a.rtg_form == b.rtg_form
    assert a.seed == b.seed
    assert a.terminated == b.terminated
    if a.final_state is None:
        assert b.final_state is None
    else:
        assert np.array_equal(a.final_state, b.final_state)


@pytest.mark.parametrize("encoding", ["binary", "json"])
def test_round_trip_bit_exact(tmp_path, encoding):
    trajs, spec = sample_trajs()
    trajs = trajs + [awkward_traj()]
    d = tmp_path / "ds"
    save_dataset(d, trajs, spec, encoding=encoding)
    loaded, header = load_dataset(d)
    assert header["count"] == len(trajs)
    assert header["env"] == "dense"
    assert header["encoding"] == encoding
    assert len(loaded) == len(trajs)
    for a, b in zip(trajs, loaded):
        assert_traj_equal(a, b)


@pytest.mark.parametrize("encoding", ["binary", "json"])
def test_save_load_save_identical_digest(tmp_path, encoding):
    trajs, spec = sample_trajs()
    d1 = tmp_path / "one"
    d2 = tmp_path / "two"
    save_dataset(d1, trajs, spec, encoding=encoding)
    loaded, _ = load_dataset(d1)
    save_dataset(d2, loaded, spec, encoding=encoding)
    assert dataset_digest(d1) == dataset_digest(d2)


def test_spec_hash_ignores_calibration():
    env = make_env("dense")
    h1 = spec_hash(env.spec)
    env.spec.ref_random_return = 1.0
    env.spec.ref_expert_return = 9.0
    assert spec_hash(env.spec) == h1
    assert spec_hash(make_env("sparse").spec) != h1


def test_header_required(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_foreign_directory_rejected(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "header.json").write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(ValueError, match="not a"):
        load_dataset(d)


def test_version_checked(tmp_path):
    trajs, spec = sample_trajs()
    d = tmp_path / "ds"
    save_dataset(d, trajs, spec)
    header = json.loads((d / "header.json").read_text())
    header["version"] = 99
    (d / "header.json").write_text(json.dumps(header))
    with pytest.raises(ValueError, match="version"):
        load_dataset(d)


def test_truncated_binary_detected(tmp_path):
    trajs, spec = sample_trajs()
    d = tmp_path / "ds"
    save_dataset(d, trajs, spec)
    raw = (d / "trajectories.bin").read_bytes()
    (d / "trajectories.bin").write_bytes(raw + b"\x00" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_dataset(d)


def test_generation_is_seed_deterministic(tmp_path):
    env = make_env("dense")
    a = generate_offline_dataset(env, "random", 300, seed=4)
    b = generate_offline_dataset(env, "random", 300, seed=4)
    save_dataset(tmp_path / "a", a, env.spec)
    save_dataset(tmp_path / "b", b, env.spec)
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")
