"""Dataset directories: save and load trajectory collections on disk.

Layout (one directory per dataset):

    header.json          format name, version, env name, spec hash,
                         trajectory count, encoding
    trajectories.bin     binary encoding (default), or
    trajectories.json    plain-text encoding

Binary records are little-endian regardless of platform. Each record is

    u32 T   u32 obs_dim   u32 action_dim
    u8 rtg_form (0 relabeled, 1 rollout)   u8 terminated
    u8 has_final_state    u8 zero pad
    i64 seed              f64 g_init
    f64[T * obs_dim]      states
    f64[T * action_dim]   actions
    f64[T]                rewards
    f64[T]                rtgs
    f64[obs_dim]          final_state (only when has_final_state)

The JSON encoding stores every float as a C99 hexadecimal literal
(``float.hex()``), so both encodings round-trip bit-exactly.

The spec hash covers only the dynamics-defining fields of the generating
environment (name, dimensions, horizon, timestep, reward shape, goal),
not the calibration reference returns, so calibrating an env does not
orphan datasets generated before calibration.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .envs import EnvSpec
from .trajectory import Trajectory

FORMAT_NAME = "dtrl-dataset"
FORMAT_VERSION = 1

_RECORD_HEAD = struct.Struct("<IIIBBBBqd")
_RTG_FORM_CODE = {"relabeled": 0, "rollout": 1}
_RTG_FORM_NAME = {v: k for k, v in _RTG_FORM_CODE.items()}


def spec_hash(spec: EnvSpec) -> str:
    """Stable hex digest of the dynamics-defining EnvSpec fields."""
    goal = None if spec.goal is None else [float(x).hex() for x in spec.goal]
    payload = json.dumps(
        {
            "name": spec.name,
            "d_pos": spec.d_pos,
            "horizon": spec.horizon,
            "dt": float(spec.dt).hex(),
            "reward_kind": spec.reward_kind,
            "goal": goal,
            "goal_radius": float(spec.goal_radius).hex(),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _encode_record(traj: Trajectory) -> bytes:
    T = len(traj)
    obs_dim = traj.states.shape[1] if T else 0
    action_dim = traj.actions.shape[1] if T else 0
    has_final = traj.final_state is not None
    head = _RECORD_HEAD.pack(
        T,
        obs_dim,
        action_dim,
        _RTG_FORM_CODE[traj.rtg_form],
        int(traj.terminated),
        int(has_final),
        0,
        traj.seed,
        traj.g_init,
    )
    parts = [head, _le(traj.states), _le(traj.actions), _le(traj.rewards), _le(traj.rtgs)]
    if has_final:
        parts.append(_le(traj.final_state))
    return b"".join(parts)


def _decode_record(buf: bytes, off: int) -> tuple[Trajectory, int]:
    T, obs_dim, action_dim, form, term, has_final, _, seed, g_init = _RECORD_HEAD.unpack_from(
        buf, off
    )
    off += _RECORD_HEAD.size

    def take(n, shape):
        nonlocal off
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += n * 8
        return a.reshape(shape)

    states = take(T * obs_dim, (T, obs_dim))
    actions = take(T * action_dim, (T, action_dim))
    rewards = take(T, (T,))
    rtgs = take(T, (T,))
    final_state = take(obs_dim, (obs_dim,)) if has_final else None
    traj = Trajectory(
        states=states,
        actions=actions,
        rewards=rewards,
        rtgs=rtgs,
        g_init=g_init,
        rtg_form=_RTG_FORM_NAME[form],
        seed=seed,
        final_state=final_state,
        terminated=bool(term),
    )
    return traj, off


def _hex_list(a: np.ndarray) -> list:
    return [float(x).hex() for x in np.asarray(a, dtype=np.float64).ravel()]


def _from_hex(vals: list, shape: tuple) -> np.ndarray:
    return np.array([float.fromhex(v) for v in vals], dtype=np.float64).reshape(shape)


def _traj_to_json(traj: Trajectory) -> dict:
    T = len(traj)
    obs_dim = traj.states.shape[1] if T else 0
    action_dim = traj.actions.shape[1] if T else 0
    d = {
        "steps": T,
        "obs_dim": obs_dim,
        "action_dim": action_dim,
        "rtg_form": traj.rtg_form,
        "terminated": traj.terminated,
        "seed": traj.seed,
        "g_init": float(traj.g_init).hex(),
        "states": _hex_list(traj.states),
        "actions": _hex_list(traj.actions),
        "rewards": _hex_list(traj.rewards),
        "rtgs": _hex_list(traj.rtgs),
    }
    if traj.final_state is not None:
        d["final_state"] = _hex_list(traj.final_state)
    return d


def _traj_from_json(d: dict) -> Trajectory:
    T = d["steps"]
    obs_dim = d["obs_dim"]
    action_dim = d["action_dim"]
    return Trajectory(
        states=_from_hex(d["states"], (T, obs_dim)),
        actions=_from_hex(d["actions"], (T, action_dim)),
        rewards=_from_hex(d["rewards"], (T,)),
        rtgs=_from_hex(d["rtgs"], (T,)),
        g_init=float.fromhex(d["g_init"]),
        rtg_form=d["rtg_form"],
        seed=d["seed"],
        final_state=_from_hex(d["final_state"], (obs_dim,)) if "final_state" in d else None,
        terminated=d["terminated"],
    )


def save_dataset(
    path: str | Path,
    trajectories: list[Trajectory],
    spec: EnvSpec,
    encoding: str = "binary",
) -> Path:
    """Write a dataset directory. Returns the directory path."""
    if encoding not in ("binary", "json"):
        raise ValueError(f"unknown encoding {encoding!r} (expected 'binary' or 'json')")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "env": spec.name,
        "spec_hash": spec_hash(spec),
        "count": len(trajectories),
        "encoding": encoding,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    if encoding == "binary":
        with open(path / "trajectories.bin", "wb") as f:
            for traj in trajectories:
                f.write(_encode_record(traj))
    else:
        payload = [_traj_to_json(t) for t in trajectories]
        (path / "trajectories.json").write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_dataset(path: str | Path) -> tuple[list[Trajectory], dict]:
    """Read a dataset directory. Returns (trajectories, header)."""
    path = Path(path)
    header_file = path / "header.json"
    if not header_file.exists():
        raise FileNotFoundError(f"no dataset header at {header_file}")
    header = json.loads(header_file.read_text())
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} directory: {path}")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')!r}")
    encoding = header.get("encoding", "binary")
    out: list[Trajectory] = []
    if encoding == "binary":
        buf = (path / "trajectories.bin").read_bytes()
        off = 0
        for _ in range(header["count"]):
            traj, off = _decode_record(buf, off)
            out.append(traj)
        if off != len(buf):
            raise ValueError(f"trailing bytes in {path / 'trajectories.bin'}")
    elif encoding == "json":
        payload = json.loads((path / "trajectories.json").read_text())
        out = [_traj_from_json(d) for d in payload]
        if len(out) != header["count"]:
            raise ValueError("header count disagrees with stored trajectories")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    return out, header


def dataset_digest(path: str | Path) -> str:
    """Hex digest of the stored trajectory bytes (encoding-specific)."""
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    name = "trajectories.bin" if header.get("encoding", "binary") == "binary" else "trajectories.json"
    return hashlib.sha256((path / name).read_bytes()).hexdigest()
