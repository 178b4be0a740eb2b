"""Policy checkpoints: versioned header plus named float64 tensors.

File layout:

    magic "DTCK"            4 bytes
    u32 version             little-endian
    u32 header_length       little-endian
    header JSON             UTF-8, sorted keys; model config plus the
                            ordered tensor manifest (name, shape)
    tensor data             concatenated little-endian f8, manifest order

Loading a checkpoint and saving it again produces byte-identical files:
the header is serialized canonically and tensors are written in manifest
order with no padding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .nets import DTConfig, DTPolicy

MAGIC = b"DTCK"
VERSION = 1


def save_checkpoint(path: str | Path, policy: DTPolicy, extra: dict | None = None) -> Path:
    """Write the policy config and parameters. `extra` must be JSON-safe."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = policy.state_dict()
    manifest = [[name, list(t.shape)] for name, t in state.items()]
    header = {
        "model": asdict(policy.cfg),
        "tensors": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for name, _ in manifest:
            f.write(np.ascontiguousarray(state[name].detach().numpy(), dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[DTPolicy, dict]:
    """Rebuild the policy from disk. Returns (policy, extra)."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not a policy checkpoint")
    version, header_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(buf[off : off + header_len].decode())
    off += header_len
    policy = DTPolicy(DTConfig(**header["model"]))
    state = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += n * 8
        state[name] = torch.from_numpy(a.reshape(shape))
    if off != len(buf):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    policy.load_state_dict(state)
    policy.eval()
    return policy, header.get("extra", {})


def checkpoint_digest(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
