"""Checkpoint file: one JSON header line, then raw little-endian float32 tensors.

The header lists every tensor (name, shape) in payload order: network
parameters first, then the Adam first and second moments when present.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..nn import AdamState, NetSpec, Network, build_network

MAGIC = "gearinsert-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    algo: str
    net: Network
    config: dict
    env_hash: str
    config_hash: str = ""
    rng_state: dict = field(default_factory=dict)
    adam: Optional[AdamState] = None
    extra: dict = field(default_factory=dict)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = list(self.net.named_params())
        if self.adam is not None:
            for name, _ in self.net.named_params():
                if name in self.adam.m:
                    out.append((f"adam.m.{name}", self.adam.m[name]))
                    out.append((f"adam.v.{name}", self.adam.v[name]))
        return out

    def header(self) -> dict:
        adam = None
        if self.adam is not None:
            a = self.adam
            adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
        return {
            "format": MAGIC, "version": VERSION, "algo": self.algo,
            "net_spec": self.net.spec.to_dict(), "config": self.config,
            "env_hash": self.env_hash, "config_hash": self.config_hash,
            "rng_state": self.rng_state, "adam": adam, "extra": self.extra,
            "tensors": [[name, list(t.shape)] for name, t in self.tensors()],
        }

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(t, dtype=_LE_F32).tobytes() for _, t in self.tensors())

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":"))
        return head.encode() + b"\n" + self.payload()


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return path


def load(path, expected_env_hash: Optional[str] = None, strict: bool = False) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        head = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if head.get("format") != MAGIC or head.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a version-{VERSION} checkpoint")
    if expected_env_hash is not None and head["env_hash"] != expected_env_hash:
        msg = f"{path}: env hash {head['env_hash']} != expected {expected_env_hash}"
        if strict:
            raise CheckpointMismatch(msg)
        warnings.warn(msg, stacklevel=2)

    payload = raw[nl + 1:]
    shapes = [(name, tuple(shape)) for name, shape in head["tensors"]]
    need = sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {need}")

    spec = NetSpec.from_dict(head["net_spec"])
    net = build_network(spec, np.random.default_rng(0))
    params = net.params
    adam = None
    if head.get("adam"):
        adam = AdamState(**head["adam"])
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=off).reshape(shape)
        off += n * 4
        if name.startswith("adam.m."):
            adam.m[name[7:]] = arr.astype(np.float32)
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = arr.astype(np.float32)
        elif name in params:
            if params[name].shape != shape:
                raise CheckpointError(f"{path}: tensor {name} has shape {shape}, net expects {params[name].shape}")
            params[name][...] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor {name}")
    return Checkpoint(algo=head["algo"], net=net, config=head["config"], env_hash=head["env_hash"],
                      config_hash=head.get("config_hash", ""), rng_state=head.get("rng_state", {}),
                      adam=adam, extra=head.get("extra", {}))
