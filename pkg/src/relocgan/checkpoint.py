"""Single-file checkpoint container and the standalone offset export.

Checkpoint layout (all integers little-endian)::

    b"RLGC" | u32 version | u32 header_len | header (UTF-8 JSON) | payload | sha256(everything before)

The header carries the architecture, free-form metadata and a section table
``[{name, dtype, shape, offset, nbytes}]`` whose offsets index into the
payload. Floating point sections are stored as ``<f4``, integer sections as
``<i8``, raw byte sections as ``u1``.

The offset export is a bare array::

    b"DLTW" | u32 version | u32 n_layers | u32 d_w | n_layers*d_w <f4
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from .data import atomic_write_bytes
from .networks import ArchConfig, ConfigError, GeneratorBundle

MAGIC = b"RLGC"
DELTA_MAGIC = b"DLTW"
FORMAT_VERSION = 1
_DTYPES = {"f4": "<f4", "i8": "<i8", "u1": "u1"}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingState:
    step: int = 0
    images_seen: int = 0
    budget_kimg: float = 0.0
    seed: int = 0
    pl_mean: float = 0.0
    rng_state: Optional[torch.Tensor] = None
    optimizers: Dict[str, dict] = field(default_factory=dict)
    phase: str = "pretrain"

    @property
    def kimg(self) -> float:
        return self.images_seen / 1000.0


@dataclass
class Checkpoint:
    bundle: GeneratorBundle
    deltas: Dict[str, torch.Tensor] = field(default_factory=dict)
    modules: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)
    state: TrainingState = field(default_factory=TrainingState)
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def arch(self) -> ArchConfig:
        return self.bundle.arch


# --------------------------------------------------------------------------- encoding


def _to_array(value) -> tuple:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        if value.dtype == torch.uint8:
            return "u1", value.numpy()
        if value.is_floating_point():
            return "f4", value.to(torch.float32).numpy()
        return "i8", value.to(torch.int64).numpy()
    raise TypeError(f"cannot store {type(value)!r}")


def _optimizer_sections(prefix: str, sd: dict, sections: Dict[str, Any]) -> dict:
    """Split an optimizer state_dict into tensor sections plus a JSON-able skeleton."""
    skeleton = {"param_groups": sd["param_groups"], "state": {}}
    for idx, st in sorted(sd["state"].items(), key=lambda kv: str(kv[0])):
        keys = {}
        for k, v in sorted(st.items()):
            if isinstance(v, torch.Tensor):
                sections[f"{prefix}/{idx}/{k}"] = v
                keys[k] = "tensor"
            else:
                keys[k] = v
        skeleton["state"][str(idx)] = keys
    return skeleton


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections: Dict[str, Any] = {}
    b = ckpt.bundle
    for net_name, net in (("mapping", b.mapping), ("synthesis", b.synthesis), ("discriminator", b.discriminator)):
        for k, v in net.state_dict().items():
            sections[f"{net_name}/{k}"] = v
    for name in sorted(ckpt.deltas):
        sections[f"delta/{name}"] = ckpt.deltas[name]
    for mod in sorted(ckpt.modules):
        for k, v in ckpt.modules[mod].items():
            sections[f"module/{mod}/{k}"] = v
    st = ckpt.state
    if st.rng_state is not None:
        sections["state/rng"] = st.rng_state
    opt_meta = {name: _optimizer_sections(f"opt/{name}", sd, sections) for name, sd in sorted(st.optimizers.items())}

    table = []
    chunks = []
    offset = 0
    for name, value in sections.items():
        code, arr = _to_array(value)
        raw = np.ascontiguousarray(arr.astype(_DTYPES[code], copy=False)).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        "arch": b.arch.to_dict(),
        "frozen": b.frozen,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "modules": sorted(ckpt.modules),
        "deltas": sorted(ckpt.deltas),
        "state": {
            "step": st.step, "images_seen": st.images_seen, "budget_kimg": st.budget_kimg,
            "seed": st.seed, "pl_mean": float.hex(float(st.pl_mean)), "phase": st.phase,
            "optimizers": opt_meta,
        },
        "sections": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12 + 32 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    header = json.loads(body[12:12 + head_len].decode("utf-8"))
    payload = body[12 + head_len:]

    tensors: Dict[str, torch.Tensor] = {}
    for s in header["sections"]:
        end = s["offset"] + s["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"section {s['name']} runs past end of file")
        arr = np.frombuffer(payload[s["offset"]:end], dtype=_DTYPES[s["dtype"]]).reshape(s["shape"])
        tensors[s["name"]] = torch.from_numpy(arr.copy())

    arch = ArchConfig.from_dict(header["arch"])
    bundle = GeneratorBundle.create(arch)
    for net_name, net in (("mapping", bundle.mapping), ("synthesis", bundle.synthesis),
                          ("discriminator", bundle.discriminator)):
        sd = {k[len(net_name) + 1:]: v for k, v in tensors.items() if k.startswith(net_name + "/")}
        net.load_state_dict(sd)
    if header["frozen"]:
        bundle.freeze_generator()

    deltas = {name: tensors[f"delta/{name}"] for name in header["deltas"]}
    modules = {}
    for mod in header["modules"]:
        pre = f"module/{mod}/"
        modules[mod] = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}

    hs = header["state"]
    optimizers = {}
    for name, skel in hs["optimizers"].items():
        state = {}
        for idx, keys in skel["state"].items():
            state[int(idx)] = {k: (tensors[f"opt/{name}/{idx}/{k}"] if v == "tensor" else v) for k, v in keys.items()}
        optimizers[name] = {"state": state, "param_groups": skel["param_groups"]}
    state = TrainingState(
        step=hs["step"], images_seen=hs["images_seen"], budget_kimg=hs["budget_kimg"], seed=hs["seed"],
        pl_mean=float.fromhex(hs["pl_mean"]), rng_state=tensors.get("state/rng"),
        optimizers=optimizers, phase=hs["phase"])
    return Checkpoint(bundle, deltas, modules, state, header["config"], header["meta"])


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(ckpt))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------- offset export


def encode_delta(delta: torch.Tensor) -> bytes:
    if delta.ndim != 2:
        raise ConfigError("offset must be a (n_layers, d_w) matrix")
    n, d = delta.shape
    arr = delta.detach().cpu().to(torch.float32).numpy().astype("<f4")
    return DELTA_MAGIC + struct.pack("<III", FORMAT_VERSION, n, d) + arr.tobytes()


def decode_delta(data: bytes, arch: Optional[ArchConfig] = None) -> torch.Tensor:
    if len(data) < 16 or data[:4] != DELTA_MAGIC:
        raise CheckpointError("not an offset export (bad magic or truncated)")
    version, n, d = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported offset export version {version}")
    if len(data) != 16 + 4 * n * d:
        raise CheckpointError(f"offset export truncated: expected {16 + 4 * n * d} bytes, got {len(data)}")
    if arch is not None and (n, d) != (arch.n_layers, arch.d_w):
        raise ConfigError(f"offset is {n}x{d} but the architecture needs {arch.n_layers}x{arch.d_w}")
    return torch.from_numpy(np.frombuffer(data[16:], dtype="<f4").reshape(n, d).copy())


def export_delta(delta: torch.Tensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_delta(delta))
    return path


def import_delta(path: Union[str, Path], arch: Optional[ArchConfig] = None) -> torch.Tensor:
    return decode_delta(Path(path).read_bytes(), arch)
