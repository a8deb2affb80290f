"""Binary checkpoints for networks and adapter sets.

Layout: magic ``b"TWFC"``, uint32 format version, uint32 header length, a
UTF-8 JSON header, then every parameter array in declaration order as
little-endian float64. A JSON manifest next to the file lists tensor names,
shapes and the sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn import NetConfig, VelocityNet

MAGIC = b"TWFC"
FORMAT_VERSION = 1


def _payload(arrays: Sequence[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def write_container(path: str | Path, header: dict, names: Sequence[str], arrays: Sequence[np.ndarray]) -> str:
    path = Path(path)
    header = dict(header, tensors=[[n, list(a.shape)] for n, a in zip(names, arrays)])
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _payload(arrays)
    digest = hashlib.sha256(payload).hexdigest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "sha256": digest,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def read_container(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    body = raw[12 + hlen :]
    arrays, off = [], 0
    for _, shape in header["tensors"]:
        n = int(np.prod(shape)) * 8
        if off + n > len(body):
            raise ConfigError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(body[off : off + n], dtype="<f8").reshape(shape).astype(np.float64))
        off += n
    if off != len(body):
        raise ConfigError(f"{path}: trailing bytes after payload")
    return header, arrays


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_net(net: VelocityNet, path: str | Path) -> str:
    header = {"kind": "velocity_net", "config": net.config.to_dict()}
    return write_container(path, header, net.param_names(), net.params)


def load_net(path: str | Path) -> VelocityNet:
    header, arrays = read_container(path)
    if header.get("kind") != "velocity_net":
        raise ConfigError(f"{path}: not a network checkpoint")
    config = NetConfig.from_dict(header["config"])
    return VelocityNet(config, arrays[0::2], arrays[1::2])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
