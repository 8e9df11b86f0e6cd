"""Binary checkpoints for score networks, generators and degradation paths.

Layout (all little-endian)::

    magic        4 bytes  b"DBK1"
    version      u16
    role         u8       1 teacher, 2 phi, 3 generator, 4 path-node
    config_hash  16 bytes ASCII, NUL padded
    n_widths     u16
    widths       u32 * n_widths
    activation   u8       index into nncore.ACTIVATIONS
    -- score roles only --
    sigma_min, sigma_max, t_min   f64 * 3
    output_scaling                u8  (0 inv_sigma, 1 none)
    node_index                    u16 (path-node; 0 otherwise)
    -- all roles --
    n_values     u64
    payload      f64 * n_values   (W0, b0, W1, b1, ... row-major)
    checksum     u64  first 8 bytes of blake2b over everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, ScoreNetwork
from .distill import DegradationPath, GeneratorNetwork
from .nncore import ACTIVATIONS, MlpParams, MlpSpec

MAGIC = b"DBK1"
VERSION = 1
ROLES = {"teacher": 1, "phi": 2, "generator": 3, "path-node": 4}
_ROLE_NAMES = {v: k for k, v in ROLES.items()}
_SCALINGS = ("inv_sigma", "none")


class CheckpointError(Exception):
    code = 10


class TruncatedCheckpointError(CheckpointError):
    code = 11


class ChecksumError(CheckpointError):
    code = 12


class VersionError(CheckpointError):
    code = 13


class FormatError(CheckpointError):
    code = 14


@dataclass
class Checkpoint:
    role: str
    model: ScoreNetwork | GeneratorNetwork
    config_hash: str = ""
    node_index: int = 0


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(model, role: str, config_hash: str = "", node_index: int = 0) -> bytes:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    is_score = role != "generator"
    if is_score != isinstance(model, ScoreNetwork):
        raise ValueError(f"role {role!r} does not match {type(model).__name__}")
    spec = model.params.spec
    h = config_hash.encode("ascii")
    if len(h) > 16:
        raise ValueError("config hash longer than 16 characters")
    out = bytearray(MAGIC)
    out += struct.pack("<HB", VERSION, ROLES[role])
    out += h.ljust(16, b"\0")
    out += struct.pack("<H", len(spec.layer_widths))
    out += struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths)
    out += struct.pack("<B", ACTIVATIONS.index(spec.activation))
    if is_score:
        s = model.schedule
        out += struct.pack("<dddBH", s.sigma_min, s.sigma_max, s.t_min,
                           _SCALINGS.index(model.output_scaling), node_index)
    payload = model.params.flat().astype("<f8")
    out += struct.pack("<Q", payload.size)
    out += payload.tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedCheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError("checkpoint is truncated")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.raw(4) != MAGIC:
        raise FormatError("not a DBK1 checkpoint (bad magic)")
    version, role_id = r.take("<HB")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if role_id not in _ROLE_NAMES:
        raise FormatError(f"unknown role id {role_id}")
    role = _ROLE_NAMES[role_id]
    config_hash = r.raw(16).rstrip(b"\0").decode("ascii")
    (n_widths,) = r.take("<H")
    widths = r.take(f"<{n_widths}I")
    (act,) = r.take("<B")
    node_index = 0
    scaling = None
    if role != "generator":
        smin, smax, tmin, scaling_id, node_index = r.take("<dddBH")
        scaling = _SCALINGS[scaling_id]
    (n_values,) = r.take("<Q")
    payload = r.raw(8 * n_values)
    body_end = r.pos
    (stored,) = r.take("<8s")
    if r.pos != len(data):
        raise FormatError("trailing bytes after checksum")
    if _checksum(data[:body_end]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    spec = MlpSpec(tuple(widths), ACTIVATIONS[act])
    template = MlpParams.from_arrays(spec, [np.zeros(s) for pair in spec.shapes() for s in pair])
    if template.size != n_values:
        raise FormatError("payload size does not match the network spec")
    params = template.with_flat(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    if role == "generator":
        model = GeneratorNetwork(params)
    else:
        model = ScoreNetwork(params, NoiseSchedule(smin, smax, tmin), output_scaling=scaling)
    return Checkpoint(role, model, config_hash, node_index)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(model, path, role: str | None = None, config_hash: str = "",
                    node_index: int = 0) -> Path:
    if role is None:
        role = "generator" if isinstance(model, GeneratorNetwork) else "teacher"
    path = Path(path)
    _atomic_write(path, encode(model, role, config_hash, node_index))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_path(path_obj: DegradationPath, directory, config_hash: str = "") -> Path:
    """Write node_XX.dbk files plus manifest.json; the manifest is written last."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, net in enumerate(path_obj.checkpoints):
        name = f"node_{i:02d}.dbk"
        save_checkpoint(net, d / name, "path-node", config_hash, i)
        files.append(name)
    manifest = {"interval": path_obj.interval, "n_nodes": len(files), "files": files,
                "config_hash": config_hash, "provenance": path_obj.provenance}
    _atomic_write(d / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return d / "manifest.json"


def load_path(directory) -> DegradationPath:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    nets = []
    for i, name in enumerate(manifest["files"]):
        ck = load_checkpoint(d / name)
        if ck.role != "path-node" or ck.node_index != i:
            raise FormatError(f"{name} is not path node {i}")
        nets.append(ck.model)
    return DegradationPath(nets, int(manifest["interval"]), dict(manifest.get("provenance", {})))
