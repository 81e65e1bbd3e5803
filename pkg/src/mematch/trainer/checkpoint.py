"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"MEMATCH\\0"
    u32       format version
    u64       manifest length L
    L bytes   UTF-8 JSON manifest: {"tensors": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    ...       raw tensor buffers, little-endian, C order, at the manifest offsets
    u32       CRC32 of every preceding byte

Tensor names: ``param/<name>``, ``buffer/<name>/{mean,var}`` and
``adam/{m,v}/<name>``. ``meta`` carries the step, optimizer settings, model
config, the episode RNG position and any caller-supplied fields.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_model
from .optim import Adam

MAGIC = b"MEMATCH\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    opt: Adam
    step: int
    meta: dict = field(default_factory=dict)


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def encode_checkpoint(params: ModelParams, opt: Adam, step: int, extra: dict | None = None) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in params.parameters().items():
        arrays.append((f"param/{name}", p.data))
    for name, stats in params.buffers().items():
        if stats.initialized:
            arrays.append((f"buffer/{name}/mean", stats.mean))
            arrays.append((f"buffer/{name}/var", stats.var))
    for name in params.parameters():
        if name in opt.m:
            arrays.append((f"adam/m/{name}", opt.m[name]))
            arrays.append((f"adam/v/{name}", opt.v[name]))

    entries, blobs, offset = [], [], 0
    for name, a in arrays:
        a = _le(a)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    cfg = asdict(params.config)
    cfg["input_shape"] = list(cfg["input_shape"])
    meta = {
        "step": int(step),
        "model": cfg,
        "adam": {
            "base_lr": opt.base_lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "decay": opt.decay,
            "decay_every": opt.decay_every,
            "step": opt.step,
        },
        "momentum": {name: s.momentum for name, s in params.buffers().items()},
    }
    if extra:
        meta.update(extra)
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    body = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: ModelParams, opt: Adam, step: int, path, extra: dict | None = None) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, opt, step, extra))
    tmp.replace(path)
    return path


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError("checkpoint truncated: shorter than the fixed header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    magic, version, mlen = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _HEADER.size
    manifest = json.loads(body[start:start + mlen].decode())
    data_start = start + mlen
    arrays = {}
    for e in manifest["tensors"]:
        lo = data_start + e["offset"]
        raw = body[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']} extends past the end of the file")
        dtype = np.dtype(e["dtype"])
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))

    meta = manifest["meta"]
    config = ModelConfig(**meta["model"])
    names = [k[len("param/"):] for k in arrays if k.startswith("param/")]
    if not names:
        raise CheckpointError("checkpoint has no parameters")
    dtype = arrays[f"param/{names[0]}"].dtype
    params = init_model(config, np.random.default_rng(0), dtype=dtype)
    expected = params.parameters()
    if set(names) != set(expected):
        raise CheckpointError(f"parameter set mismatch: {sorted(set(names) ^ set(expected))}")
    for name, p in expected.items():
        a = arrays[f"param/{name}"]
        if a.shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {a.shape} != model shape {p.shape}")
        p.data = a.copy()
    for name, stats in params.buffers().items():
        stats.momentum = meta.get("momentum", {}).get(name, stats.momentum)
        if f"buffer/{name}/mean" in arrays:
            stats.mean = arrays[f"buffer/{name}/mean"].copy()
            stats.var = arrays[f"buffer/{name}/var"].copy()

    adam = meta["adam"]
    opt = Adam(
        base_lr=adam["base_lr"],
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        eps=adam["eps"],
        decay=adam["decay"],
        decay_every=adam["decay_every"],
        step=adam["step"],
    )
    for name in expected:
        if f"adam/m/{name}" in arrays:
            opt.m[name] = arrays[f"adam/m/{name}"].copy()
            opt.v[name] = arrays[f"adam/v/{name}"].copy()
    return Checkpoint(params, opt, int(meta["step"]), meta)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())
