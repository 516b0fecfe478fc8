"""Binary checkpoint container shared by both phases.

Layout, all little-endian::

    b"RAMLCKPT"                      8-byte magic
    u32 version                      currently 1
    u32 header length, header bytes  UTF-8 JSON: phase tag ("vanilla" | "ra"),
                                     encoder config, label count, vocab
                                     fingerprint; "ra" adds the cross-attention
                                     config and the phase-one encoder fingerprint
    u32 tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8 rank, u32 extent per axis
        f32 elements, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, VanillaClassifier
from .numerics import ParamStore
from .ra_model import CrossAttentionConfig, RAClassifier

MAGIC = b"RAMLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: VanillaClassifier, path) -> None:
    header = {
        "phase": model.phase,
        "encoder_config": model.config.to_dict(),
        "n_labels": model.n_labels,
        "vocab_fingerprint": model.vocab_fingerprint,
    }
    if isinstance(model, RAClassifier):
        header["ca_config"] = model.ca_config.to_dict()
        header["source_fingerprint"] = model.source_fingerprint
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        rank = buf[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors


def load_checkpoint(path, dtype=np.float32) -> VanillaClassifier:
    header, tensors = read_checkpoint(path)
    params = ParamStore(dtype)
    for name, value in tensors.items():
        params.add(name, value)
    config = EncoderConfig(**header["encoder_config"])
    if header["phase"] == "vanilla":
        return VanillaClassifier(config, header["n_labels"], header["vocab_fingerprint"], params=params)
    if header["phase"] == "ra":
        return RAClassifier(config, header["n_labels"], CrossAttentionConfig(**header["ca_config"]),
                            header["source_fingerprint"], header["vocab_fingerprint"], params=params)
    raise CheckpointError(f"{path}: unknown phase tag {header['phase']!r}")
