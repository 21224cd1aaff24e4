"""Single-file checkpoint container.

Layout: ``b"MOFC"``, a version byte, a little-endian u32 manifest length, a
UTF-8 JSON manifest, then a float32 little-endian blob. The manifest holds
the model configuration, arbitrary metadata and a tensor index
``{name: {"shape": [...], "offset": int}}`` (offsets in elements).

Tensor names are grouped by prefix: ``encoder/``, ``fusion/``, ``memory/``,
``context/<k>/`` and ``decoder/`` (plus ``pretrain/`` for pretraining heads).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import BadMagicError, HeaderError, TruncatedFileError, UnsupportedVersionError
from .memory import MemoryBuffer
from .model import ModelConfig, MOFSModel

MAGIC = b"MOFC"
VERSION = 1

_ENCODER = ("encoder.", "pos.")
_DECODER = ("gamma_dec.", "beta_dec.", "decoder_gca.", "head.")


def _group(name: str) -> str:
    if name.startswith(_ENCODER):
        return "encoder/" + name
    if name.startswith(_DECODER):
        return "decoder/" + name
    if name.startswith("soft_prompts."):
        return f"context/{name.split('.', 1)[1]}/soft_prompt"
    if name.startswith("id_embeddings."):
        return f"context/{name.split('.', 1)[1]}/id_embedding"
    if name.startswith("readout."):
        return "memory/" + name
    return "fusion/" + name


def _as_real(t: torch.Tensor) -> torch.Tensor:
    t = t.detach().cpu()
    return torch.view_as_real(t) if t.is_complex() else t


def model_tensors(model: MOFSModel) -> dict[str, torch.Tensor]:
    out = {}
    for name, t in model.state_dict().items():
        out[_group(name)] = _as_real(t)
    for k, feats in sorted(model.text_features.items()):
        out[f"context/{k}/text_features"] = feats
    for k, (P, e) in sorted(model._frozen_contexts.items()):
        out[f"context/{k}/frozen_soft_prompt"] = P
        out[f"context/{k}/frozen_id_embedding"] = e
    for key, val in model.memory.state().items():
        if isinstance(val, torch.Tensor):
            out[f"memory/buffer/{key}"] = val
    return out


def dumps(tensors: dict[str, torch.Tensor], manifest: dict) -> bytes:
    index, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({**manifest, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<BI", VERSION, len(header)) + header + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if len(buf) < 9:
        raise TruncatedFileError("checkpoint shorter than its fixed header")
    if buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file")
    version, n = struct.unpack("<BI", buf[4:9])
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported")
    if len(buf) < 9 + n:
        raise TruncatedFileError("checkpoint manifest truncated")
    try:
        manifest = json.loads(buf[9:9 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"bad checkpoint manifest: {exc}") from exc
    body = buf[9 + n:]
    if len(body) % 4:
        raise TruncatedFileError("checkpoint tensor data truncated")
    data = np.frombuffer(body, dtype="<f4")
    tensors = {}
    for name, info in manifest.pop("tensors").items():
        size = int(np.prod(info["shape"], dtype=np.int64))
        start = info["offset"]
        if start + size > data.size:
            raise TruncatedFileError(f"tensor {name} runs past the end of the file")
        tensors[name] = torch.from_numpy(data[start:start + size].reshape(info["shape"]).copy())
    return tensors, manifest


def save_model(model: MOFSModel, path, meta: dict | None = None, extra: dict | None = None) -> Path:
    tensors = model_tensors(model)
    for k, v in (extra or {}).items():
        tensors[k] = _as_real(v)
    manifest = {"kind": "mofs", "config": model.config.to_dict(),
                "meta": {**(meta or {}), "memory_seq": model.memory._seq}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, manifest))
    return path


def load_model(path) -> tuple[MOFSModel, dict, dict[str, torch.Tensor]]:
    """Rebuild a model; returns ``(model, meta, leftover tensors)``."""
    tensors, manifest = loads(Path(path).read_bytes())
    model = MOFSModel(ModelConfig.from_dict(manifest["config"]))
    ctx_ids = sorted({int(n.split("/")[1]) for n in tensors if n.endswith("/text_features")})
    for k in ctx_ids:
        feats = tensors.pop(f"context/{k}/text_features")
        if f"context/{k}/frozen_soft_prompt" in tensors:
            model.text_features[k] = feats
            model._frozen_contexts[k] = (tensors.pop(f"context/{k}/frozen_soft_prompt"),
                                         tensors.pop(f"context/{k}/frozen_id_embedding"))
        else:
            model.register_operator(k, feats)
    state = {}
    reference = model.state_dict()
    for name, ref in reference.items():
        t = tensors.pop(_group(name))
        state[name] = torch.view_as_complex(t.contiguous()) if ref.is_complex() else t
    model.load_state_dict(state)
    buf = {k.split("/", 2)[2]: tensors.pop(k) for k in list(tensors) if k.startswith("memory/buffer/")}
    mem = {"capacity": model.config.memory_capacity, "seq": manifest["meta"].get("memory_seq", 0)}
    mem.update(buf)
    model.memory = MemoryBuffer.from_state(mem)
    return model, manifest["meta"], tensors


def save_pretrain(encoder, heads, path, meta: dict | None = None) -> Path:
    """Encoder (``encoder/*``) and pretraining heads (``pretrain/*``)."""
    tensors = {f"encoder/{k}": _as_real(v) for k, v in encoder.state_dict().items()}
    tensors.update({f"pretrain/{k}": _as_real(v) for k, v in heads.state_dict().items()})
    arch = {"d": encoder.d, "n_blocks": len(encoder.blocks), "modes": list(encoder.modes),
            "in_channels": encoder.lift.in_channels}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, {"kind": "pretrain", "encoder": arch, "meta": meta or {}}))
    return path


def _load_state(module, tensors: dict, prefix: str) -> None:
    state = {}
    for name, ref in module.state_dict().items():
        t = tensors[prefix + name]
        state[name] = torch.view_as_complex(t.contiguous()) if ref.is_complex() else t
    module.load_state_dict(state)


def load_pretrain(path):
    """Returns ``(encoder, heads, meta)``."""
    from .fno import FNOEncoder
    from .pretrain import PretrainHeads

    tensors, manifest = loads(Path(path).read_bytes())
    if manifest.get("kind") != "pretrain":
        raise HeaderError(f"{path} is not a pretraining checkpoint")
    arch = manifest["encoder"]
    encoder = FNOEncoder(arch["d"], arch["n_blocks"], tuple(arch["modes"]), arch["in_channels"])
    heads = PretrainHeads(arch["d"])
    _load_state(encoder, tensors, "encoder/")
    _load_state(heads, tensors, "pretrain/")
    return encoder, heads, manifest["meta"]


def checkpoint_kind(path) -> str:
    _, manifest = loads(Path(path).read_bytes())
    return manifest.get("kind", "")
