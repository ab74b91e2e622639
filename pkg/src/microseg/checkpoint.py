"""Binary checkpoint format for :class:`MicroSegModel`.

Layout (little endian): ``MSEG``, u32 version, u32 step, u32 registry length,
u32 K, u32 feature channels, the registry as u32 ids, then per parameter
tensor: u32 name length, name bytes, u32 rank, u32 dims, f64 payload.
"""

from __future__ import annotations

import hashlib
import io
import re
import struct
from pathlib import Path

import numpy as np
import torch

from microseg.model import FeatureExtractorConfig, MicroSegModel

MAGIC = b"MSEG"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_U32 = struct.Struct("<I")


def checkpoint_bytes(model: MicroSegModel) -> bytes:
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC, VERSION, model.step, len(model.registry), model.num_unseen, model.feature_channels
        )
    )
    buf.write(np.asarray(model.registry, dtype="<u4").tobytes())
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f8")
        encoded = name.encode()
        buf.write(_U32.pack(len(encoded)))
        buf.write(encoded)
        buf.write(_U32.pack(arr.ndim))
        buf.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def sha256_of(model: MicroSegModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: MicroSegModel, path: str | Path) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read(view: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(view):
        raise ValueError("truncated checkpoint")
    return view[pos : pos + n], pos + n


def load_checkpoint(path: str | Path) -> MicroSegModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> MicroSegModel:
    view = memoryview(data)
    head, pos = _read(view, 0, _HEADER.size)
    magic, version, step, n_reg, k, c = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad checkpoint magic {bytes(magic)!r}")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    reg, pos = _read(view, pos, 4 * n_reg)
    registry = [int(v) for v in np.frombuffer(reg, dtype="<u4")]

    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        raw, pos = _read(view, pos, 4)
        name_bytes, pos = _read(view, pos, _U32.unpack(raw)[0])
        raw, pos = _read(view, pos, 4)
        rank = _U32.unpack(raw)[0]
        dims_raw, pos = _read(view, pos, 4 * rank)
        dims = tuple(int(d) for d in np.frombuffer(dims_raw, dtype="<u4"))
        payload, pos = _read(view, pos, 8 * int(np.prod(dims, dtype=np.int64)))
        tensors[bytes(name_bytes).decode()] = np.frombuffer(payload, dtype="<f8").reshape(dims)

    conv_ids = sorted(
        int(m.group(1)) for name in tensors if (m := re.fullmatch(r"convs\.(\d+)\.weight", name))
    )
    if not conv_ids:
        raise ValueError("checkpoint has no extractor layers")
    first = tensors["convs.0.weight"]
    config = FeatureExtractorConfig(
        in_channels=first.shape[1],
        feature_channels=c,
        depth=len(conv_ids),
        kernel_size=first.shape[-1],
    )
    model = MicroSegModel(config, k)
    model.registry = registry
    n_out = n_reg + k
    for name in ("dense_weight", "dense_bias", "prop_weight", "prop_bias"):
        if tensors[name].shape[0] != n_out:
            raise ValueError(f"{name} has {tensors[name].shape[0]} rows, expected {n_out}")
        setattr(model, name, torch.nn.Parameter(torch.from_numpy(tensors[name].copy())))
    missing = set(model.state_dict()) ^ set(tensors)
    if missing:
        raise ValueError(f"checkpoint tensors do not match the model: {sorted(missing)}")
    model.load_state_dict({n: torch.from_numpy(a.copy()) for n, a in tensors.items()})
    model.step = step
    if step >= 2:
        for p in model.extractor_parameters():
            p.requires_grad_(False)
        model.frozen_extractor = True
    return model
