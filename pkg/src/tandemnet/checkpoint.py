"""Single-file checkpoint bundle.

Layout (little-endian)::

    b"TNDMCKPT" | u32 version | u32 meta_len | meta JSON
    u32 record_count
    record: u16 name_len | name (utf-8) | u8 dtype code | u8 ndim | u32 * ndim shape | raw data

Tensor names are module paths prefixed by their segment: ``model/``,
``optim/<group>/`` and ``data/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, build_model
from .tensor import set_default_dtype
from .trainer import TrainConfig, Trainer

MAGIC = b"TNDMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("<i4")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def bundle_to_bytes(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def bundle_from_bytes(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes, {len(data) - pos} left", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", len(MAGIC))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", pos) from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}", pos - 2)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(dt.itemsize * size), dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", pos)
    return meta, tensors


def trainer_bundle(trainer: Trainer, vocab=None, extra_meta: dict | None = None) -> tuple[dict, dict]:
    meta = {
        "format": "tandemnet-checkpoint",
        "kind": trainer.kind,
        "epoch": trainer.epoch,
        "model_config": trainer.model.cfg.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "rng_state": trainer.rng.bit_generator.state,
        "optimizer_epochs": {g: opt.epoch for g, opt in trainer.optimizers.items()},
        "vocab": vocab.to_text() if vocab is not None else None,
    }
    meta.update(extra_meta or {})
    tensors = {f"model/{k}": v for k, v in trainer.model.state_dict().items()}
    for group, opt in trainer.optimizers.items():
        tensors.update({f"optim/{group}/{k}": v for k, v in opt.state_arrays().items()})
    tensors["data/rgb_mean"] = trainer.mean
    return meta, tensors


def save_checkpoint(path, trainer: Trainer, vocab=None, extra_meta: dict | None = None) -> None:
    meta, tensors = trainer_bundle(trainer, vocab, extra_meta)
    Path(path).write_bytes(bundle_to_bytes(meta, tensors))


def trainer_from_bundle(meta: dict, tensors: dict[str, np.ndarray]) -> Trainer:
    cfg = TrainConfig(**meta["train_config"])
    set_default_dtype(cfg.dtype)
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    model = build_model(meta["kind"], model_cfg, np.random.default_rng(0))
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    trainer = Trainer(model, cfg, tensors["data/rgb_mean"], rng, meta["kind"])
    trainer.epoch = meta["epoch"]
    for group, opt in trainer.optimizers.items():
        prefix = f"optim/{group}/"
        opt.load_state_arrays({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        opt.epoch = meta["optimizer_epochs"][group]
    return trainer


def load_checkpoint(path) -> tuple[Trainer, dict]:
    """Rebuild the trainer (model, optimizers, rng) saved at ``path``; also returns the metadata."""
    meta, tensors = bundle_from_bytes(Path(path).read_bytes())
    return trainer_from_bundle(meta, tensors), meta
