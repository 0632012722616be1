"""Model checkpoints in a self-describing, checksummed binary file.

Layout (little-endian)::

    8 bytes   magic b"VTRJCKPT"
    uint32    format version (1)
    uint64    header length L
    L bytes   UTF-8 JSON header (sorted keys): tensor table, configs, stats, vocab, ...
    payload   float64 tensors at the offsets listed in the tensor table
    32 bytes  SHA-256 of everything above

Optimizer moments are stored as tensors named ``adam.m/<param>`` and
``adam.v/<param>`` so training can resume.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data.trajectory import NormStats
from .errors import DataError, ExtentError, IntegrityError
from .model import ModelConfig, TrajectoryModel
from .training import OptimizerState

MAGIC = b"VTRJCKPT"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    model: TrajectoryModel
    stats: NormStats
    vocab: list[str] = field(default_factory=list)
    train: dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("inf")
    optimizer: OptimizerState | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def _tensors(ck: Checkpoint) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in ck.model.params.items()}
    if ck.optimizer is not None:
        for name in ck.optimizer.m:
            out[f"adam.m/{name}"] = ck.optimizer.m[name]
            out[f"adam.v/{name}"] = ck.optimizer.v[name]
    return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in _tensors(ck).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    opt = None
    if ck.optimizer is not None:
        o = ck.optimizer
        opt = {"lr": o.lr, "weight_decay": o.weight_decay, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
    header = {
        "tensors": table,
        "model": ck.model.config.to_dict(),
        "norm": ck.stats.to_dict(),
        "vocab": list(ck.vocab),
        "train": ck.train,
        "epoch": ck.epoch,
        "best_val_loss": ck.best_val_loss if np.isfinite(ck.best_val_loss) else None,
        "optimizer": opt,
        "extra": ck.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ck: Checkpoint, path: Path | str) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path: Path | str, expect_vocab: list[str] | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    ``expect_vocab`` guards against pairing a labeled model with a dataset
    whose intention classes differ.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if len(blob) < 20 + _DIGEST:
        raise IntegrityError(f"{path}: truncated checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or corrupted)")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != VERSION:
        raise ExtentError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    header = json.loads(body[20 : 20 + hlen].decode("utf-8"))
    payload = memoryview(body)[20 + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise IntegrityError(f"{path}: tensor {entry['name']} extends past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[lo : lo + n], dtype="<f8").reshape(entry["shape"]).copy()
    config = ModelConfig(**header["model"])
    vocab = list(header["vocab"])
    if config.n_intents != len(vocab):
        raise ExtentError(
            f"{path}: model expects {config.n_intents} intention classes but the stored vocabulary has {len(vocab)}"
        )
    if expect_vocab is not None and list(expect_vocab) != vocab:
        raise ExtentError(
            f"intention vocabulary mismatch: checkpoint {vocab} vs dataset {list(expect_vocab)}"
        )
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model = TrajectoryModel.from_arrays(config, params)
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["step"])
        for k, v in arrays.items():
            if k.startswith("adam.m/"):
                opt.m[k[7:]] = v
            elif k.startswith("adam.v/"):
                opt.v[k[7:]] = v
    best = header["best_val_loss"]
    return Checkpoint(
        model,
        NormStats.from_dict(header["norm"]),
        vocab,
        header["train"],
        header["epoch"],
        float("inf") if best is None else best,
        opt,
        header.get("extra", {}),
    )
