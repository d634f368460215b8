"""Checkpoint format: one directory per checkpoint.

    <path>/manifest.json   format_version, phase, config echo, train state,
                           per-blob content digests, overall content hash
    <path>/weights.pt      current + best-so-far model weights, RNG states
    <path>/optimizer.pt    optimizer state dict

Content hashes are digests of tensor *contents* (name/dtype/shape/bytes), not
of the serialized files, so save -> load -> save reproduces the identical
hash. Writes are atomic (temp dir, then rename swap). Loading never modifies
the checkpoint; any unreadable blob or digest mismatch is a CorruptionError.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor

from .errors import CorruptionError, FormatError

FORMAT_VERSION = 1


def _digest_update(h, obj) -> None:
    if isinstance(obj, Tensor):
        h.update(b"tensor")
        h.update(str(obj.dtype).encode())
        h.update(str(tuple(obj.shape)).encode())
        h.update(obj.detach().cpu().contiguous().numpy().tobytes())
    elif isinstance(obj, dict):
        h.update(b"dict")
        for key in sorted(obj, key=repr):
            h.update(repr(key).encode())
            _digest_update(h, obj[key])
    elif isinstance(obj, (list, tuple)):
        h.update(b"seq")
        for item in obj:
            _digest_update(h, item)
    elif isinstance(obj, bytes):
        h.update(b"bytes")
        h.update(obj)
    else:
        h.update(repr(obj).encode())


def object_digest(obj: Any) -> str:
    """Deterministic sha256 over a nested structure of tensors and scalars."""
    h = hashlib.sha256()
    _digest_update(h, obj)
    return h.hexdigest()


def capture_rng_state() -> dict:
    """Global torch/numpy/python RNG states, JSON-serializable."""
    np_name, np_keys, np_pos, np_has_gauss, np_cached = np.random.get_state()
    return {
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        "numpy": {
            "name": np_name,
            "keys": base64.b64encode(np.asarray(np_keys).tobytes()).decode(),
            "pos": int(np_pos),
            "has_gauss": int(np_has_gauss),
            "cached_gaussian": float(np_cached),
        },
        "python": json.loads(json.dumps(random.getstate())),
    }


def restore_rng_state(state: dict) -> None:
    raw = base64.b64decode(state["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    np_state = state["numpy"]
    keys = np.frombuffer(base64.b64decode(np_state["keys"]), dtype=np.uint32).copy()
    np.random.set_state(
        (np_state["name"], keys, np_state["pos"], np_state["has_gauss"],
         np_state["cached_gaussian"])
    )
    py = state["python"]
    random.setstate((py[0], tuple(py[1]), py[2]))


@dataclass
class Checkpoint:
    """In-memory checkpoint: everything needed to resume training exactly."""

    phase: str
    config: dict
    train_state: dict
    weights: dict[str, dict]  # role -> state_dict (e.g. student, decoder)
    best_weights: dict[str, dict]
    optimizer_state: dict
    rng_state: dict = field(default_factory=capture_rng_state)
    format_version: int = FORMAT_VERSION

    @property
    def content_hash(self) -> str:
        return object_digest({
            "format_version": self.format_version,
            "phase": self.phase,
            "config": self.config,
            "train_state": self.train_state,
            "weights": self.weights,
            "best_weights": self.best_weights,
            "optimizer": self.optimizer_state,
        })


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        torch.save(
            {
                "weights": checkpoint.weights,
                "best_weights": checkpoint.best_weights,
                "rng_state": checkpoint.rng_state,
            },
            tmp / "weights.pt",
        )
        torch.save(checkpoint.optimizer_state, tmp / "optimizer.pt")
        manifest = {
            "format_version": checkpoint.format_version,
            "phase": checkpoint.phase,
            "config": checkpoint.config,
            "train_state": checkpoint.train_state,
            "digests": {
                "weights": object_digest(checkpoint.weights),
                "best_weights": object_digest(checkpoint.best_weights),
                "optimizer": object_digest(checkpoint.optimizer_state),
            },
            "content_hash": checkpoint.content_hash,
        }
        with open(tmp / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if path.exists():
            old = path.with_name(f"{path.name}.old-{os.getpid()}")
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CorruptionError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable checkpoint manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {version!r}")

    def _load_blob(name: str):
        try:
            return torch.load(path / name, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CorruptionError(f"cannot read checkpoint blob {path / name}: {exc}") from exc

    blob = _load_blob("weights.pt")
    optimizer_state = _load_blob("optimizer.pt")
    digests = manifest["digests"]
    checks = [
        ("weights", blob["weights"]),
        ("best_weights", blob["best_weights"]),
        ("optimizer", optimizer_state),
    ]
    for name, obj in checks:
        if object_digest(obj) != digests[name]:
            raise CorruptionError(f"checkpoint blob {name!r} does not match its stored digest")
    ckpt = Checkpoint(
        phase=manifest["phase"],
        config=manifest["config"],
        train_state=manifest["train_state"],
        weights=blob["weights"],
        best_weights=blob["best_weights"],
        optimizer_state=optimizer_state,
        rng_state=blob["rng_state"],
        format_version=version,
    )
    if ckpt.content_hash != manifest["content_hash"]:
        raise CorruptionError("checkpoint content hash mismatch")
    return ckpt
