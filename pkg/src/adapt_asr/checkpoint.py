"""Checkpoint container, top-k selection and parameter averaging.

On disk a checkpoint is a safetensors file: an 8-byte header length, a JSON
header, then raw little-endian arrays. Our metadata is stored as one JSON
string under the ``adapt_asr`` header key.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

META_KEY = "adapt_asr"


class CheckpointError(ValueError):
    pass


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", **metadata) -> "Checkpoint":
        params = {
            k: v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()
            if k.startswith(prefix)
        }
        return cls(params, dict(metadata))

    def load_into(self, module: torch.nn.Module, strict: bool = True) -> None:
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        module.load_state_dict(state, strict=strict)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))

    @property
    def dev_metric(self) -> float:
        return float(self.metadata.get("dev_metric", math.nan))

    @property
    def config_hash(self):
        return self.metadata.get("config_hash")

    def digest(self) -> str:
        return params_digest(self.params)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dev = self.metadata.get("dev_metric")
        if dev is not None and not math.isfinite(dev):
            raise CheckpointError(f"refusing to save checkpoint with non-finite dev_metric {dev}")
        tensors = {k: np.ascontiguousarray(v) for k, v in self.params.items()}
        save_file(tensors, str(path), metadata={META_KEY: json.dumps(self.metadata, sort_keys=True)})
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no checkpoint at {path}")
        with safe_open(str(path), framework="numpy") as f:
            meta = json.loads((f.metadata() or {}).get(META_KEY, "{}"))
        return cls(dict(load_file(str(path))), meta)


def select_topk_by_dev(store: Sequence[Checkpoint], k: int) -> list[Checkpoint]:
    """The ``k`` checkpoints with lowest dev metric; ties go to the earlier step."""
    if k < 1:
        raise CheckpointError("k must be positive")
    if len(store) < k:
        raise CheckpointError(f"requested top-{k} checkpoints, store has {len(store)}")
    return sorted(store, key=lambda c: (c.dev_metric, c.step))[:k]


def average_checkpoints(ckpts: Iterable[Checkpoint]) -> Checkpoint:
    """Elementwise mean of every parameter.

    Values are sorted across checkpoints before summation in float64, so the
    result does not depend on input order. Integer tensors are taken from the
    first checkpoint.
    """
    ckpts = list(ckpts)
    if not ckpts:
        raise CheckpointError("cannot average an empty checkpoint list")
    ref = ckpts[0]
    for c in ckpts[1:]:
        if c.config_hash != ref.config_hash:
            raise CheckpointError(f"config hash mismatch: {c.config_hash} vs {ref.config_hash}")
        if set(c.params) != set(ref.params):
            missing = sorted(set(c.params) ^ set(ref.params))
            raise CheckpointError(f"parameter name mismatch: {missing[:5]}")
    out = {}
    for name, arr in ref.params.items():
        if not np.issubdtype(arr.dtype, np.floating):
            out[name] = arr.copy()
            continue
        stack = np.stack([c.params[name] for c in ckpts]).astype(np.float64)
        if stack.shape[1:] != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        out[name] = (np.sort(stack, axis=0).sum(axis=0) / len(ckpts)).astype(arr.dtype)
    meta = {k: v for k, v in ref.metadata.items() if k not in ("dev_metric", "step", "epoch")}
    meta["averaged_from_steps"] = sorted(c.step for c in ckpts)
    meta["step"] = max(c.step for c in ckpts)
    devs = [c.dev_metric for c in ckpts if math.isfinite(c.dev_metric)]
    if devs:
        meta["dev_metric"] = float(np.mean(devs))
    return Checkpoint(out, meta)
