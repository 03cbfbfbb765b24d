"""Named parameter collections, SGD, and the checkpoint wire format.

Checkpoints are a text manifest (one ``path=dim,dim,...`` line per parameter)
next to a flat little-endian float64 payload laid out in manifest order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class ParamSet:
    params: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self.params:
            raise ValueError(f"duplicate parameter path {path!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {path!r} must have requires_grad")
        self.params[path] = tensor
        return tensor

    def merge(self, other: Mapping[str, Tensor], prefix: str = "") -> None:
        for path, tensor in other.items():
            self.add(prefix + path, tensor)

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def clear_grads(self) -> None:
        for tensor in self.params.values():
            tensor.clear_grad()

    def checksum(self) -> float:
        """Cheap change detector over all parameter values."""
        total = 0.0
        for path in sorted(self.params):
            total += float(np.abs(self.params[path].values).sum())
        return total


def clip_gradients(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm. A nonpositive ``max_norm`` disables clipping.
    """
    total = 0.0
    for tensor in params.tensors():
        if tensor.grad is not None:
            total += float((tensor.grad ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for tensor in params.tensors():
            if tensor.grad is not None:
                tensor.grad *= factor
    return norm


def sgd_step(params: ParamSet, learning_rate: float,
             weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + wd * p) for every parameter, then clear grads."""
    if learning_rate <= 0.0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    if weight_decay < 0.0:
        raise ValueError(f"weight decay must be nonnegative, got {weight_decay}")
    for path, tensor in params.items():
        if tensor.grad is None:
            raise ValueError(f"sgd_step: missing gradient on parameter {path!r}")
    for _, tensor in params.items():
        tensor.values -= learning_rate * (tensor.grad + weight_decay * tensor.values)
        tensor.clear_grad()
    params.step += 1


def save_params(tensors: Mapping[str, Tensor], stem: str | Path) -> None:
    """Write ``<stem>.manifest`` and ``<stem>.bin`` in sorted-path order."""
    stem = Path(stem)
    paths = sorted(tensors)
    lines = []
    chunks = []
    for path in paths:
        tensor = tensors[path]
        dims = ",".join(str(d) for d in tensor.shape)
        lines.append(f"{path}={dims}")
        chunks.append(np.ascontiguousarray(tensor.values, dtype="<f8").ravel())
    stem.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    stem.with_suffix(".bin").write_bytes(payload.tobytes())


def load_params(stem: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back; reject manifest/payload mismatches cleanly."""
    stem = Path(stem)
    manifest = stem.with_suffix(".manifest").read_text().splitlines()
    payload = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for line in manifest:
        if not line.strip():
            continue
        path, _, dims = line.partition("=")
        shape = tuple(int(d) for d in dims.split(",") if d != "")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if offset + count > payload.size:
            raise ValueError(
                f"checkpoint payload ends inside parameter {path!r} "
                f"(needed {count} values at offset {offset}, have {payload.size})")
        arrays[path] = payload[offset:offset + count].reshape(shape).copy()
        offset += count
    if offset != payload.size:
        raise ValueError(
            f"checkpoint payload has {payload.size - offset} trailing values "
            "beyond the manifest")
    return arrays


def restore_params(tensors: Mapping[str, Tensor], stem: str | Path) -> None:
    """Load values into an existing collection, verifying paths and shapes."""
    arrays = load_params(stem)
    for path, tensor in tensors.items():
        if path not in arrays:
            raise ValueError(f"checkpoint is missing parameter {path!r}")
        if arrays[path].shape != tensor.shape:
            raise ValueError(
                f"checkpoint shape {arrays[path].shape} for {path!r} does not "
                f"match expected {tensor.shape}")
        tensor.values[...] = arrays[path]
    extra = set(arrays) - set(tensors)
    if extra:
        raise ValueError(f"checkpoint has unexpected parameter {sorted(extra)[0]!r}")
