"""Flat binary dump of a network's parameters and batch-norm running statistics.

Layout: a little-endian uint64 count, then that many little-endian float64
values. Parameters come first in registration order, each flattened
row-major; then every batch-norm layer's running mean and running variance
in module order.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from shakedrop.nn import BatchNorm2d, Module


def _buffers(network: Module) -> list[np.ndarray]:
    arrays = [p.data for p in network.parameters()]
    for m in network.modules():
        if isinstance(m, BatchNorm2d):
            arrays += [m.state.running_mean, m.state.running_var]
    return arrays


def flatten_state(network: Module) -> np.ndarray:
    arrays = _buffers(network)
    if not arrays:
        return np.zeros(0, dtype="<f8")
    return np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in arrays])


def save_params(network: Module, path: Union[str, Path]) -> None:
    flat = flatten_state(network)
    with open(path, "wb") as fh:
        fh.write(np.uint64(flat.size).astype("<u8").tobytes())
        fh.write(flat.tobytes())


def load_params(network: Module, path: Union[str, Path]) -> None:
    """Restore values written by :func:`save_params` into a network of the same shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError("params file too short for its count header")
    count = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if len(raw) != 8 + 8 * count:
        raise ValueError(f"params file holds {(len(raw) - 8) / 8:g} values, header says {count}")
    flat = np.frombuffer(raw[8:], dtype="<f8")
    expected = sum(a.size for a in _buffers(network))
    if count != expected:
        raise ValueError(f"params file has {count} values, network needs {expected}")
    offset = 0
    for p in network.parameters():
        p.data = flat[offset:offset + p.size].reshape(p.shape).astype(p.dtype)
        offset += p.size
    for m in network.modules():
        if isinstance(m, BatchNorm2d):
            for name in ("running_mean", "running_var"):
                cur = getattr(m.state, name)
                setattr(m.state, name, flat[offset:offset + cur.size].reshape(cur.shape).astype(cur.dtype))
                offset += cur.size
