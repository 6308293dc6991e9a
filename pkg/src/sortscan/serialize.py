"""On-disk formats: single tensors and named-tensor checkpoints.

Tensor file layout (documented contract):
    line 1 (ASCII, newline-terminated):
        "sortscan-tensor 1 <dtype> <ndim> <d0> <d1> ..."
        where dtype is "float32" or "float64"
    then the raw little-endian row-major element bytes.

Checkpoint layout: a directory holding ``manifest.txt`` plus one tensor
file per entry. Manifest lines before the blank separator are
"<key>=<value>" metadata; after it, one "<name> <file> <dtype> <shape...>"
line per tensor, in insertion order.
"""

from __future__ import annotations

import os

import numpy as np

_MAGIC = "sortscan-tensor"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def save_tensor(path: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    name = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}.get(arr.dtype)
    if name is None:
        raise ValueError(f"save_tensor: unsupported dtype {arr.dtype}")
    header = f"{_MAGIC} 1 {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(arr.astype(_DTYPES[name]).tobytes())


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip().split()
        if len(header) < 4 or header[0] != _MAGIC or header[1] != "1":
            raise ValueError(f"load_tensor: bad header in {path}")
        dtype_name, ndim = header[2], int(header[3])
        shape = tuple(int(d) for d in header[4:4 + ndim])
        if dtype_name not in _DTYPES:
            raise ValueError(f"load_tensor: unknown dtype {dtype_name}")
        raw = fh.read()
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype_name]).reshape(shape)
    return np.ascontiguousarray(arr).astype(dtype_name)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    lines = [f"{k}={v}" for k, v in (meta or {}).items()]
    lines.append("")
    for i, (name, arr) in enumerate(tensors.items()):
        fname = f"{i:04d}.tsr"
        save_tensor(os.path.join(path, fname), arr)
        dtype_name = "float64" if arr.dtype == np.float64 else "float32"
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {fname} {dtype_name} {shape}".rstrip())
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(os.path.join(path, "manifest.txt")) as fh:
        raw = fh.read().splitlines()
    split = raw.index("")
    meta = dict(line.split("=", 1) for line in raw[:split])
    tensors: dict[str, np.ndarray] = {}
    for line in raw[split + 1:]:
        if not line:
            continue
        parts = line.split()
        name, fname = parts[0], parts[1]
        tensors[name] = load_tensor(os.path.join(path, fname))
    return tensors, meta
