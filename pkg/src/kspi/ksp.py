"""KSP tensor container and checkpoint directories.

A .ksp file is: magic "KSP1" | rank u32 LE | dims rank*u64 LE | dtype u32 LE
(0 = float32 LE) | row-major payload. A checkpoint is a directory with a
manifest.json (config echo, stage count, tensor name -> file map, format
version, optional training state) plus one .ksp per named tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

KSP_MAGIC = b"KSP1"
DTYPE_FLOAT32 = 0
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def write_ksp(path, array: np.ndarray) -> None:
    """Write an array as a float32 KSP tensor file."""
    arr = np.asarray(array, dtype=np.float32, order="C")
    with open(path, "wb") as fh:
        fh.write(KSP_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<I", DTYPE_FLOAT32))
        fh.write(arr.tobytes())


def read_ksp(path) -> np.ndarray:
    """Read a KSP tensor file back as a float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != KSP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {KSP_MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        (dtype_code,) = struct.unpack("<I", fh.read(4))
        if dtype_code != DTYPE_FLOAT32:
            raise ValueError(f"{path}: unknown dtype code {dtype_code}")
        expected = int(np.prod(dims, dtype=np.int64)) * 4
        payload = fh.read()
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _tensor_filename(index: int) -> str:
    return f"tensors/t{index:05d}.ksp"


def save_tensor_dir(directory, tensors: dict[str, np.ndarray], manifest_extra: dict) -> None:
    """Write a manifest + named-tensor directory."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    name_map = {}
    for i, (name, arr) in enumerate(tensors.items()):
        rel = _tensor_filename(i)
        write_ksp(directory / rel, arr)
        name_map[name] = rel
    manifest = {"format_version": FORMAT_VERSION, "tensors": name_map}
    manifest.update(manifest_extra)
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_manifest(directory) -> dict:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{directory}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_tensor_dir(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read back all named tensors plus the manifest."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    tensors = {}
    for name, rel in manifest["tensors"].items():
        path = directory / rel
        if not path.is_file():
            raise FileNotFoundError(f"manifest entry {name!r} points to missing file {path}")
        tensors[name] = read_ksp(path)
    return tensors, manifest
