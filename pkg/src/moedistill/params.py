"""Named parameter stores and checkpoint serialization.

Models in this package are plain functions over a :class:`ParamStore`, an
ordered name -> tensor mapping. Keeping parameters out of stateful module
objects makes it straightforward to build updated parameter sets that stay
differentiable with respect to the originals (needed for bi-level training)
and to hash/serialize model state exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Callable, Iterator, Mapping

import numpy as np
import torch

_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}
_NAMES_DTYPE = {v: k for k, v in _DTYPE_NAMES.items()}


class ParamStore:
    """Ordered mapping of parameter name -> tensor, all of one float dtype.

    Shapes and names are fixed at construction; "mutation" means building a
    new store (or assigning into the existing tensors via an optimizer that
    owns them). Flatten/unflatten round-trips exactly.
    """

    def __init__(self, entries: Mapping[str, torch.Tensor]):
        if len(entries) == 0:
            self._entries: dict[str, torch.Tensor] = {}
            self._dtype = torch.float32
            return
        dtypes = {t.dtype for t in entries.values()}
        if len(dtypes) != 1:
            raise ValueError(f"mixed dtypes in ParamStore: {sorted(map(str, dtypes))}")
        dtype = dtypes.pop()
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
        self._entries = dict(entries)
        self._dtype = dtype

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._entries.items())

    def tensors(self) -> list[torch.Tensor]:
        return list(self._entries.values())

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def flatten(self) -> torch.Tensor:
        """Concatenate all entries into one 1-D tensor (fixed name order)."""
        if not self._entries:
            return torch.zeros(0, dtype=self._dtype)
        return torch.cat([t.reshape(-1) for t in self._entries.values()])

    def unflatten(self, flat: torch.Tensor) -> "ParamStore":
        """Inverse of :meth:`flatten`, using this store's names and shapes."""
        if flat.numel() != self.num_params:
            raise ValueError(f"expected {self.num_params} values, got {flat.numel()}")
        out, offset = {}, 0
        for name, t in self._entries.items():
            n = t.numel()
            out[name] = flat[offset : offset + n].reshape(t.shape)
            offset += n
        return ParamStore(out)

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamStore":
        return ParamStore({name: fn(t) for name, t in self._entries.items()})

    def detach(self) -> "ParamStore":
        return self.map(lambda t: t.detach())

    def clone(self) -> "ParamStore":
        return self.map(lambda t: t.clone())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return self.map(lambda t: t.to(dtype))

    def requires_grad_(self, flag: bool = True) -> "ParamStore":
        for t in self._entries.values():
            t.requires_grad_(flag)
        return self

    def as_leaves(self) -> "ParamStore":
        """Detached copies set up as autograd leaves (for optimizers)."""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def equal(self, other: "ParamStore") -> bool:
        """Bit-exact equality of names, shapes, and values."""
        if self.names != other.names:
            return False
        return all(torch.equal(a, other[n]) for n, a in self._entries.items())

    def allclose(self, other: "ParamStore", rtol: float = 1e-5, atol: float = 1e-8) -> bool:
        if self.names != other.names:
            return False
        return all(torch.allclose(a, other[n], rtol=rtol, atol=atol) for n, a in self._entries.items())

    def state_hash(self) -> str:
        """SHA-256 over names, shapes, and little-endian raw bytes."""
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            arr = t.detach().cpu().numpy()
            h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} entries, {self.num_params} params, {_DTYPE_NAMES.get(self._dtype)})"


def store_from_arrays(arrays: Mapping[str, np.ndarray], dtype: torch.dtype = torch.float32) -> ParamStore:
    return ParamStore({name: torch.as_tensor(a, dtype=dtype) for name, a in arrays.items()})


def _blob_name(store_key: str, index: int) -> str:
    return f"{store_key}__{index:04d}.bin"


def save_checkpoint(path: str, stores: Mapping[str, ParamStore], extra: dict | None = None) -> None:
    """Write a checkpoint directory: manifest.json plus one raw blob per array.

    Blobs are row-major little-endian; the manifest records name, shape, and
    dtype for each array so the directory is self-describing.
    """
    os.makedirs(path, exist_ok=True)
    manifest: dict = {"format_version": 1, "stores": {}, "extra": extra or {}}
    for key, store in stores.items():
        entries = []
        for i, (name, t) in enumerate(store.items()):
            blob = _blob_name(key, i)
            arr = t.detach().cpu().numpy()
            arr.astype(arr.dtype.newbyteorder("<"), copy=False).tofile(os.path.join(path, blob))
            entries.append(
                {"name": name, "file": blob, "shape": list(t.shape), "dtype": _DTYPE_NAMES[t.dtype]}
            )
        manifest["stores"][key] = entries
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, ParamStore], dict]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    stores: dict[str, ParamStore] = {}
    for key, entries in manifest["stores"].items():
        tensors = {}
        for e in entries:
            np_dtype = np.dtype(e["dtype"]).newbyteorder("<")
            arr = np.fromfile(os.path.join(path, e["file"]), dtype=np_dtype)
            arr = arr.reshape(e["shape"]).astype(e["dtype"])
            tensors[e["name"]] = torch.from_numpy(arr)
        stores[key] = ParamStore(tensors)
    return stores, manifest.get("extra", {})


def checkpoint_hash(path: str) -> str:
    """SHA-256 over the manifest and every blob it references, in order."""
    with open(os.path.join(path, "manifest.json"), "rb") as f:
        raw_manifest = f.read()
    h = hashlib.sha256(raw_manifest)
    manifest = json.loads(raw_manifest)
    for key in sorted(manifest["stores"]):
        for e in manifest["stores"][key]:
            with open(os.path.join(path, e["file"]), "rb") as f:
                h.update(f.read())
    return h.hexdigest()
