"""Flat parameter storage and the checkpoint file format.

All trainable parameters live in one float64 vector; each named entry is a
contiguous slice with a shape. The optimiser only ever sees the flat
vector.

Checkpoint format (version 1): a zip archive holding

* ``params.npy``  - the flat vector (numpy ``.npy`` format),
* ``meta.json``   - ``{"format": "respcvae-checkpoint", "version": 1,
  "slices": [[name, offset, shape], ...], "extra": {...}}``,
* optional further ``*.npy`` members (e.g. optimiser moments).

Members are written with a fixed timestamp so identical content gives
identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict

import numpy as np

from ..errors import CheckpointVersionError
from . import autodiff as ad

CHECKPOINT_FORMAT = "respcvae-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ParamStore:
    def __init__(self):
        self.flat = np.zeros(0)
        self.slices: "OrderedDict[str, tuple[int, tuple]]" = OrderedDict()

    def add(self, name, value):
        if name in self.slices:
            raise KeyError(f"parameter {name!r} already defined")
        value = np.asarray(value, dtype=np.float64)
        self.slices[name] = (self.flat.size, value.shape)
        self.flat = np.concatenate([self.flat, value.reshape(-1)])

    def __contains__(self, name):
        return name in self.slices

    def __len__(self):
        return self.flat.size

    def names(self):
        return list(self.slices)

    def get(self, name):
        off, shape = self.slices[name]
        return self.flat[off : off + int(np.prod(shape, dtype=int))].reshape(shape)

    def set(self, name, value):
        off, shape = self.slices[name]
        self.flat[off : off + int(np.prod(shape, dtype=int))] = np.asarray(value, dtype=float).reshape(-1)

    def arrays(self):
        return {name: self.get(name) for name in self.slices}

    def leaves(self):
        """Fresh autodiff leaves for every entry (one graph per call)."""
        return {name: ad.param(self.get(name).copy()) for name in self.slices}

    def gather_grad(self, leaves):
        g = np.zeros_like(self.flat)
        for name, (off, shape) in self.slices.items():
            leaf = leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                g[off : off + leaf.grad.size] = leaf.grad.reshape(-1)
        return g

    def copy(self):
        out = ParamStore()
        out.flat = self.flat.copy()
        out.slices = OrderedDict(self.slices)
        return out

    def with_flat(self, flat):
        out = self.copy()
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.flat.shape:
            raise ValueError("flat vector has the wrong size")
        out.flat = flat.copy()
        return out

    def check_layout(self, other):
        return list(self.slices.items()) == list(other.slices.items())


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_zip(path, members):
    """Write ``{name: bytes}`` deterministically."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in members:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def save_checkpoint(path, store: ParamStore, extra=None, arrays=None):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "slices": [[name, off, list(shape)] for name, (off, shape) in store.slices.items()],
        "extra": extra or {},
    }
    members = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode(), "params.npy": _npy_bytes(store.flat)}
    for key, arr in (arrays or {}).items():
        members[f"{key}.npy"] = _npy_bytes(np.asarray(arr))
    write_zip(path, members)


def load_checkpoint(path):
    """Return ``(store, extra, arrays)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
                f"found {meta.get('format')} v{meta.get('version')}"
            )
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    store = ParamStore()
    store.flat = arrays.pop("params")
    for name, off, shape in meta["slices"]:
        store.slices[name] = (int(off), tuple(shape))
    return store, meta["extra"], arrays
