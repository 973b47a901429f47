"""In-memory datasets of (scene, control) pairs and their archive format.

Every datum is one scene at its final time step: a padded token history,
the current positions and velocities, the desired controls and the
observed controls. All fields are stacked arrays with a leading datum
axis.

Archive format (schema 1): a zip file holding ``meta.json`` (generator
config, seed, counts, schema version) and one ``.npy`` member per field.
Evaluation-only ground truth lives under ``truth/`` and is loaded into
``Dataset.truth``, never into the training fields.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..nn.params import write_zip

SCHEMA_VERSION = 1
FIELDS = ("tokens", "valid", "pos", "vel", "agent_valid", "u_des", "u", "episode", "agent_ids")


@dataclass
class Dataset:
    tokens: np.ndarray  # (K, T, N, F)
    valid: np.ndarray  # (K, T, N)
    pos: np.ndarray  # (K, N, 2)
    vel: np.ndarray  # (K, N, 2)
    agent_valid: np.ndarray  # (K, N)
    u_des: np.ndarray  # (K, N, 2)
    u: np.ndarray  # (K, N, 2)
    episode: np.ndarray  # (K,)
    agent_ids: np.ndarray  # (K, N), -1 for empty slots
    meta: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        K = len(self.tokens)
        for name in FIELDS:
            if len(getattr(self, name)) != K:
                raise InvalidInputError(f"field {name} has {len(getattr(self, name))} rows, expected {K}")
        av = self.agent_valid[..., None]
        if not (np.all(np.isfinite(np.where(av, self.u, 0.0))) and np.all(np.isfinite(np.where(av, self.u_des, 0.0)))):
            raise InvalidInputError("controls must be finite for valid agents")

    def __len__(self):
        return len(self.tokens)

    @property
    def n_agents(self):
        return self.pos.shape[1]

    @property
    def t_max(self):
        return self.tokens.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        kw = {name: getattr(self, name)[idx] for name in FIELDS}
        truth = {k: v[idx] for k, v in self.truth.items()}
        return Dataset(**kw, meta=dict(self.meta), truth=truth)

    def split_by_episode(self, train_fraction=0.8, rng=None):
        """Random split of whole episodes; returns ``(train, test)``."""
        eps = np.unique(self.episode)
        rng = np.random.default_rng(0) if rng is None else rng
        eps = rng.permutation(eps)
        n_train = int(round(train_fraction * len(eps)))
        train_eps = np.isin(self.episode, eps[:n_train])
        return self.take(np.flatnonzero(train_eps)), self.take(np.flatnonzero(~train_eps))

    @staticmethod
    def concat(parts):
        kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in FIELDS}
        truth = {}
        if parts and parts[0].truth:
            truth = {k: np.concatenate([p.truth[k] for p in parts]) for k in parts[0].truth}
        return Dataset(**kw, meta=dict(parts[0].meta) if parts else {}, truth=truth)


def _npy(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_dataset(path, ds: Dataset):
    meta = {"schema_version": SCHEMA_VERSION, "count": len(ds), **ds.meta}
    members = {"meta.json": json.dumps(meta, sort_keys=True, indent=1, default=_json_default).encode()}
    for name in FIELDS:
        members[f"{name}.npy"] = _npy(getattr(ds, name))
    for name, arr in sorted(ds.truth.items()):
        members[f"truth/{name}.npy"] = _npy(arr)
    write_zip(path, members)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def load_dataset(path) -> Dataset:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise InvalidInputError(f"{path}: unsupported dataset schema {meta.get('schema_version')}")
        arrays, truth = {}, {}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            if name.startswith("truth/"):
                truth[name[len("truth/") : -4]] = arr
            else:
                arrays[name[:-4]] = arr
    missing = [f for f in FIELDS if f not in arrays]
    if missing:
        raise InvalidInputError(f"{path}: missing fields {missing}")
    meta.pop("schema_version")
    meta.pop("count", None)
    return Dataset(**{f: arrays[f] for f in FIELDS}, meta=meta, truth=truth)
