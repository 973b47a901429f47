"""Reading and writing drone-style vehicle track CSV files.

The column layout is the common one for recorded intersection traffic:
``track_id, frame_id, timestamp_ms, agent_type, x, y, vx, vy, psi_rad,
length, width``. Only ``track_id, frame_id, timestamp_ms, agent_type, x, y``
are required. Missing velocity columns are filled by finite differences
over the timestamps; a missing heading column by the velocity direction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError, ParseError
from ..sequence import AgentTrack

COLUMNS = ("track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y", "vx", "vy", "psi_rad", "length", "width")
REQUIRED = ("track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y")
TYPE_CODES = {"car": 0, "pedestrian/bicycle": 1}


@dataclass(frozen=True)
class TrackRecord:
    track_id: int
    frame_id: int
    timestamp_ms: int
    agent_type: str
    x: float
    y: float
    vx: float
    vy: float
    psi_rad: float
    length: float
    width: float


@dataclass
class Track:
    """All frames of one track, sorted by frame."""

    track_id: int
    agent_type: str
    frames: np.ndarray  # (k,)
    timestamp_ms: np.ndarray  # (k,)
    position: np.ndarray  # (k, 2)
    velocity: np.ndarray  # (k, 2)
    heading: np.ndarray  # (k,)
    length: np.ndarray  # (k,)
    width: np.ndarray  # (k,)

    def __len__(self):
        return len(self.frames)

    def records(self):
        for i in range(len(self)):
            yield TrackRecord(
                self.track_id, int(self.frames[i]), int(self.timestamp_ms[i]), self.agent_type,
                float(self.position[i, 0]), float(self.position[i, 1]),
                float(self.velocity[i, 0]), float(self.velocity[i, 1]), float(self.heading[i]),
                float(self.length[i]), float(self.width[i]),
            )


def _parse(value, kind, name, line):
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ParseError(f"column {name}: cannot parse {value!r}", line) from None
    if kind is float and not np.isfinite(out):
        raise ParseError(f"column {name}: non-finite value {value!r}", line)
    return out


def _fd_velocity(t_s, pos):
    if len(t_s) < 2:
        return np.zeros_like(pos)
    return np.stack([np.gradient(pos[:, d], t_s) for d in range(pos.shape[1])], axis=1)


def load_tracks_csv(path) -> dict:
    """Load tracks keyed by ``track_id`` (ascending). Raises
    :class:`ParseError` with the 1-based line number on bad input."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", 1)
        col = {name: header.index(name) for name in COLUMNS if name in header}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            tid = _parse(row[col["track_id"]], int, "track_id", line)
            frame = _parse(row[col["frame_id"]], int, "frame_id", line)
            entry = rows.setdefault(tid, {"type": row[col["agent_type"]].strip(), "data": []})
            if entry["data"] and frame <= entry["data"][-1][0]:
                raise ParseError(f"track {tid}: frame {frame} does not increase", line)
            values = [frame, _parse(row[col["timestamp_ms"]], int, "timestamp_ms", line)]
            for name in ("x", "y", "vx", "vy", "psi_rad", "length", "width"):
                values.append(_parse(row[col[name]], float, name, line) if name in col else np.nan)
            entry["data"].append(values)

    tracks = {}
    for tid in sorted(rows):
        d = np.array(rows[tid]["data"], dtype=float)
        ts = d[:, 1].astype(np.int64)
        pos = d[:, 2:4]
        vel = d[:, 4:6] if {"vx", "vy"} <= col.keys() else _fd_velocity(ts / 1000.0, pos)
        heading = d[:, 6] if "psi_rad" in col else np.arctan2(vel[:, 1], vel[:, 0])
        tracks[tid] = Track(
            tid, rows[tid]["type"], d[:, 0].astype(np.int64), ts, pos, vel, heading,
            np.nan_to_num(d[:, 7]), np.nan_to_num(d[:, 8]),
        )
    return tracks


def write_tracks_csv(path, tracks):
    """Write tracks (a dict or iterable of :class:`Track`) with lossless floats."""
    items = tracks.values() if isinstance(tracks, dict) else tracks
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for tr in items:
            for r in tr.records():
                w.writerow([r.track_id, r.frame_id, r.timestamp_ms, r.agent_type]
                           + [repr(getattr(r, c)) for c in COLUMNS[4:]])


def episode_to_tracks(ep, dt, length=4.5, width=1.8) -> dict:
    """Convert a simulated episode to tracks; ids and frames start at 1."""
    out = {}
    for a in range(ep.n_agents):
        frames = np.flatnonzero(ep.present[:, a])
        if frames.size == 0:
            continue
        k = len(frames)
        out[a + 1] = Track(
            a + 1, "car", frames + 1, np.round(frames * dt * 1000).astype(np.int64),
            ep.pos[frames, a].copy(), ep.vel[frames, a].copy(), np.full(k, ep.heading[a]),
            np.full(k, length), np.full(k, width),
        )
    return out


def window(tracks, frame, t_max) -> list:
    """Agent histories over frames ``frame - t_max + 1 .. frame`` on local
    steps ``0 .. t_max - 1``, for :func:`respcvae.sequence.flatten_scene`."""
    if t_max < 1:
        raise InvalidInputError("t_max must be >= 1")
    start = frame - t_max + 1
    out = []
    items = tracks.values() if isinstance(tracks, dict) else tracks
    for tr in items:
        sel = (tr.frames >= start) & (tr.frames <= frame)
        if not sel.any():
            continue
        out.append(AgentTrack(
            tr.track_id, TYPE_CODES.get(tr.agent_type, 2), tr.frames[sel] - start,
            tr.position[sel], tr.velocity[sel], tr.heading[sel],
        ))
    return out
