"""Scripted four-way crossing used as a stand-in for recorded traffic.

Cars spawn on the four approach arms at random times and drive straight
through the crossing in right-hand lanes. Each car tracks its own preferred
speed with a proportional policy, keeps its
distance to a leader in its lane, and yields at the stop line to any car
on a crossing arm that reached the approach region first and has not yet
left the conflict zone. Motion is sampled at 10 Hz.

Episodes are then sliced into (history, control) data: at every
``slice_every``-th frame, each car present becomes the ego of one datum
with its nearest neighbours, coordinates shifted so the ego sits at the
origin.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..dynamics import CONTROL_DIM
from ..errors import InvalidInputError
from ..sequence import F_HEADING, F_PX, F_TYPE, F_VX
from .agents import desired_control_arrays, select_agents
from .dataset import Dataset

# arm -> (unit direction of travel, lateral lane offset vector)
_ARMS = {
    0: (np.array([1.0, 0.0]), np.array([0.0, -1.0])),  # from west, moving east
    1: (np.array([-1.0, 0.0]), np.array([0.0, 1.0])),  # from east, moving west
    2: (np.array([0.0, 1.0]), np.array([1.0, 0.0])),  # from south, moving north
    3: (np.array([0.0, -1.0]), np.array([-1.0, 0.0])),  # from north, moving south
}


def _crossing(a, b):
    return (a < 2) != (b < 2)


@dataclass(frozen=True)
class IntersectionConfig:
    dt: float = 0.1
    episode_seconds: float = 24.0
    spawn_rate: float = 0.35  # cars per second over all arms
    spawn_distance: float = 45.0
    exit_distance: float = 35.0
    lane_offset: float = 2.0
    approach_region: float = 25.0
    zone_half: float = 5.0
    stop_margin: float = 1.0
    target_speed: float = 10.0
    spawn_speed_range: tuple = (6.0, 10.0)
    preferred_speed_range: tuple = (6.0, 11.0)
    gain: float = 0.5
    u_bound: float = 4.0
    follow_gap: float = 10.0
    follow_gain: float = 0.6
    spawn_clearance: float = 12.0
    t_max: int = 10
    n_max: int = 4
    slice_every: int = 5
    horizon: int = 10

    def __post_init__(self):
        if not (self.dt > 0 and self.episode_seconds > 0 and self.spawn_rate > 0):
            raise InvalidInputError("dt, episode_seconds and spawn_rate must be > 0")
        if self.t_max < 1 or self.n_max < 1:
            raise InvalidInputError("t_max and n_max must be >= 1")


@dataclass
class Episode:
    """Recorded tracks: arrays ``(frames, agents)`` with a presence mask."""

    pos: np.ndarray  # (F, M, 2)
    vel: np.ndarray  # (F, M, 2)
    acc: np.ndarray  # (F, M, 2) control applied from frame f to f+1
    present: np.ndarray  # (F, M)
    heading: np.ndarray  # (M,)
    arm: np.ndarray  # (M,)
    spawn_frame: np.ndarray  # (M,)
    desired_speed: np.ndarray  # (F, M) speed the car would have with no one else around
    preferred_speed: np.ndarray  # (M,)

    @property
    def n_frames(self):
        return self.pos.shape[0]

    @property
    def n_agents(self):
        return self.pos.shape[1]


def _spawn_schedule(cfg, rng):
    n_frames = int(round(cfg.episode_seconds / cfg.dt))
    t, out = 0.0, []
    while True:
        t += rng.exponential(1.0 / cfg.spawn_rate)
        f = int(t / cfg.dt)
        if f >= n_frames - 1:
            break
        arm = int(rng.integers(4))
        out.append((f, arm, float(rng.uniform(*cfg.spawn_speed_range)), float(rng.uniform(*cfg.preferred_speed_range))))
    return n_frames, out


def simulate_episode(cfg: IntersectionConfig, rng, schedule=None) -> Episode:
    """Simulate one episode. ``schedule`` optionally fixes the spawns as
    ``(frame, arm, speed)`` or ``(frame, arm, speed, preferred_speed)``
    tuples; the preferred speed defaults to ``cfg.target_speed``."""
    n_frames, sched = _spawn_schedule(cfg, rng)
    if schedule is not None:
        sched = sorted(tuple(e) + (cfg.target_speed,) * (4 - len(e)) for e in schedule)
    M = len(sched)
    s = np.full(M, np.nan)  # arc length measured from the centre (negative before it)
    v = np.zeros(M)
    v_free = np.zeros(M)
    arrival = np.full(M, np.inf)
    state = np.zeros(M, dtype=int)  # 0 waiting, 1 driving, 2 gone
    arm = np.array([e[1] for e in sched], dtype=int)
    v_pref = np.array([e[3] for e in sched], dtype=float)
    pos = np.zeros((n_frames, M, 2))
    vel = np.zeros((n_frames, M, 2))
    acc = np.zeros((n_frames, M, 2))
    present = np.zeros((n_frames, M), dtype=bool)
    free_speed = np.zeros((n_frames, M))
    spawn_frame = np.array([e[0] for e in sched], dtype=int)
    stop_line = -(cfg.zone_half + cfg.stop_margin)

    for f in range(n_frames):
        for k in range(M):
            if state[k] == 0 and spawn_frame[k] <= f:
                # spawn only if the lane entry is clear
                same = (state == 1) & (arm == arm[k])
                if not np.any(same & (s - (-cfg.spawn_distance) < cfg.spawn_clearance)):
                    state[k], s[k], v[k], v_free[k] = 1, -cfg.spawn_distance, sched[k][2], sched[k][2]
                    spawn_frame[k] = f
        active = np.flatnonzero(state == 1)
        arrival[active] = np.where(
            (s[active] >= -cfg.approach_region) & ~np.isfinite(arrival[active]), f, arrival[active]
        )
        u = np.zeros(M)
        for k in active:
            u_k = cfg.gain * (v_pref[k] - v[k])
            # car following in the same lane
            lead = [j for j in active if arm[j] == arm[k] and s[j] > s[k]]
            if lead:
                j = min(lead, key=lambda j: s[j])
                gap = s[j] - s[k]
                u_k = min(u_k, cfg.follow_gain * (gap - cfg.follow_gap) + (v[j] - v[k]))
            # yield at the stop line to earlier crossing traffic still in or before the zone
            if s[k] < -cfg.zone_half and s[k] >= -cfg.approach_region:
                must_yield = False
                for j in active:
                    if j == k or not _crossing(arm[j], arm[k]):
                        continue
                    in_or_before = s[j] < cfg.zone_half + 1.0
                    earlier = arrival[j] < arrival[k] or (arrival[j] == arrival[k] and j < k)
                    inside = abs(s[j]) <= cfg.zone_half + 1.0
                    if in_or_before and (earlier or inside) and s[j] >= -cfg.approach_region:
                        must_yield = True
                        break
                if must_yield:
                    d = stop_line - s[k]
                    # brake to stand at the stop line; at or past it, stop now
                    u_k = min(u_k, -v[k] ** 2 / (2 * d) if d > 0.3 else -v[k] / cfg.dt)
            u[k] = np.clip(u_k, -cfg.u_bound, cfg.u_bound)
            if v[k] + u[k] * cfg.dt < 0:
                u[k] = -v[k] / cfg.dt
        for k in active:
            d, lat = _ARMS[arm[k]]
            pos[f, k] = s[k] * d + cfg.lane_offset * lat
            vel[f, k] = v[k] * d
            acc[f, k] = u[k] * d
            present[f, k] = True
            free_speed[f, k] = v_free[k]
        # exact longitudinal update
        s[active] += v[active] * cfg.dt + 0.5 * u[active] * cfg.dt**2
        v[active] = np.maximum(v[active] + u[active] * cfg.dt, 0.0)
        v_free[active] += np.clip(cfg.gain * (v_pref[active] - v_free[active]), -cfg.u_bound, cfg.u_bound) * cfg.dt
        state[active[s[active] > cfg.exit_distance]] = 2
    heading = np.array([np.arctan2(_ARMS[a][0][1], _ARMS[a][0][0]) for a in arm])
    return Episode(pos, vel, acc, present, heading, arm, spawn_frame, free_speed, v_pref)


def min_pair_distance(ep: Episode):
    """Smallest distance between any two simultaneously present cars."""
    best = np.inf
    for f in range(ep.n_frames):
        idx = np.flatnonzero(ep.present[f])
        if idx.size < 2:
            continue
        p = ep.pos[f, idx]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        d[np.diag_indices(len(idx))] = np.inf
        best = min(best, d.min())
    return best


def slice_episode(ep: Episode, cfg: IntersectionConfig, episode_id=0):
    """Cut an episode into per-ego data; returns a list of field dicts."""
    out = []
    T, N, H = cfg.t_max, cfg.n_max, cfg.horizon
    for f in range(T - 1, ep.n_frames - 1, cfg.slice_every):
        here = np.flatnonzero(ep.present[f])
        for ego in here:
            keep = select_agents(ep.pos[f, here], here, int(ego), N)
            origin = ep.pos[f, ego]
            tokens = np.zeros((T, N, 6))
            valid = np.zeros((T, N), dtype=bool)
            future = np.zeros((H, N, 2))
            fvalid = np.zeros((H, N), dtype=bool)
            ids = np.full(N, -1)
            for n, a in enumerate(keep):
                ids[n] = a
                frames = np.arange(f - T + 1, f + 1)
                pres = ep.present[frames, a]
                tokens[pres, n, F_TYPE] = 0
                tokens[pres, n, F_PX : F_PX + 2] = ep.pos[frames[pres], a] - origin
                tokens[pres, n, F_VX : F_VX + 2] = ep.vel[frames[pres], a]
                tokens[pres, n, F_HEADING] = ep.heading[a]
                valid[:, n] = pres
                fut = np.arange(f + 1, min(f + 1 + H, ep.n_frames))
                fp = ep.present[fut, a]
                # an agent that leaves stays invalid afterwards
                fp = np.cumprod(fp).astype(bool)
                future[: len(fut)][fp, n] = ep.pos[fut[fp], a] - origin
                fvalid[: len(fut), n] = fp
            sel = np.array(keep)
            pos = np.zeros((N, 2))
            vel = np.zeros((N, 2))
            u = np.zeros((N, 2))
            pos[: len(sel)] = ep.pos[f, sel] - origin
            vel[: len(sel)] = ep.vel[f, sel]
            u[: len(sel)] = ep.acc[f, sel]
            ud = np.zeros((N, 2))
            ud[: len(sel)] = desired_control_arrays(
                pos[: len(sel)], vel[: len(sel)], cfg.target_speed, cfg.gain, cfg.u_bound, ep.heading[sel]
            )
            av = np.arange(N) < len(sel)
            out.append(
                dict(tokens=tokens, valid=valid, pos=pos, vel=vel, agent_valid=av, u_des=ud, u=u,
                     episode=episode_id, agent_ids=ids, future_pos=future, future_valid=fvalid,
                     heading=np.where(av, np.pad(ep.heading[sel], (0, N - len(sel))), 0.0))
            )
    return out


def gen_intersection_dataset(cfg: IntersectionConfig, n_episodes: int, rng, seed=None, return_episodes=False):
    episodes, rows = [], []
    for e in range(n_episodes):
        ep = simulate_episode(cfg, rng)
        episodes.append(ep)
        rows.extend(slice_episode(ep, cfg, e))
    if not rows:
        raise InvalidInputError("no data produced; increase the episode length or spawn rate")
    stack = {k: np.stack([r[k] for r in rows]) for k in rows[0]}
    truth = {k: stack.pop(k) for k in ("future_pos", "future_valid", "heading")}
    meta = {"generator": "intersection", "config": asdict(cfg), "seed": seed, "episodes": n_episodes,
            "count": len(rows), "control_dim": CONTROL_DIM}
    ds = Dataset(**stack, meta=meta, truth=truth)
    return (ds, episodes) if return_episodes else ds
