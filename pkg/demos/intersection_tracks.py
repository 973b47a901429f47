"""Simulate one intersection episode, export it as a track CSV, read it
back and build an encoder input for the first car.

Run: python3 demos/intersection_tracks.py out.csv
"""
import sys

import numpy as np

from respcvae.data.intersection import IntersectionConfig, min_pair_distance, simulate_episode
from respcvae.data.tracks_csv import episode_to_tracks, load_tracks_csv, window, write_tracks_csv
from respcvae.sequence import flatten_scene


def main(path):
    cfg = IntersectionConfig()
    ep = simulate_episode(cfg, np.random.default_rng(0))
    print(f"{ep.n_agents} cars over {ep.n_frames} frames, closest approach {min_pair_distance(ep):.2f} m")
    write_tracks_csv(path, episode_to_tracks(ep, cfg.dt))
    tracks = load_tracks_csv(path)
    first = next(iter(tracks.values()))
    frame = int(first.frames[min(15, len(first.frames) - 1)])
    seq = flatten_scene(window(tracks, frame, cfg.t_max), t_max=cfg.t_max, n_max=4, ego_id=first.track_id)
    print(f"frame {frame}: agents {seq.agent_ids.tolist()}, valid tokens {int(seq.valid.sum())}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "episode.csv")
