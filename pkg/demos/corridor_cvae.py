"""Train a small responsibility CVAE on corridor data and print the
sampled responsibility of agent 0 at a few gaps.

Run: python3 demos/corridor_cvae.py [epochs]
"""
import sys

import numpy as np

from respcvae import cvae
from respcvae.cvae import ModelConfig, ReconConfig
from respcvae.data.corridor import CorridorConfig, corridor_states, corridor_u_des, gen_corridor_dataset, make_scenes
from respcvae.data.corridor import skewed_mode_means
from respcvae.safety_filter import FilterConfig
from respcvae.training import TrainConfig, train


def main(epochs=10):
    cc = CorridorConfig()
    data = gen_corridor_dataset(cc, 3000, FilterConfig(), np.random.default_rng(0))
    model = ModelConfig()
    fcfg = FilterConfig(activation="softmax")
    res = train(data, model, TrainConfig(epochs=epochs), fcfg, ReconConfig())
    print(f"loss {res.history[0]['loss']:.3f} -> {res.history[-1]['loss']:.3f}")
    gaps = np.array([5.5, 8.5, 11.5])
    pos, vel = corridor_states(gaps, np.zeros(3), np.full(3, 1.25), np.full(3, 1.25))
    scenes = make_scenes(pos, vel, corridor_u_des(3, cc), np.zeros((3, 2, 2)))
    g = cvae.sample_gamma(res.store.arrays(), model, scenes, 500, fcfg, np.random.default_rng(1))[:, :, 0]
    for k, gap in enumerate(gaps):
        hist, _ = np.histogram(g[:, k], bins=10, range=(0, 1))
        modes = skewed_mode_means(gap, cc)[:, 0]
        print(f"gap {gap:5.1f}  true modes {modes.round(2)}  histogram {hist.tolist()}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
