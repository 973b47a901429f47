"""Head-on encounter: how the responsibility split moves the deviation.

Run: python3 demos/filter_sweep.py
"""
import numpy as np

from respcvae.safety_filter import FilterConfig, project_batch


def main():
    pos = np.array([[0.0, 0.0], [4.0, 0.2]])
    vel = np.array([[1.5, 0.0], [-1.5, 0.0]])
    u_des = np.array([[1.0, 0.0], [-1.0, 0.0]])
    w = np.linspace(0.05, 0.95, 10)
    gamma = np.stack([w, 1 - w], 1)
    K = len(w)
    fb = project_batch(np.broadcast_to(u_des, (K, 2, 2)), np.broadcast_to(pos, (K, 2, 2)),
                       np.broadcast_to(vel, (K, 2, 2)), gamma, FilterConfig())
    dev = np.linalg.norm(fb.u - u_des, axis=-1)
    print(" gamma_0  |u_0 - u_des_0|  |u_1 - u_des_1|  slack")
    for k in range(K):
        print(f"  {w[k]:.2f}     {dev[k, 0]:8.4f}        {dev[k, 1]:8.4f}     {fb.epsilon[k]:.1e}")


if __name__ == "__main__":
    main()
