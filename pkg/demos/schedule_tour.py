"""How the uncertainty-driven noise schedule reacts to u.

The history branch uses a fixed linear-beta schedule.  The future branch
gets one log-SNR curve per future timestep, and the curves are shaped by the
uncertainty u of the reconstructed history.  This script builds an untrained
model, feeds it a small and a large u, and prints where each future timestep
crosses gamma = 0 (equal signal and noise).

    python demos/schedule_tour.py
"""

import numpy as np

from dualdiff.pipeline import Diffusion2, TrainConfig
from dualdiff.schedule import gamma_eval, linear_schedule


def crossing(gam):
    # first step at which the log-SNR curve reaches zero
    return int(np.argmax(gam >= 0.0, axis=0).min()), int(np.argmax(gam >= 0.0, axis=0).max())


def main():
    s = linear_schedule(10, 1e-4, 0.05)
    print("fixed history schedule (M=10)")
    for m in (0, 1, 5, 10):
        print(f"  m={m:2d}  alpha={s.alpha[m]:.4f}  sigma={s.sigma[m]:.4f}")

    model = Diffusion2(TrainConfig(seed=0))
    steps = np.arange(model.cfg.M_fut + 1)
    for u in (1e-4, 1e-1, 10.0):
        g = model.field(np.full((6, 2), u)).values()
        gam = gamma_eval(g, steps)
        lo, hi = crossing(gam)
        print(f"u={u:<7g} gamma=0 crossed between steps {lo} and {hi} "
              f"(of {g.M}); mid-chain gamma t1={gam[25, 0]:+.2f} t12={gam[25, -1]:+.2f}")

    # endpoints are pinned whatever u is
    print("endpoints:", gam[0].min(), gam[-1].max())


if __name__ == "__main__":
    main()
