"""Does the history branch know how noisy the history was?

The heteroscedastic synthetic set perturbs each unobserved history frame with
a known standard deviation, from 0.3 m on the oldest frame down to 0.05 m
next to the observations.  After training, the variance read off the
log-variance head should track that profile.

    python demos/calibration.py            # desk run, about 4 minutes
    python demos/calibration.py --n 300 --epochs 3
"""

import argparse
import time

import numpy as np

from dualdiff.data import generate_synthetic, ubs_noise_profile
from dualdiff.pipeline import TrainConfig, TrainState, fit_scale, sample, train


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    train_ws = generate_synthetic(args.n, "heteroscedastic", 0.3, seed=args.seed)
    test_ws = generate_synthetic(200, "heteroscedastic", 0.3, seed=args.seed + 1)
    state = TrainState.create(TrainConfig(epochs=args.epochs, seed=args.seed), fit_scale(train_ws))

    t0 = time.time()
    train(state, train_ws, on_epoch=lambda s: print(
        "epoch %3d  l1 %+.3f  l2 %.3f" % s.history[-1][:3], flush=True))
    print(f"trained in {time.time() - t0:.0f}s")

    obs = np.stack([w.obs for w in test_ws])
    _, _, u = sample(state, obs, k=1, rng=np.random.default_rng(args.seed))
    truth = ubs_noise_profile(6, 0.05, 0.3) ** 2
    print("\nframe   true var   median u   ratio")
    for t, (v, est) in enumerate(zip(truth, np.median(u, axis=(0, 2)))):
        print(f"x_{t - 7:<4d} {v:9.4f} {est:10.4f} {est / v:7.2f}")
    rel = np.abs(u - truth[None, :, None]) / truth[None, :, None]
    print(f"\nmedian relative error {np.median(rel):.3f}")


if __name__ == "__main__":
    main()
