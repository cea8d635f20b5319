"""Train on a straight-and-turning mix, then forecast from two frames.

Shows the full loop: synthetic data, training, best-of-20 evaluation before
and after, and one forecast with its reconstructed history.  Only the two
most recent positions of the agent are given to the model.

    python demos/end_to_end.py             # about 2 minutes
    python demos/end_to_end.py --n 200 --epochs 1 --k 5
"""

import argparse

import numpy as np

from dualdiff.data import generate_synthetic
from dualdiff.pipeline import TrainConfig, TrainState, evaluate, fit_scale, sample, train


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--k", type=int, default=20)
    args = ap.parse_args(argv)

    ws = generate_synthetic(args.n, "mix", 0.0, seed=1)
    held_out = generate_synthetic(50, "mix", 0.0, seed=2)
    state = TrainState.create(TrainConfig(epochs=args.epochs, seed=1), fit_scale(ws))

    before = evaluate(state.model, held_out, k=args.k, seed=0)
    train(state, ws, on_epoch=lambda s: print("epoch %3d  total %.3f" % (s.epoch, s.history[-1][3])))
    after = evaluate(state.model, held_out, k=args.k, seed=0)
    print(f"min-ADE/FDE@{args.k}  untrained {before.ade:.3f}/{before.fde:.3f} m"
          f"  trained {after.ade:.3f}/{after.fde:.3f} m")

    w = held_out[0]
    futures, history, u = sample(state, w.obs, k=args.k, rng=np.random.default_rng(3))
    err = np.linalg.norm(futures - w.fut, axis=-1).mean(axis=1)
    best = int(err.argmin())
    print(f"\nwindow 0: best of {args.k} candidates is #{best}, ADE {err[best]:.3f} m")
    print("reconstructed history (m) vs truth, with predicted std:")
    for h, t, s in zip(history, w.ubs, np.sqrt(u)):
        print(f"  ({h[0]:7.2f}, {h[1]:7.2f})  ({t[0]:7.2f}, {t[1]:7.2f})  +-{s.mean():.2f}")


if __name__ == "__main__":
    main()
