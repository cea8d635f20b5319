"""Command-line entry point: synth, train, sample, eval, schedule-dump.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import configparser
import csv
import logging
import secrets
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import KINDS, generate_synthetic, load_tsv, read_tracks, save_tsv, write_report_csv
from .errors import (CheckpointError, ConfigError, DataError, DualDiffError, ParseError,
                     TrainingDivergenceError)
from .pipeline import (TrainConfig, TrainState, evaluate, fit_scale, load_checkpoint, sample,
                       save_checkpoint, train, write_loss_csv)
from .schedule import adaptive_params, gamma_eval, schedule_table

log = logging.getLogger("dualdiff")

# config sections -> TrainConfig fields they may set
SECTIONS = {
    "train": ("epochs", "batch_size", "learning_rate", "lr_final", "seed"),
    "diffusion": ("M_past", "M_fut", "beta_1", "beta_M", "gamma_min", "gamma_max", "u_floor",
                  "ell_min", "ell_max"),
    "model": ("T_ubs", "T_fut", "d_ctx", "d_traj", "d_model", "d_ff", "n_heads", "n_blocks",
              "d_gamma"),
    "sample": ("K_samples",),
    "run": ("data", "out"),
}
CHECKPOINT_NAME = "checkpoint.ddc"
LOSS_NAME = "loss.csv"
SAMPLE_COLUMNS = ("scene_id", "agent_id", "kind", "candidate", "t", "x", "y", "u_x", "u_y")


class UsageError(Exception):
    pass


def _field_types():
    return {f.name: f.type for f in fields(TrainConfig)}


def read_run_config(path):
    """Parse an INI run config into ``(TrainConfig overrides, run options)``.

    Every problem found is collected and reported together.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"config {path}: {exc}") from None
    types = _field_types()
    overrides, run, problems = {}, {}, []
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                problems.append(f"unknown key {key!r} in [{section}]")
            elif section == "run":
                run[key] = raw.strip()
            else:
                kind = int if types[key] in (int, "int") else float
                try:
                    overrides[key] = kind(raw)
                except ValueError:
                    problems.append(f"[{section}] {key} = {raw!r} is not {kind.__name__}")
    return overrides, run, problems


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return repr(float(x))


def _seed(seed):
    if seed is None:
        seed = secrets.randbits(32)
        log.info("no --seed given; using seed %d", seed)
    return seed


def _need_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _need_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    _need_parent(args.out)
    windows = generate_synthetic(args.n, args.kind, args.noise_std, _seed(args.seed))
    save_tsv(args.out, windows)
    log.info("wrote %d windows to %s", len(windows), args.out)
    return 0


def cmd_train(args):
    overrides, run, problems = ({}, {}, []) if args.config is None else read_run_config(args.config)
    data = args.data or run.get("data")
    out = args.out or run.get("out")
    if data is None:
        problems.append("no data path (--data or [run] data)")
    elif not Path(data).is_file():
        problems.append(f"data file not found: {data}")
    if out is None:
        problems.append("no output directory (--out or [run] out)")
    elif Path(out).exists() and not Path(out).is_dir():
        problems.append(f"output path is not a directory: {out}")
    if args.resume is not None and not Path(args.resume).is_file():
        problems.append(f"checkpoint not found: {args.resume}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = TrainConfig(**overrides)
        problems.extend(cfg.problems())
    except TypeError as exc:
        problems.append(str(exc))
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    if "seed" not in overrides:
        cfg.seed = _seed(None)

    windows = load_tsv(data, cfg.T_ubs, cfg.T_fut)
    if not windows:
        raise DataError(f"{data}: no training windows")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        if state.model.cfg.epochs != cfg.epochs:
            state.model.cfg.epochs = cfg.epochs
        log.info("resuming at epoch %d", state.epoch)
    else:
        state = TrainState.create(cfg, fit_scale(windows))

    def on_epoch(s):
        epoch, l1, l2, tot = s.history[-1]
        log.info("epoch %d  l1 %.5f  l2 %.5f  total %.5f", epoch, l1, l2, tot)
        save_checkpoint(s, out / CHECKPOINT_NAME)
        write_loss_csv(out / LOSS_NAME, s.history)

    try:
        train(state, windows, on_epoch=on_epoch)
    except TrainingDivergenceError as exc:
        log.error("%s (last good checkpoint kept in %s)", exc, out)
        return 1
    if not state.history:
        save_checkpoint(state, out / CHECKPOINT_NAME)
        write_loss_csv(out / LOSS_NAME, state.history)
    return 0


def _observed_windows(path, t_ubs, t_fut):
    """Complete windows if the file has them, otherwise each agent's last two frames."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        windows = load_tsv(path, t_ubs, t_fut)
    if windows:
        return [(w.scene_id, w.agent_id, w.obs) for w in windows]
    out = []
    for agent, frames in read_tracks(path).items():
        ids = sorted(frames)
        if len(ids) < 2:
            raise DataError(f"{path}: agent {agent} has fewer than two frames")
        out.append((Path(path).stem, agent, np.array([frames[ids[-2]], frames[ids[-1]]])))
    if not out:
        raise DataError(f"{path}: no observed frames")
    return out


def cmd_sample(args):
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.input_window, "input window file")
    _need_parent(args.out)
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    state = load_checkpoint(args.checkpoint)
    cfg = state.model.cfg
    items = _observed_windows(args.input_window, cfg.T_ubs, cfg.T_fut)
    rng = np.random.default_rng(_seed(args.seed))
    rows = []
    for scene, agent, obs in items:
        fut, hist, u = sample(state, obs, args.k, rng)
        fut = fut.reshape(args.k, cfg.T_fut, 2)
        for t, ((x, y), (ux, uy)) in enumerate(zip(hist, u)):
            rows.append((scene, agent, "history", "", t - cfg.T_ubs - 1, _fmt(x), _fmt(y),
                         _fmt(ux), _fmt(uy)))
        for c in range(args.k):
            for t, (x, y) in enumerate(fut[c], start=1):
                rows.append((scene, agent, "future", c, t, _fmt(x), _fmt(y), "", ""))
    _write_rows(args.out, SAMPLE_COLUMNS, rows)
    log.info("wrote %d rows for %d windows to %s", len(rows), len(items), args.out)
    return 0


def cmd_eval(args):
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.data, "data file")
    if args.out is not None:
        _need_parent(args.out)
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    state = load_checkpoint(args.checkpoint)
    cfg = state.model.cfg
    windows = load_tsv(args.data, cfg.T_ubs, cfg.T_fut)
    if not windows:
        raise DataError(f"{args.data}: no evaluation windows")
    report = evaluate(state.model, windows, args.k, _seed(args.seed))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("scene", "n_windows", "min_ade", "min_fde", "k"))
    for scene, n, a, f, k in report.rows():
        writer.writerow([scene, n, repr(a), repr(f), k])
    if args.out is not None:
        write_report_csv(args.out, report)
    return 0


def _u_values(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--u-values must be comma-separated numbers, got {text!r}") from None
    if not values or not all(v > 0 and np.isfinite(v) for v in values):
        raise UsageError("--u-values must be positive")
    return values


def schedule_rows(field):
    """Wide rows: step, then gamma/alpha2/sigma2 for each future timestep."""
    rows = []
    for m in range(field.M + 1):
        gamma = gamma_eval(field, m)
        a2, s2, _ = adaptive_params(field, m)
        row = [m]
        for t in range(field.T):
            row += [_fmt(gamma[t]), _fmt(a2[t]), _fmt(s2[t])]
        rows.append(row)
    return rows


def schedule_header(t_fut):
    head = ["step"]
    for t in range(1, t_fut + 1):
        head += [f"gamma_t{t}", f"alpha2_t{t}", f"sigma2_t{t}"]
    return head


def cmd_schedule_dump(args):
    _need_file(args.checkpoint, "checkpoint")
    values = _u_values(args.u_values)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path is not a directory: {out}")
    state = load_checkpoint(args.checkpoint)
    model, cfg = state.model, state.model.cfg
    out.mkdir(parents=True, exist_ok=True)
    for i, u in enumerate(values):
        # u is given in squared metres; the model works in scaled units
        u_scaled = np.full((cfg.T_ubs, 2), u / model.pos_scale ** 2)
        field = model.field(u_scaled).values()
        _write_rows(out / f"schedule_u{i:02d}.csv", schedule_header(cfg.T_fut),
                    schedule_rows(field))
        long_rows = [(m, t, _fmt(g), _fmt(a), _fmt(s), _fmt(r))
                     for m, t, g, a, s, r in schedule_table(field)]
        _write_rows(out / f"schedule_u{i:02d}_long.csv",
                    ("step", "timestep", "gamma", "alpha2", "sigma2", "snr"), long_rows)
        log.info("u=%g -> %s", u, out / f"schedule_u{i:02d}.csv")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dualdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic trajectory TSV")
    p.add_argument("--kind", choices=KINDS, default="constant-velocity")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train both branches")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", help="directory for the checkpoint and loss CSV")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw futures for observed windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-window", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="best-of-K ADE/FDE on a TSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule-dump", help="write learned schedule curves for given u")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--u-values", required=True, help="comma-separated variances in m^2")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_schedule_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dualdiff {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ParseError, DataError, CheckpointError, DualDiffError, OSError) as exc:
        print(f"dualdiff {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
