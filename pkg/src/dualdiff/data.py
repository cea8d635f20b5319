"""Trajectory windows: synthetic generation, TSV ingestion, normalisation, metrics.

A window holds ``T_ubs`` unobserved-history frames, the two observed frames
``(x_-1, x_0)`` and ``T_fut`` future frames, in metres.
"""

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError

T_UBS = 6
T_FUT = 12
DT = 0.4  # seconds per frame (2.5 Hz)
KINDS = ("constant-velocity", "turning", "heteroscedastic", "mix")


@dataclass(frozen=True)
class TrajectoryWindow:
    obs: np.ndarray
    ubs: np.ndarray
    fut: np.ndarray
    agent_id: int = 0
    scene_id: str = ""
    start_frame: int = 0

    def __post_init__(self):
        if self.obs.shape != (2, 2) or self.ubs.shape[-1] != 2 or self.fut.shape[-1] != 2:
            raise ShapeError("window arrays must be (T, 2) with exactly 2 observed frames")
        if not all(np.all(np.isfinite(a)) for a in (self.obs, self.ubs, self.fut)):
            raise ValueError("window coordinates must be finite")

    @property
    def track(self):
        """All frames in time order, oldest first."""
        return np.concatenate([self.ubs, self.obs, self.fut])

    @classmethod
    def from_track(cls, track, t_ubs, agent_id=0, scene_id="", start_frame=0):
        track = np.asarray(track, dtype=np.float64)
        return cls(obs=track[t_ubs:t_ubs + 2], ubs=track[:t_ubs], fut=track[t_ubs + 2:],
                   agent_id=agent_id, scene_id=scene_id, start_frame=start_frame)


@dataclass(frozen=True)
class Transform:
    """Translation taking the scene frame to the ego-centred frame."""

    offset: np.ndarray

    def apply(self, xy):
        return np.asarray(xy) - self.offset

    def invert(self, xy):
        return np.asarray(xy) + self.offset


def normalize(w):
    """Translate so the last observed frame sits at the origin."""
    t = Transform(offset=w.obs[1].copy())
    return replace(w, obs=t.apply(w.obs), ubs=t.apply(w.ubs), fut=t.apply(w.fut)), t


def denormalize(w, transform):
    return replace(w, obs=transform.invert(w.obs), ubs=transform.invert(w.ubs),
                   fut=transform.invert(w.fut))


def stack_windows(windows):
    """Ego-centred ``(obs, ubs, fut)`` batches of shape ``(B, T, 2)``."""
    normed = [normalize(w)[0] for w in windows]
    return (np.stack([w.obs for w in normed]), np.stack([w.ubs for w in normed]),
            np.stack([w.fut for w in normed]))


# -- synthetic data -------------------------------------------------------

def ubs_noise_profile(t_ubs=T_UBS, lo=0.05, hi=0.3):
    """Per-frame noise std for the history, oldest frame noisiest."""
    return np.linspace(hi, lo, t_ubs)


def _arc(speed, heading, turn, t_ubs, t_fut):
    """Positions k = -1-t_ubs .. t_fut along a constant-speed, constant-turn path.

    Step k -> k+1 moves ``speed*DT`` along heading ``heading + turn*k``.
    """
    ks = np.arange(-1 - t_ubs, t_fut)
    steps = speed * DT * np.stack([np.cos(heading + turn * ks), np.sin(heading + turn * ks)], -1)
    # x_0 is the origin; cumulative sums forward and backward from it
    k0 = 1 + t_ubs
    pos = np.zeros((len(ks) + 1, 2))
    pos[k0 + 1:] = np.cumsum(steps[k0:], axis=0)
    pos[:k0] = -np.cumsum(steps[:k0][::-1], axis=0)[::-1]
    return pos


def generate_synthetic(n, kind="constant-velocity", noise_std=0.0, seed=0,
                       t_ubs=T_UBS, t_fut=T_FUT, turn_rate=None):
    """Generate ``n`` windows of the given kind.

    ``constant-velocity`` and ``turning`` add isotropic measurement noise of
    ``noise_std`` to every frame.  ``heteroscedastic`` keeps observed and future
    frames exact and perturbs history frame ``t`` with std
    ``ubs_noise_profile(t_ubs, hi=noise_std or 0.3)[t]``.  ``turning`` draws a
    turn rate (rad/s) from U(-0.5, 0.5) unless ``turn_rate`` is given.
    """
    if n < 1:
        raise ValueError("need at least one window")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "mix":
        kinds = ["constant-velocity" if i % 2 == 0 else "turning" for i in range(n)]
    else:
        kinds = [kind] * n
    profile = ubs_noise_profile(t_ubs, hi=noise_std or 0.3)
    windows = []
    for i, k in enumerate(kinds):
        speed = rng.uniform(0.5, 1.8)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        origin = rng.uniform(-10.0, 10.0, 2)
        if k == "turning":
            rate = rng.uniform(-0.5, 0.5) if turn_rate is None else turn_rate
            turn = rate * DT
        else:
            turn = 0.0
        track = _arc(speed, heading, turn, t_ubs, t_fut) + origin
        if k == "heteroscedastic":
            track[:t_ubs] += rng.standard_normal((t_ubs, 2)) * profile[:, None]
        elif noise_std > 0:
            track += rng.standard_normal(track.shape) * noise_std
        windows.append(TrajectoryWindow.from_track(track, t_ubs, agent_id=i,
                                                   scene_id=f"synthetic-{kind}"))
    return windows


# -- TSV ingestion ----------------------------------------------------------

def _number(text, path, line, what):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"{what} {text!r} is not a number") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"{what} {text!r} is not finite")
    return value


def _as_id(value):
    return int(value) if float(value).is_integer() else value


def read_tracks(path):
    """Parse ``frame<TAB>agent<TAB>x<TAB>y`` rows into per-agent frame maps."""
    path = Path(path)
    tracks = defaultdict(dict)
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, found {len(parts)}")
            frame = _number(parts[0], path, lineno, "frame_id")
            agent = _number(parts[1], path, lineno, "agent_id")
            x = _number(parts[2], path, lineno, "x")
            y = _number(parts[3], path, lineno, "y")
            if not frame.is_integer():
                raise ParseError(path, lineno, f"frame_id {parts[0]!r} is not an integer")
            tracks[_as_id(agent)][int(frame)] = (x, y)
    return tracks


def _stride(tracks):
    diffs = [np.diff(sorted(frames)) for frames in tracks.values() if len(frames) > 1]
    diffs = np.concatenate(diffs) if diffs else np.array([])
    diffs = diffs[diffs > 0]
    return int(diffs.min()) if diffs.size else 1


def load_tsv(path, t_ubs=T_UBS, t_fut=T_FUT, scene_id=None):
    """Slide windows of ``t_ubs + 2 + t_fut`` contiguous frames over every agent."""
    path = Path(path)
    tracks = read_tracks(path)
    stride = _stride(tracks)
    length = t_ubs + 2 + t_fut
    scene = path.stem if scene_id is None else scene_id
    windows = []
    for agent, frames in tracks.items():
        ids = sorted(frames)
        run = [ids[0]] if ids else []
        runs = []
        for prev, cur in zip(ids, ids[1:]):
            if cur - prev == stride:
                run.append(cur)
            else:
                runs.append(run)
                run = [cur]
        if run:
            runs.append(run)
        for run in runs:
            for start in range(len(run) - length + 1):
                track = [frames[f] for f in run[start:start + length]]
                windows.append(TrajectoryWindow.from_track(track, t_ubs, agent_id=agent,
                                                           scene_id=scene,
                                                           start_frame=run[start]))
    if not windows:
        warnings.warn(f"{path}: no complete windows of {length} frames", stacklevel=2)
    return windows


def save_tsv(path, windows, stride=10):
    """Write each window as its agent's track; inverse of :func:`load_tsv`."""
    rows = []
    for w in windows:
        for k, (x, y) in enumerate(w.track):
            rows.append((w.start_frame + k * stride, w.agent_id, x, y))
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for frame, agent, x, y in rows:
            fh.write(f"{frame}\t{agent}\t{float(x)!r}\t{float(y)!r}\n")


# -- metrics ------------------------------------------------------------------

def ade_fde(pred, truth):
    """Best-of-K ADE and FDE; each minimum is taken independently over candidates."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    if pred.ndim != 3 or pred.shape[1:] != truth.shape or truth.shape[-1] != 2:
        raise ShapeError(f"pred {pred.shape} incompatible with truth {truth.shape}")
    if pred.shape[0] < 1:
        raise ShapeError("need at least one candidate")
    dist = np.sqrt(((pred - truth) ** 2).sum(axis=-1))
    # exactly rounded sums keep the result independent of summation order
    ade = min(math.fsum(row) / len(row) for row in dist.tolist())
    return float(ade), float(dist[:, -1].min())


@dataclass
class EvalReport:
    ade: float
    fde: float
    k: int
    n_windows: int
    per_scene: dict = field(default_factory=dict)

    def rows(self):
        """CSV rows ``scene, n_windows, min_ade, min_fde, k`` ending with an ALL row."""
        out = [(s, n, a, f, self.k) for s, (n, a, f) in sorted(self.per_scene.items())]
        out.append(("ALL", self.n_windows, self.ade, self.fde, self.k))
        return out


REPORT_COLUMNS = ("scene", "n_windows", "min_ade", "min_fde", "k")


def evaluate_predictions(windows, predictions):
    """Aggregate best-of-K metrics; ``predictions[i]`` is ``(K, T_fut, 2)`` for window i."""
    if len(windows) != len(predictions):
        raise ShapeError("one prediction set per window is required")
    per_scene = defaultdict(list)
    k = None
    for w, pred in zip(windows, predictions):
        pred = np.asarray(pred)
        k = pred.shape[0] if pred.ndim == 3 else 1
        per_scene[w.scene_id].append(ade_fde(pred, w.fut))
    scenes = {s: (len(v), float(np.mean([a for a, _ in v])), float(np.mean([f for _, f in v])))
              for s, v in per_scene.items()}
    allv = [m for v in per_scene.values() for m in v]
    return EvalReport(ade=float(np.mean([a for a, _ in allv])),
                      fde=float(np.mean([f for _, f in allv])),
                      k=k, n_windows=len(allv), per_scene=scenes)


def write_report_csv(path, report):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for scene, n, a, f, k in report.rows():
            writer.writerow([scene, n, repr(a), repr(f), k])
