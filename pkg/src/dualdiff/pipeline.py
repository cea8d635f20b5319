"""Training (two-stage loss) and sampling loops, checkpointing, evaluation.

All model-side arithmetic runs in ego-centred coordinates divided by
``pos_scale`` (the RMS of the training targets); public entry points take and
return metres.
"""

import hashlib
import json
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import evaluate_predictions, stack_windows
from .diffusion import (q_sample_adaptive, q_sample_fixed, sample_future_chain,
                        sample_past_chain)
from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     CorruptCheckpointError, NumericOverflowError, TrainingDivergenceError)
from .losses import loss_future, loss_past, total_loss
from .nets import (ContextEncoder, DualHeadDenoiser, FutureDenoiser, GammaNet, Module,
                   NetDims, TrajEncoder)
from .numerics import Tensor, concat, no_grad
from .schedule import GammaField, adaptive_params, linear_schedule, snr_gap

CHECKPOINT_MAGIC = b"DUALDIFF"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_final: float = 0.1
    M_past: int = 10
    M_fut: int = 50
    beta_1: float = 1e-4
    beta_M: float = 0.05
    gamma_min: float = -13.30
    gamma_max: float = 5.0
    seed: int = 0
    u_floor: float = 1e-6
    ell_min: float = -10.0
    ell_max: float = 6.0
    K_samples: int = 20
    T_ubs: int = 6
    T_fut: int = 12
    d_ctx: int = 32
    d_traj: int = 32
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 2
    n_blocks: int = 2
    d_gamma: int = 32

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(epochs=100, batch_size=256, learning_rate=1e-4, lr_final=1.0, M_past=100, M_fut=200,
                    **{k: v for k, v in asdict(NetDims.full_scale()).items()})
        base.update(overrides)
        return cls(**base)

    @property
    def dims(self):
        return NetDims(**{f.name: getattr(self, f.name) for f in fields(NetDims)})

    @property
    def ell_clamp(self):
        return (self.ell_min, self.ell_max)

    def problems(self):
        out = []
        for name in ("epochs", "batch_size", "M_past", "M_fut", "K_samples", "T_ubs", "T_fut",
                     "d_ctx", "d_traj", "d_model", "d_ff", "n_heads", "n_blocks", "d_gamma"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                out.append(f"{name} must be a positive integer (got {value})")
        for name in ("learning_rate", "u_floor"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive (got {getattr(self, name)})")
        if not 0 < self.lr_final <= 1:
            out.append(f"lr_final must be in (0, 1] (got {self.lr_final})")
        if not 0 < self.beta_1 <= self.beta_M < 1:
            out.append("need 0 < beta_1 <= beta_M < 1")
        if not self.gamma_min < self.gamma_max:
            out.append("gamma_min must be below gamma_max")
        if not self.ell_min < self.ell_max:
            out.append("ell_min must be below ell_max")
        if self.d_model % max(self.n_heads, 1):
            out.append("d_model must be divisible by n_heads")
        return out

    def lr_at(self, epoch):
        """Cosine decay from ``learning_rate`` to ``lr_final * learning_rate``."""
        frac = min(max(epoch - 1, 0) / max(self.epochs - 1, 1), 1.0)
        return self.learning_rate * (self.lr_final + (1 - self.lr_final) * 0.5 * (1 + np.cos(np.pi * frac)))

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self


class Diffusion2(Module):
    """History branch, future branch and their encoders."""

    def __init__(self, cfg, pos_scale=1.0):
        cfg.validate()
        self.cfg = cfg
        self.pos_scale = float(pos_scale)
        self.schedule = linear_schedule(cfg.M_past, cfg.beta_1, cfg.beta_M)
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        dims = cfg.dims
        self.context = ContextEncoder(dims, rng)
        self.past = DualHeadDenoiser(dims, rng, self.schedule)
        self.traj = TrajEncoder(dims, rng)
        self.gamma = GammaNet(dims, rng, cfg.T_fut)
        self.future = FutureDenoiser(dims, rng, cfg.T_ubs)

    def field(self, u):
        """Log-SNR field for ``u`` of shape (B, T_ubs, 2), or a single (T_ubs, 2)."""
        u = np.asarray(u, dtype=np.float64)
        if u.ndim == 2:
            a1, a2, a3 = (c.data[0] for c in self.gamma(u[None]))
        else:
            a1, a2, a3 = self.gamma(u)
        return GammaField(a1, a2, a3, self.cfg.gamma_min, self.cfg.gamma_max, self.cfg.M_fut)

    def log_snr(self, m):
        """``log(alpha_m^2 / sigma_m^2)`` of the history schedule."""
        s = self.schedule
        return s.log_alpha2[m] - np.log(s.sigma[m] ** 2)

    def _past_denoiser(self, x_m, m, h1):
        return self.past(x_m, m, h1)

    def history(self, x_obs, rng):
        """Run the history chain for scaled, ego-centred ``x_obs`` of shape (B, 2, 2)."""
        cfg = self.cfg
        with no_grad():
            h1 = self.context(x_obs)
            x0, u = sample_past_chain(self._past_denoiser, h1, self.schedule,
                                      (x_obs.shape[0], cfg.T_ubs, 2), rng,
                                      ell_clamp=cfg.ell_clamp, u_min=cfg.u_floor)
        return h1.data, x0, u.u

    def losses(self, obs, ubs, fut, rng):
        """Both branch losses for one scaled batch; returns (total, breakdown)."""
        return total_loss(*self.branch_losses(obs, ubs, fut, rng))

    def branch_losses(self, obs, ubs, fut, rng):
        """``(l1, l2)`` as separate graph nodes."""
        cfg, s = self.cfg, self.schedule
        b = obs.shape[0]
        m1 = rng.integers(1, cfg.M_past + 1, size=b)
        h1 = self.context(obs)
        eps = rng.standard_normal(ubs.shape)
        x_m = q_sample_fixed(ubs, m1, s, eps)
        eps_hat, ell = self.past(x_m, m1, h1)
        # the head predicts a data-space log-variance; shift by log snr for noise space
        l1 = loss_past(eps, eps_hat, ell.clip(*cfg.ell_clamp) + self.log_snr(m1)[:, None, None])

        h1_const = h1.detach()
        with no_grad():
            x0_ubs, u = sample_past_chain(self._past_denoiser, h1_const, s, ubs.shape, rng,
                                          ell_clamp=cfg.ell_clamp, u_min=cfg.u_floor)
        h2 = concat([self.traj(x0_ubs), h1], axis=-1)
        u = u.u
        m2 = rng.integers(1, cfg.M_fut + 1, size=b)
        g = self.field(u)
        noise = rng.standard_normal(fut.shape)
        y_m = q_sample_adaptive(fut, m2, g, noise)
        alpha2, sigma2, _ = adaptive_params(g, m2)
        y0_hat = self.future(y_m, h2, m2, u, alpha2.sqrt(), sigma2.sqrt())
        l2 = loss_future(fut, y0_hat, snr_gap(g, m2 - 1, m2))
        return l1, l2

    def sample_scaled(self, obs, k, rng):
        """Futures ``(B, K, T_fut, 2)``, history and ``u`` in scaled coordinates."""
        cfg = self.cfg
        h1, x0_ubs, u = self.history(obs, rng)
        b = obs.shape[0]
        with no_grad():
            h2 = concat([self.traj(x0_ubs), Tensor(h1)], axis=-1).data
            h2k = np.repeat(h2, k, axis=0)
            uk = np.repeat(u, k, axis=0)
            g = self.field(uk).values()
            y = sample_future_chain(self.future, h2k, uk, g, (b * k, cfg.T_fut, 2), rng)
        return y.reshape(b, k, cfg.T_fut, 2), x0_ubs, u


class Adam:
    """First/second-moment optimiser with bias correction."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - update


@dataclass
class TrainState:
    model: Diffusion2
    optimizer: Adam
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg, pos_scale=1.0):
        model = Diffusion2(cfg, pos_scale)
        return cls(model, Adam(model.parameters(), lr=cfg.learning_rate))


def fit_scale(windows):
    """RMS of ego-centred history and future coordinates."""
    _, ubs, fut = stack_windows(windows)
    return float(np.sqrt(np.mean(np.concatenate([ubs.ravel(), fut.ravel()]) ** 2)))


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def train_step(batch, state, rng):
    """One optimiser step on a batch of windows (or pre-stacked scaled arrays)."""
    model = state.model
    if isinstance(batch, tuple):
        obs, ubs, fut = batch
    else:
        obs, ubs, fut = (a / model.pos_scale for a in stack_windows(batch))
    model.zero_grad()
    try:
        total, parts = model.losses(obs, ubs, fut, rng)
        if not np.isfinite(parts.total):
            raise NumericOverflowError("non-finite loss")
        total.backward()
    except NumericOverflowError as exc:
        raise TrainingDivergenceError(f"training diverged: {exc}", _snapshot(model)) from exc
    state.optimizer.step()
    return parts


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def train(state, windows, epochs=None, on_epoch=None):
    """Continue training for ``epochs`` more epochs (default: up to ``cfg.epochs``)."""
    cfg = state.model.cfg
    target = cfg.epochs if epochs is None else state.epoch + epochs
    obs, ubs, fut = (a / state.model.pos_scale for a in stack_windows(windows))
    n = len(windows)
    while state.epoch < target:
        epoch = state.epoch + 1
        rng = epoch_rng(cfg.seed, epoch)
        state.optimizer.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            parts = train_step((obs[idx], ubs[idx], fut[idx]), state, rng)
            sums += (parts.l1, parts.l2, parts.total)
            batches += 1
        l1, l2, tot = sums / batches
        state.history.append((epoch, float(l1), float(l2), float(tot)))
        state.epoch = epoch
        if on_epoch is not None:
            on_epoch(state)
    return state


# -- sampling and evaluation ---------------------------------------------------

def sample(state_or_model, x_obs, k=20, rng=None):
    """Draw ``k`` futures for observed frames ``x_obs`` of shape (2, 2) or (B, 2, 2).

    Returns ``(futures, history, u)`` in the input frame; ``u`` is in squared
    position units.  A single window gives futures of shape (K, T_fut, 2).
    """
    model = getattr(state_or_model, "model", state_or_model)
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    x_obs = np.asarray(x_obs, dtype=np.float64)
    single = x_obs.ndim == 2
    obs = x_obs[None] if single else x_obs
    origin = obs[:, 1:2, :]
    scale = model.pos_scale
    fut, hist, u = model.sample_scaled((obs - origin) / scale, k, rng)
    fut = fut * scale + origin[:, None]
    hist = hist * scale + origin
    u = u * scale ** 2
    if single:
        return fut[0], hist[0], u[0]
    return fut, hist, u


def _threads():
    try:
        return max(1, int(os.environ.get("DUALDIFF_THREADS", "1")))
    except ValueError:
        return 1


def predict_windows(model, windows, k, seed, chunk=64):
    """Best-of-K candidate sets for every window; deterministic for a given seed.

    Chunks run on up to ``DUALDIFF_THREADS`` threads, each with its own RNG
    stream, so results do not depend on the thread count.
    """
    chunks = [windows[i:i + chunk] for i in range(0, len(windows), chunk)]
    streams = np.random.SeedSequence(seed).spawn(len(chunks))

    def run(args):
        ws, ss = args
        obs = np.stack([w.obs for w in ws])
        fut, _, _ = sample(model, obs, k, np.random.default_rng(ss))
        return list(fut)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, zip(chunks, streams)))
    return [p for r in results for p in r]


def evaluate(model, windows, k=20, seed=0, predictor=None):
    """Best-of-K ADE/FDE over ``windows``.

    ``predictor(windows) -> list of (K, T_fut, 2)`` overrides model sampling.
    """
    if predictor is None:
        preds = predict_windows(model, windows, k, seed)
    else:
        preds = predictor(windows)
    return evaluate_predictions(windows, preds)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(state, path):
    """Atomically write the model, optimiser and training progress.

    Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header,
    little-endian float64 payload, then the SHA-256 of everything before it.
    """
    model, opt = state.model, state.optimizer
    tensors = []
    names = [name for name, _ in model.named_parameters()]
    for name, p in model.named_parameters():
        tensors.append((f"param/{name}", p.data))
    for name, m, v in zip(names, opt.m, opt.v):
        tensors.append((f"adam_m/{name}", m))
        tensors.append((f"adam_v/{name}", v))
    entries, offset = [], 0
    for name, arr in tensors:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": asdict(model.cfg),
        "pos_scale": model.pos_scale,
        "epoch": state.epoch,
        "history": [list(row) for row in state.history],
        "adam_t": opt.t,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join([CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(head)), head]
                    + [np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors])
    blob = body + hashlib.sha256(body).digest()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint` into a fresh state."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < fixed + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpointError(f"{path}: not a dualdiff checkpoint")
    version, head_len = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, "
                                     f"expected {CHECKPOINT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged)")
    try:
        header = json.loads(body[fixed:fixed + head_len].decode("utf-8"))
        payload = body[fixed + head_len:]
        arrays = {}
        for e in header["tensors"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        cfg = TrainConfig(**header["config"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed header: {exc}") from exc

    state = TrainState.create(cfg, header["pos_scale"])
    named = list(state.model.named_parameters())
    for name, p in named:
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise CorruptCheckpointError(f"{path}: missing or misshapen tensor {name}")
    for i, (name, p) in enumerate(named):
        p.data = arrays[f"param/{name}"]
        state.optimizer.m[i] = arrays[f"adam_m/{name}"]
        state.optimizer.v[i] = arrays[f"adam_v/{name}"]
    state.optimizer.t = header["adam_t"]
    state.epoch = header["epoch"]
    state.history = [tuple(row) for row in header["history"]]
    return state


def write_loss_csv(path, history):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,l1,l2,total\n")
        for epoch, l1, l2, tot in history:
            fh.write(f"{epoch},{l1!r},{l2!r},{tot!r}\n")
