"""Trainable networks built on :mod:`dualdiff.numerics`.

* :class:`ContextEncoder` maps the two observed frames to ``h1``.
* :class:`DualHeadDenoiser` predicts noise and a per-coordinate log-variance
  for the history branch.
* :class:`FutureDenoiser` predicts clean futures for the forward branch.
* :class:`TrajEncoder` summarises a reconstructed history into ``v1``.
* :class:`GammaNet` maps history uncertainty to log-SNR polynomial coefficients.

The two denoisers share a pre-norm transformer trunk: trajectory tokens carry
a sinusoidal position code, condition tokens (context, step, uncertainty) do
not, and only trajectory tokens are read out.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DataError, ShapeError
from .numerics import Tensor, concat, layer_norm, softmax

COEF_FLOOR = 1e-3
# keeps log-variances spanning 1e-6..1 inside the gates' linear range
LOG_U_SCALE = 0.2


@dataclass(frozen=True)
class NetDims:
    """Network sizes.  Defaults are the desk-scale configuration."""

    d_ctx: int = 32
    d_traj: int = 32
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 2
    n_blocks: int = 2
    d_gamma: int = 32

    @classmethod
    def full_scale(cls):
        return cls(d_ctx=128, d_traj=128, d_model=128, d_ff=256, n_heads=4, n_blocks=3,
                   d_gamma=64)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            self.weight = _param(np.zeros((n_in, n_out)))
        else:
            self.weight = _param(rng.uniform(-bound, bound, (n_in, n_out)))
        if bias:
            self.bias = _param(np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out))
        else:
            self.bias = None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with SiLU between them."""

    def __init__(self, sizes, rng, final_bias=True):
        n = len(sizes) - 1
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, bias=final_bias or i < n - 1)
                       for i in range(n)]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.silu()
        return x


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = _param(np.ones(d))
        self.shift = _param(np.zeros(d))

    def forward(self, x):
        return layer_norm(x) * self.gain + self.shift


class GRULayer(Module):
    """Gated recurrent cell with update and reset gates."""

    def __init__(self, n_in, n_hidden, rng):
        bound = 1.0 / np.sqrt(n_hidden)
        self.n_hidden = n_hidden
        self.w_x = _param(rng.uniform(-bound, bound, (n_in, 3 * n_hidden)))
        self.w_h = _param(rng.uniform(-bound, bound, (n_hidden, 3 * n_hidden)))
        self.b_x = _param(rng.uniform(-bound, bound, 3 * n_hidden))
        self.b_h = _param(rng.uniform(-bound, bound, 3 * n_hidden))

    def step(self, x, h):
        k = self.n_hidden
        gx = x @ self.w_x + self.b_x
        gh = h @ self.w_h + self.b_h
        zr = (gx[..., :2 * k] + gh[..., :2 * k]).sigmoid()
        z, r = zr[..., :k], zr[..., k:]
        cand = (gx[..., 2 * k:] + r * gh[..., 2 * k:]).tanh()
        return (1.0 - z) * cand + z * h


class GRU(Module):
    """Stack of recurrent layers; returns the top layer's final state."""

    def __init__(self, n_in, n_hidden, rng, n_layers=2):
        self.layers = [GRULayer(n_in if i == 0 else n_hidden, n_hidden, rng)
                       for i in range(n_layers)]

    def forward(self, seq):
        batch = seq.shape[:-2]
        hs = [Tensor(np.zeros(batch + (layer.n_hidden,))) for layer in self.layers]
        for t in range(seq.shape[-2]):
            inp = seq[..., t, :]
            for i, layer in enumerate(self.layers):
                hs[i] = layer.step(inp, hs[i])
                inp = hs[i]
        return hs[-1]


def sinusoidal(values, dim):
    """Sinusoidal code of shape ``values.shape + (dim,)``."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = values[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class SelfAttention(Module):
    def __init__(self, d, n_heads, rng):
        if d % n_heads:
            raise ValueError("model dim must be divisible by the head count")
        self.n_heads = n_heads
        # no q/k biases: a key bias shifts every score of a query equally
        self.qkv = Linear(d, 3 * d, rng, bias=False)
        self.out = Linear(d, d, rng)

    def forward(self, x):
        *batch, n, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x).reshape(tuple(batch) + (n, 3, h, dh))
        nb = len(batch)
        perm = (nb + 1,) + tuple(range(nb)) + (nb + 2, nb, nb + 3)
        qkv = qkv.transpose(perm)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)))
        ctx = (att @ v).swapaxes(-2, -3).reshape(tuple(batch) + (n, d))
        return self.out(ctx)


class Block(Module):
    def __init__(self, d, d_ff, n_heads, rng):
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = MLP([d, d_ff, d], rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class Trunk(Module):
    def __init__(self, dims, rng):
        self.blocks = [Block(dims.d_model, dims.d_ff, dims.n_heads, rng)
                       for _ in range(dims.n_blocks)]
        self.norm = LayerNorm(dims.d_model)

    def forward(self, traj_tokens, cond_tokens):
        """Attend over trajectory + condition tokens, return trajectory outputs."""
        n = traj_tokens.shape[-2]
        pos = sinusoidal(np.arange(n), traj_tokens.shape[-1])
        x = concat([traj_tokens + pos] + list(cond_tokens), axis=-2)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[..., :n, :]


def _token(x):
    return x.reshape(x.shape[:-1] + (1, x.shape[-1]))


def _steps(m, batch):
    m = np.asarray(m, dtype=np.float64)
    return np.broadcast_to(m, batch) if m.ndim == 0 else m


class ContextEncoder(Module):
    """Momentary context encoder: frame and velocity embeddings plus an MLP."""

    def __init__(self, dims, rng):
        d = dims.d_ctx
        self.frame = Linear(2, d, rng)
        self.velocity = Linear(2, d, rng)
        self.mlp = MLP([3 * d, d, d], rng, final_bias=False)

    def forward(self, x_obs):
        if not np.all(np.isfinite(x_obs.data if isinstance(x_obs, Tensor) else x_obs)):
            raise DataError("observed frames must be finite")
        x_obs = nx.as_tensor(x_obs)
        if x_obs.shape[-2:] != (2, 2):
            raise ShapeError(f"expected (..., 2, 2) observed frames, got {x_obs.shape}")
        frames = self.frame(x_obs)
        batch = frames.shape[:-2]
        frames = frames.reshape(batch + (2 * frames.shape[-1],))
        vel = self.velocity(x_obs[..., 1, :] - x_obs[..., 0, :])
        return self.mlp(concat([frames, vel], axis=-1))


class DualHeadDenoiser(Module):
    """Noise head plus zero-initialised log-variance head on a shared trunk.

    Given a ``schedule``, the first head is read as a clean-trajectory guess and
    turned into noise with ``(x_m - alpha_m * x0) / sigma_m``.  Near the noisy
    end the observed frames pin the history down far better than ``x_m`` does,
    and a data-space head does not have to cancel the noise to get there.
    """

    def __init__(self, dims, rng, schedule=None):
        d = dims.d_model
        self.schedule = schedule
        self.d_model = d
        self.inp = Linear(2, d, rng)
        self.ctx = Linear(dims.d_ctx, d, rng)
        self.step = Linear(d, d, rng)
        self.trunk = Trunk(dims, rng)
        self.eps_head = Linear(d, 2, rng)
        self.ell_head = Linear(d, 2, rng, zero=True)

    def forward(self, x_m, m, h1):
        x_m = nx.as_tensor(x_m)
        if x_m.shape[-1] != 2:
            raise ShapeError(f"trajectory must end in 2 coordinates, got {x_m.shape}")
        batch = x_m.shape[:-2]
        step = self.step(sinusoidal(_steps(m, batch), self.d_model))
        feats = self.trunk(self.inp(x_m), [_token(self.ctx(h1)), _token(step)])
        out = self.eps_head(feats)
        if self.schedule is not None:
            mm = _steps(m, batch).astype(np.int64)
            if np.any(mm < 1):
                raise ValueError("the noise head is only defined for steps m >= 1")
            a = self.schedule.alpha[mm][..., None, None]
            s = self.schedule.sigma[mm][..., None, None]
            out = (x_m - out * a) / s
        return out, self.ell_head(feats)


class FutureDenoiser(Module):
    """Clean-future predictor conditioned on ``h2``, the step, and ``u``.

    The head output is read as noise and converted to a data prediction with
    the current per-timestep scales: ``y0_hat = (y_m - sigma * out) / alpha``.
    """

    def __init__(self, dims, rng, t_ubs, d_cond=None):
        d = dims.d_model
        self.d_model = d
        self.inp = Linear(2, d, rng)
        self.cond = Linear(d_cond or dims.d_ctx + dims.d_traj, d, rng)
        self.step = Linear(d, d, rng)
        self.unc = Linear(2 * t_ubs, d, rng)
        self.trunk = Trunk(dims, rng)
        self.head = Linear(d, 2, rng)

    def forward(self, y_m, h2, m, u, alpha, sigma):
        y_m = nx.as_tensor(y_m)
        if y_m.shape[-1] != 2:
            raise ShapeError(f"trajectory must end in 2 coordinates, got {y_m.shape}")
        batch = y_m.shape[:-2]
        u = np.asarray(u.data if isinstance(u, Tensor) else u)
        log_u = LOG_U_SCALE * np.log(u).reshape(u.shape[:-2] + (-1,))
        step = self.step(sinusoidal(_steps(m, batch), self.d_model))
        conds = [_token(self.cond(h2)), _token(step), _token(self.unc(log_u))]
        out = self.head(self.trunk(self.inp(y_m), conds))
        alpha, sigma = nx.as_tensor(alpha), nx.as_tensor(sigma)
        return (y_m - sigma.reshape(sigma.shape + (1,)) * out) / alpha.reshape(alpha.shape + (1,))


class TrajEncoder(Module):
    """Two recurrent layers followed by a three-layer MLP."""

    def __init__(self, dims, rng):
        self.gru = GRU(2, dims.d_traj, rng)
        self.mlp = MLP([dims.d_traj, dims.d_traj, dims.d_traj, dims.d_traj], rng)

    def forward(self, x_ubs):
        return self.mlp(self.gru(nx.as_tensor(x_ubs)))


class GammaNet(Module):
    """Two recurrent layers over ``log u`` and a two-layer MLP to 3 x T_fut coefficients."""

    def __init__(self, dims, rng, t_fut):
        self.t_fut = t_fut
        self.gru = GRU(2, dims.d_gamma, rng)
        self.mlp = MLP([dims.d_gamma, dims.d_gamma, 3 * t_fut], rng)

    def forward(self, u):
        u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
        if not np.all(u > 0):
            raise ValueError("uncertainty must be strictly positive")
        raw = self.mlp(self.gru(Tensor(LOG_U_SCALE * np.log(u))))
        coefs = raw.reshape(raw.shape[:-1] + (3, self.t_fut)).softplus() + COEF_FLOOR
        return coefs[..., 0, :], coefs[..., 1, :], coefs[..., 2, :]


def encode_context(encoder, x_obs):
    return encoder(x_obs)


def denoise_past(denoiser, x_m, m, h1):
    return denoiser(x_m, m, h1)


def denoise_future(denoiser, y_m, h2, m, u, alpha, sigma):
    return denoiser(y_m, h2, m, u, alpha, sigma)


def predict_gamma_coeffs(net, u):
    return net(u)
