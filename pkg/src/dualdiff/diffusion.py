"""Forward corruption, reverse steps, Tweedie uncertainty and the true posterior.

Trajectory arrays have shape ``(..., T, 2)``.  Steps ``m`` may be an int or an
integer array matching the leading (batch) axes.  Functions that feed training
(`q_sample_fixed`, `q_sample_adaptive`) also accept Tensors; the reverse steps
and chains are value-level and used under ``no_grad``.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import MonotonicityError, ShapeError
from .numerics import Tensor
from .schedule import adaptive_params, adaptive_transition, transition_params

ELL_CLAMP = (-10.0, 6.0)
U_MIN = 1e-6


def _vals(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _per_sample(values, m, ndim):
    """Index a per-step table by ``m`` and shape it to broadcast over (T, 2)."""
    v = values[np.asarray(m)]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if np.ndim(v) else float(v)


@dataclass(frozen=True)
class UncertaintyEstimate:
    """Per-coordinate variance of a reconstructed history, shape ``(..., T_ubs, 2)``."""

    u: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.u)) and np.all(self.u > 0)):
            raise ValueError("uncertainty must be finite and positive")


def q_sample_fixed(x0, m, s, noise):
    """``x_m = alpha_m x0 + sigma_m noise`` under a fixed schedule."""
    if np.shape(_vals(x0)) != np.shape(_vals(noise)):
        raise ShapeError(f"noise shape {np.shape(noise)} != data shape {np.shape(x0)}")
    nd = np.ndim(_vals(x0))
    return _per_sample(s.alpha, m, nd) * x0 + _per_sample(s.sigma, m, nd) * noise


def q_sample_adaptive(y0, m, g, noise):
    """Corrupt ``y0`` with per-timestep scales from the log-SNR field ``g``."""
    if np.shape(_vals(y0)) != np.shape(_vals(noise)):
        raise ShapeError(f"noise shape {np.shape(noise)} != data shape {np.shape(y0)}")
    alpha2, sigma2, _ = adaptive_params(g, m)
    alpha, sigma = nx.sqrt(alpha2), nx.sqrt(sigma2)
    return _coord(alpha) * y0 + _coord(sigma) * noise


def _coord(x):
    """Append a unit axis so per-timestep values broadcast over x/y."""
    if isinstance(x, Tensor):
        return x.reshape(x.shape + (1,))
    return np.asarray(x)[..., None]


def scheduler_variance(s, m):
    """``sigma_n^2 sigma^2_{m|n} / sigma_m^2`` with ``n = m - 1`` (per step)."""
    m = np.asarray(m)
    out = np.empty(m.shape)
    for idx, mm in np.ndenumerate(m):
        _, s2_mn = transition_params(s, int(mm) - 1, int(mm))
        out[idx] = s.sigma[mm - 1] ** 2 * s2_mn / s.sigma[mm] ** 2
    return out if out.ndim else float(out)


def predict_x0(x_m, m, s, eps_hat):
    """Data prediction implied by a noise prediction."""
    nd = np.ndim(_vals(x_m))
    return (x_m - _per_sample(s.sigma, m, nd) * eps_hat) / _per_sample(s.alpha, m, nd)


def reverse_step_past(x_m, m, h1, s, denoiser, ell_clamp=ELL_CLAMP):
    """Mean and diagonal covariance of ``p(x_{m-1} | x_m)`` for the history branch.

    ``denoiser(x_m, m, h1)`` returns ``(eps_hat, ell)``.  Also returns those two
    outputs, with ``ell`` already clamped.
    """
    m = int(m)
    if m < 1:
        raise ValueError("reverse steps start from m >= 1")
    n = m - 1
    eps_hat, ell = denoiser(x_m, m, h1)
    eps_hat = _vals(eps_hat)
    ell = np.clip(_vals(ell), *ell_clamp)
    x_m = _vals(x_m)
    a_mn, s2_mn = transition_params(s, n, m)
    s2_m, s2_n = s.sigma[m] ** 2, s.sigma[n] ** 2
    x0_hat = (x_m - s.sigma[m] * eps_hat) / s.alpha[m]
    mu = (a_mn * s2_n / s2_m) * x_m + (s2_mn * s.alpha[n] / s2_m) * x0_hat
    sigma = np.exp(ell) + s2_n * s2_mn / s2_m
    return mu, sigma, eps_hat, ell


def tweedie_uncertainty(ell, s, subtract_scheduler=True, m=1, u_min=U_MIN,
                        ell_clamp=ELL_CLAMP):
    """Closed-form variance of the reconstructed history from the log-variance head.

    With ``subtract_scheduler`` the known scheduler contribution is left out so
    only the learned (aleatoric) part remains.  The result is floored at
    ``u_min``.
    """
    u = np.exp(np.clip(_vals(ell), *ell_clamp))
    if not subtract_scheduler:
        u = u + scheduler_variance(s, m)
    return UncertaintyEstimate(np.maximum(u, u_min))


def sample_past_chain(denoiser, h1, s, shape, rng, u_step=None,
                      ell_clamp=ELL_CLAMP, u_min=U_MIN, subtract_scheduler=True):
    """Ancestral sampling of the history from pure noise.

    Each step draws two noise tensors: one scaled by the learned standard
    deviation ``exp(ell / 2)`` and one by the scheduler's.  Returns the sample
    and the uncertainty read off the log-variance head at ``u_step`` (default:
    the first, noisiest reverse step).
    """
    M = s.M
    u_step = M if u_step is None else u_step
    x = rng.standard_normal(shape)
    u = None
    for m in range(M, 0, -1):
        mu, _, _, ell = reverse_step_past(x, m, h1, s, denoiser, ell_clamp)
        if m == u_step:
            u = tweedie_uncertainty(ell, s, subtract_scheduler, m, u_min, ell_clamp)
        eps = rng.standard_normal(shape)
        eps_sched = rng.standard_normal(shape)
        sched_std = np.sqrt(scheduler_variance(s, m))
        x = mu + np.exp(0.5 * ell) * eps + sched_std * eps_sched
    return x, u


def future_coefficients(g, m):
    """Per-timestep ``(c_y, c_0, var)`` of the adaptive reverse step at ``m``.

    ``mean = c_y * y_m + c_0 * y0_hat`` and ``var`` is the step variance.
    """
    m = np.asarray(m)
    if np.any(m < 1):
        raise ValueError("reverse steps start from m >= 1")
    n = m - 1
    a2_n, s2_n, _ = adaptive_params(g, n)
    _, s2_m, _ = adaptive_params(g, m)
    a_mn, s2_mn = adaptive_transition(g, n, m)
    c_y = a_mn * s2_n / s2_m
    c_0 = s2_mn * nx.sqrt(a2_n) / s2_m
    var = s2_n * s2_mn / s2_m
    return c_y, c_0, var


def reverse_step_future(y_m, m, h2, u, g, denoiser):
    """Mean and diagonal variance of ``p(y_{m-1} | y_m)`` under the adaptive field.

    ``denoiser(y_m, h2, m, u, alpha=, sigma=)`` returns the clean-data
    prediction; ``alpha``/``sigma`` are the per-timestep scales at ``m``.
    """
    g = g.values()
    alpha2, sigma2, _ = adaptive_params(g, m)
    y0_hat = _vals(denoiser(y_m, h2, m, u, alpha=np.sqrt(alpha2), sigma=np.sqrt(sigma2)))
    c_y, c_0, var = future_coefficients(g, m)
    mu = _coord(c_y) * _vals(y_m) + _coord(c_0) * y0_hat
    return mu, np.broadcast_to(_coord(var), mu.shape).copy()


def sample_future_chain(denoiser, h2, u, g, shape, rng):
    """Ancestral sampling of futures from pure noise, one noise draw per step."""
    y = rng.standard_normal(shape)
    for m in range(g.M, 0, -1):
        mu, var = reverse_step_future(y, m, h2, u, g, denoiser)
        y = mu + np.sqrt(var) * rng.standard_normal(shape)
    return y


def q_posterior_oracle(y0, y_m, n, m, alpha, sigma):
    """Mean and variance of ``q(y_n | y_m, y0)`` for per-step scale tables.

    ``alpha[k]``, ``sigma[k]`` give the marginal scales at step ``k``.
    """
    if not 0 <= n < m:
        raise ValueError("need 0 <= n < m")
    a_n, s_n, a_m, s_m = alpha[n], sigma[n], alpha[m], sigma[m]
    # strict SNR decrease: a_n^2 s_m^2 > a_m^2 s_n^2
    if not a_n * a_n * s_m * s_m > a_m * a_m * s_n * s_n:
        raise MonotonicityError("posterior needs snr(n) > snr(m)")
    a_mn = a_m / a_n
    s2_mn = s_m * s_m - a_mn * a_mn * s_n * s_n
    mean = (a_mn * s_n * s_n / (s_m * s_m)) * y_m + (s2_mn * a_n / (s_m * s_m)) * y0
    var = s_n * s_n * s2_mn / (s_m * s_m)
    return mean, var
