"""Noise schedules: a fixed linear-beta schedule and an uncertainty-driven
log-SNR field.

Both are variance preserving (``alpha**2 + sigma**2 == 1``).  The adaptive field
is a bounded log-SNR ``gamma(t, m)`` per future timestep ``t``::

    gamma = gamma_min + (gamma_max - gamma_min) * f(s) / f(1),   s = m / M

where ``f`` is the quintic whose derivative is ``(a1 s**2 + a2 s + a3)**2``.
Everything here accepts plain arrays or :class:`~dualdiff.numerics.Tensor`
coefficients, so the same code serves the value-level API and training.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DegenerateFieldError, MonotonicityError
from .numerics import Tensor

GAMMA_MIN = -13.30
GAMMA_MAX = 5.0
BETA_1 = 1e-4
BETA_M = 0.05


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class ScheduleParams:
    """Per-step signal and noise scales; index 0 is clean data."""

    alpha: np.ndarray
    sigma: np.ndarray
    log_alpha2: np.ndarray = field(repr=False)

    def __post_init__(self):
        a2, s2 = self.alpha ** 2, self.sigma ** 2
        if self.alpha[0] != 1.0 or self.sigma[0] != 0.0:
            raise MonotonicityError("schedule must start at alpha=1, sigma=0")
        if np.max(np.abs(a2 + s2 - 1.0)) > 1e-12:
            raise MonotonicityError("schedule is not variance preserving")
        if not np.all(np.diff(self.log_alpha2) < 0):
            raise MonotonicityError("SNR must decrease strictly with the step index")

    @property
    def M(self):
        return len(self.alpha) - 1

    @property
    def snr(self):
        with np.errstate(divide="ignore"):
            return self.alpha ** 2 / self.sigma ** 2


def linear_schedule(M, beta_1=BETA_1, beta_M=BETA_M):
    """DDPM schedule with betas interpolated linearly from ``beta_1`` to ``beta_M``."""
    if int(M) != M or M < 1:
        raise ConfigError(f"step count must be a positive integer, got {M}")
    if not 0.0 < beta_1 <= beta_M < 1.0:
        raise ConfigError(f"need 0 < beta_1 <= beta_M < 1, got {beta_1}, {beta_M}")
    betas = np.linspace(beta_1, beta_M, int(M))
    log_a2 = np.concatenate([[0.0], np.cumsum(np.log1p(-betas))])
    alpha = np.exp(0.5 * log_a2)
    sigma = np.sqrt(-np.expm1(log_a2))
    return ScheduleParams(alpha=alpha, sigma=sigma, log_alpha2=log_a2)


def transition_params(s, n, m):
    """Return ``(alpha_{m|n}, sigma^2_{m|n})`` of ``q(x_m | x_n)``."""
    if not 0 <= n < m <= s.M:
        raise ValueError(f"need 0 <= n < m <= {s.M}, got n={n}, m={m}")
    log_ratio = s.log_alpha2[m] - s.log_alpha2[n]
    return float(np.exp(0.5 * log_ratio)), float(-np.expm1(log_ratio))


@dataclass(frozen=True)
class GammaField:
    """Coefficients of the log-SNR polynomial, one triple per future timestep.

    ``a1``, ``a2``, ``a3`` share a shape ``(..., T_fut)``; leading axes index a
    batch of fields.
    """

    a1: object
    a2: object
    a3: object
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX
    M: int = 200
    C: float = 0.0

    def __post_init__(self):
        if not self.gamma_min < self.gamma_max:
            raise ConfigError("gamma_min must be below gamma_max")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"step count must be a positive integer, got {self.M}")
        shapes = {np.shape(_values(a)) for a in (self.a1, self.a2, self.a3)}
        if len(shapes) != 1:
            raise ConfigError(f"coefficient shapes differ: {sorted(shapes)}")
        f_end = _values(self.poly(1.0))
        if not np.all(f_end > 0):
            raise DegenerateFieldError("f(M) must be positive at every timestep")

    @property
    def T(self):
        return np.shape(_values(self.a1))[-1]

    def poly(self, s):
        """Evaluate the quintic at normalised step(s) ``s`` in [0, 1]."""
        a1, a2, a3 = self.a1, self.a2, self.a3
        s2 = s * s
        s3 = s2 * s
        return (a1 * a1 * (s3 * s2 / 5.0) + a1 * a2 * (s2 * s2 / 2.0)
                + (a2 * a2 + 2.0 * a1 * a3) * (s3 / 3.0) + a2 * a3 * s2
                + a3 * a3 * s + self.C)

    def _steps(self, m):
        m = np.asarray(m)
        if np.any(m < 0) or np.any(m > self.M):
            raise ValueError(f"step outside [0, {self.M}]: {m}")
        s = m.astype(np.float64) / self.M
        return s[..., None] if s.ndim else float(s)

    def values(self):
        """The same field with coefficients detached to plain arrays."""
        return GammaField(_values(self.a1), _values(self.a2), _values(self.a3),
                          self.gamma_min, self.gamma_max, self.M, self.C)


def gamma_eval(g, m):
    """Log-SNR ``gamma(t, m)`` for every timestep; ``m`` may be an array of steps."""
    s = g._steps(m)
    ratio = g.poly(s) / g.poly(1.0)
    # convex combination keeps both endpoints exact
    return g.gamma_min * (1.0 - ratio) + g.gamma_max * ratio


def adaptive_params(g, m):
    """Return ``(alpha^2, sigma^2, snr)`` at step ``m``."""
    gamma = gamma_eval(g, m)
    return nx.sigmoid(-gamma), nx.sigmoid(gamma), nx.exp(-gamma)


def adaptive_transition(g, n, m):
    """Per-timestep ``(alpha_{m|n}, sigma^2_{m|n})`` of the adaptive forward chain."""
    gn, gm = gamma_eval(g, n), gamma_eval(g, m)
    alpha_mn = nx.sqrt(nx.sigmoid(-gm) / nx.sigmoid(-gn))
    # sigma^2_{m|n} = sigma_m^2 (1 - snr_m / snr_n)
    sigma2_mn = -nx.sigmoid(gm) * nx.expm1(gn - gm)
    return alpha_mn, sigma2_mn


def snr_gap(g, n, m):
    """``snr(n) - snr(m)``: the per-timestep weight of the forward-branch loss."""
    if np.any(np.asarray(n) >= np.asarray(m)):
        raise ValueError("snr_gap needs n < m")
    gap = nx.exp(-gamma_eval(g, n)) - nx.exp(-gamma_eval(g, m))
    if not np.all(_values(gap) > 0):
        raise MonotonicityError("log-SNR field is not strictly increasing")
    return gap


def schedule_table(g):
    """Rows ``(step, timestep, gamma, alpha2, sigma2, snr)`` for a single field."""
    g = g.values()
    if np.ndim(g.a1) != 1:
        raise ValueError("schedule_table expects a single (unbatched) field")
    rows = []
    for m in range(g.M + 1):
        gamma = gamma_eval(g, m)
        a2, s2, snr = adaptive_params(g, m)
        for t in range(g.T):
            rows.append((m, t + 1, gamma[t], a2[t], s2[t], snr[t]))
    return rows
