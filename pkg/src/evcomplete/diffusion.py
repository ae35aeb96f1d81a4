"""Conditional DDPM over event clouds.

Steps are 1-based: ``alpha_bar[t - 1]`` is the cumulative product up to step
``t`` and step 0 denotes clean data (alpha_bar = 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .denoiser import NetworkConfig, edn_forward, encode_condition

POLARITY_WEIGHT = 0.1


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t):
        """alpha_bar at step ``t`` with abar(0) = 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t, 1) - 1], 1.0)

    def log_snr_half(self, t):
        """lambda_t = log(sqrt(abar) / sqrt(1 - abar))."""
        a = self.abar(t)
        return 0.5 * (np.log(a) - np.log1p(-a))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - prev) / (1.0 - alpha_bar) * beta
    for a in (beta, alpha, alpha_bar, sigma2):
        a.setflags(write=False)
    return DiffusionSchedule(beta, alpha, alpha_bar, sigma2)


def _check_step(t, schedule):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"diffusion step must lie in 1..{schedule.T}")


def q_sample(e0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Noisy cloud sqrt(abar_t) e0 + sqrt(1 - abar_t) eps; ``t`` scalar or per batch row."""
    _check_step(t, schedule)
    a = schedule.abar(t)
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (e0.ndim - 1))
    return np.sqrt(a) * e0 + np.sqrt(1.0 - a) * eps


def training_loss(params, cfg: NetworkConfig, e0: np.ndarray, pol0: np.ndarray, cond: np.ndarray,
                  cond_pol: np.ndarray, schedule: DiffusionSchedule, rng, t=None, eps=None,
                  noise_pol=None, backward: bool = True):
    """Noise-prediction MSE plus a weighted polarity cross-entropy.

    ``t``, ``eps`` and ``noise_pol`` are drawn from ``rng`` unless given.
    Returns ``(loss, parts)`` where ``parts`` holds the two loss terms; with
    ``backward`` the parameter gradients are left in ``params``.
    """
    b, n, _ = e0.shape
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(e0.shape)
    if noise_pol is None:
        noise_pol = rng.choice([-1.0, 1.0], size=(b, n))
    t = np.broadcast_to(np.asarray(t), (b,))
    et = q_sample(e0, t, eps, schedule).astype(params.dtype)
    params.zero_grad()
    pred, logit = edn_forward(params, cfg, et, noise_pol, cond, cond_pol, t)
    coord = nn.mean(nn.square(nn.add(pred, -eps.astype(params.dtype))))
    pol_term = nn.bce_with_logits(logit, pol0)
    loss = nn.add(coord, nn.mul(pol_term, np.asarray(POLARITY_WEIGHT, dtype=params.dtype)))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite training loss")
    if backward:
        loss.backward()
    return float(loss.data), {"coord": float(coord.data), "polarity": float(pol_term.data)}


class CountingDenoiser:
    """Wraps the network as ``f(x, t) -> (eps, logit)`` and counts evaluations."""

    def __init__(self, params, cfg: NetworkConfig, cond: np.ndarray, cond_pol: np.ndarray, noise_pol: np.ndarray):
        self.params = params
        self.cfg = cfg
        self.enc = encode_condition(params, cfg, cond.astype(params.dtype), cond_pol)
        self.noise_pol = noise_pol
        self.calls = 0

    def __call__(self, x: np.ndarray, t: int):
        self.calls += 1
        eps, logit = edn_forward(self.params, self.cfg, x.astype(self.params.dtype), self.noise_pol, self.enc,
                                 t=np.full(x.shape[0], t))
        return eps.data.astype(np.float64), logit.data.astype(np.float64)


def p_sample_step(x: np.ndarray, t: int, eps_pred: np.ndarray, schedule: DiffusionSchedule, rng) -> np.ndarray:
    """One reverse step given the predicted noise; no noise is added at t = 1."""
    _check_step(t, schedule)
    a, ab, b = schedule.alpha[t - 1], schedule.alpha_bar[t - 1], schedule.beta[t - 1]
    mu = (x - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)
    if t == 1:
        return mu
    return mu + np.sqrt(schedule.sigma2[t - 1]) * rng.standard_normal(x.shape)


def _init_noise(b: int, n_out: int, rng):
    x = rng.standard_normal((b, n_out, 3))
    pol = rng.choice([-1.0, 1.0], size=(b, n_out))
    return x, pol


def _finish(x, logit):
    return np.clip(x, -1.0, 1.0), np.where(logit > 0, 1.0, -1.0)


def ancestral_sample(params, cfg: NetworkConfig, cond: np.ndarray, cond_pol: np.ndarray, n_out: int,
                     schedule: DiffusionSchedule, rng, denoiser=None):
    """Full T-step stochastic reverse chain.  Returns (coords, polarity, calls)."""
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    x, pol = _init_noise(cond.shape[0], n_out, rng)
    f = denoiser or CountingDenoiser(params, cfg, cond, cond_pol, pol)
    logit = None
    for t in range(schedule.T, 0, -1):
        eps, logit = f(x, t)
        x = p_sample_step(x, t, eps, schedule, rng)
    coords, polarity = _finish(x, logit)
    return coords, polarity, f.calls


def fast_time_grid(schedule: DiffusionSchedule, steps: int) -> np.ndarray:
    """``steps`` strictly decreasing integer steps from T to 1, uniform in log-SNR."""
    T = schedule.T
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in 1..{T}, got {steps}")
    if steps == 1:
        return np.array([T])
    lam = schedule.log_snr_half(np.arange(1, T + 1))
    targets = np.linspace(lam[-1], lam[0], steps)
    grid = np.empty(steps, dtype=np.int64)
    # walk from the noisy end, taking the nearest step that keeps the grid strictly decreasing
    for i, target in enumerate(targets):
        hi = T if i == 0 else grid[i - 1] - 1
        lo = steps - i
        cand = np.arange(lo, hi + 1)
        grid[i] = cand[np.argmin(np.abs(lam[cand - 1] - target))]
    grid[0], grid[-1] = T, 1
    return grid


def fast_sample(params, cfg: NetworkConfig, cond: np.ndarray, cond_pol: np.ndarray, n_out: int,
                schedule: DiffusionSchedule, steps: int = 27, seed=0, denoiser=None):
    """Deterministic second-order exponential-integrator sampler.

    The probability-flow ODE is integrated in log-SNR over ``steps`` grid
    points from T down to 1 and then to clean data.  Each interval between
    grid points takes a midpoint evaluation at the intermediate step whose
    log-SNR is closest to the interval midpoint (first order when no
    intermediate step exists); the last jump to clean data is first order.
    Uses at most ``2 * steps - 1`` network evaluations.
    """
    rng = np.random.default_rng(seed)
    grid = fast_time_grid(schedule, steps)
    x, pol = _init_noise(cond.shape[0], n_out, rng)
    f = denoiser or CountingDenoiser(params, cfg, cond, cond_pol, pol)
    lam_all = schedule.log_snr_half(np.arange(1, schedule.T + 1))

    def coef(t):
        ab = schedule.abar(t)
        return np.sqrt(ab), np.sqrt(1.0 - ab), schedule.log_snr_half(t)

    logit = None
    for s, t in zip(grid[:-1], grid[1:]):
        a_s, sg_s, l_s = coef(s)
        a_t, sg_t, l_t = coef(t)
        h = l_t - l_s
        eps_s, logit = f(x, int(s))
        inner = np.arange(t + 1, s)
        if len(inner) == 0:
            x = (a_t / a_s) * x - sg_t * np.expm1(h) * eps_s
            continue
        u = int(inner[np.argmin(np.abs(lam_all[inner - 1] - 0.5 * (l_s + l_t)))])
        a_u, sg_u, l_u = coef(u)
        r = (l_u - l_s) / h
        x_u = (a_u / a_s) * x - sg_u * np.expm1(r * h) * eps_s
        eps_u, logit = f(x_u, u)
        x = (a_t / a_s) * x - sg_t * np.expm1(h) * eps_s - sg_t / (2 * r) * np.expm1(h) * (eps_u - eps_s)
    # final jump from the last grid point (step 1) to clean data
    a1, sg1, _ = coef(int(grid[-1]))
    eps_1, logit = f(x, int(grid[-1]))
    x = (x - sg1 * eps_1) / a1
    coords, polarity = _finish(x, logit)
    return coords, polarity, f.calls
