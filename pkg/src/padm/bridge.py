"""Brownian-bridge diffusion between paired images.

The forward process interpolates a target slice ``x0`` toward its degraded
counterpart ``y`` while injecting noise that vanishes at both ends:

    x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps,   m_t = t / T

with marginal variance ``delta_t`` pinned to zero at t = 0 and t = T.  The
reverse chain steps through the exact Gaussian posterior of the discretized
process, written with three coefficient arrays so a sampler only needs the
current state, the condition image and a target estimate:

    x_s = c_x x_t + c_y y - c_eps (x_t - pred_x0) + sqrt(delta_tilde) z

Schedule math is kept in float64; image tensors stay in whatever dtype the
caller uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Precomputed bridge schedule for timesteps 0..T.

    Arrays are indexed directly by t; entries at t = 0 of the per-step arrays
    (``delta_cond``, ``delta_tilde``, ``c_x``, ``c_y``, ``c_eps``) are unused
    and set to zero.

    Attributes:
        T: number of diffusion steps.
        s_max: peak marginal variance scale.
        m: mixing coefficients m_t = t / T, shape (T + 1,).
        delta: marginal variances delta_t, shape (T + 1,).
        delta_cond: one-step transition variances delta_{t|t-1}, shape (T + 1,).
        delta_tilde: posterior variances for the unit reverse step, shape (T + 1,).
        c_x, c_y, c_eps: reverse-step coefficients, shape (T + 1,).
    """

    T: int
    s_max: float
    m: np.ndarray
    delta: np.ndarray
    delta_cond: np.ndarray
    delta_tilde: np.ndarray
    c_x: np.ndarray
    c_y: np.ndarray
    c_eps: np.ndarray


def _pair_coefficients(m, delta, t: int, s: int):
    """Reverse coefficients for a jump t -> s (s < t) of the pinned bridge.

    Returns (c_x, c_y, c_eps, delta_tilde).  The final transition into t = T
    is deterministic (delta_T = 0), so the posterior there is just the
    marginal at s; that case is handled explicitly instead of through the 0/0
    the generic formulas would produce.
    """
    if not 0 <= s < t <= len(m) - 1:
        raise ValueError(f"need 0 <= s < t <= T, got t={t} s={s}")
    if delta[t] == 0.0:
        # x_t carries no information beyond y; posterior is the s marginal.
        return 1.0, 0.0, 1.0 - m[s], delta[s]
    a = (1.0 - m[t]) / (1.0 - m[s])
    d_cond = delta[t] - delta[s] * a * a
    c_x = (delta[s] / delta[t]) * a + (d_cond / delta[t]) * (1.0 - m[s])
    c_y = m[s] - m[t] * a * (delta[s] / delta[t])
    c_eps = (1.0 - m[s]) * (d_cond / delta[t])
    d_tilde = d_cond * delta[s] / delta[t]
    return c_x, c_y, c_eps, d_tilde


def build_schedule(T: int, s_max: float = 1.0) -> Schedule:
    """Build the default quadratic-variance bridge schedule.

    delta_t = 2 * s_max * m_t * (1 - m_t), maximal at mid-trajectory and zero
    at both endpoints.
    """
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if s_max <= 0:
        raise ValueError(f"need s_max > 0, got {s_max}")
    m = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * s_max * m * (1.0 - m)
    if np.any(delta[1:T] <= 0.0):
        raise ValueError("interior marginal variances must be positive")
    delta_cond = np.zeros(T + 1)
    delta_tilde = np.zeros(T + 1)
    c_x = np.zeros(T + 1)
    c_y = np.zeros(T + 1)
    c_eps = np.zeros(T + 1)
    for t in range(1, T + 1):
        if delta[t] == 0.0:
            delta_cond[t] = 0.0
        else:
            a = (1.0 - m[t]) / (1.0 - m[t - 1])
            delta_cond[t] = delta[t] - delta[t - 1] * a * a
        c_x[t], c_y[t], c_eps[t], delta_tilde[t] = _pair_coefficients(m, delta, t, t - 1)
    if np.any(delta_cond < -1e-12):
        raise ValueError("schedule has a negative transition variance")
    return Schedule(
        T=T,
        s_max=float(s_max),
        m=m,
        delta=delta,
        delta_cond=np.maximum(delta_cond, 0.0),
        delta_tilde=delta_tilde,
        c_x=c_x,
        c_y=c_y,
        c_eps=c_eps,
    )


def forward_sample(x0, y, t: int, eps, sched: Schedule):
    """Corrupt x0 toward y at step t with the given unit-normal draw."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    m_t = sched.m[t]
    return (1.0 - m_t) * x0 + m_t * y + np.sqrt(sched.delta[t]) * eps


def reverse_step(x_t, pred_x0, y, t: int, z, sched: Schedule, s: int | None = None):
    """One posterior step from t down to s (default t - 1).

    ``z`` is a unit-normal draw; the posterior variance is zero at t = 1 so
    the final step is deterministic regardless of z.
    """
    if s is None:
        s = t - 1
    c_x, c_y, c_eps, d_tilde = _pair_coefficients(sched.m, sched.delta, t, s)
    out = c_x * x_t + c_y * y - c_eps * (x_t - pred_x0)
    if d_tilde > 0.0 and z is not None:
        out = out + np.sqrt(d_tilde) * z
    return out


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Strictly decreasing timestep subset of the given size, spanning [1, T]."""
    if not 2 <= steps <= T:
        raise ValueError(f"need 2 <= steps <= T, got steps={steps} T={T}")
    seq = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    if len(seq) != steps:
        raise ValueError(f"steps={steps} collapses to {len(seq)} distinct timesteps")
    return seq[::-1].copy()


def sample(denoiser, y, cond, sched: Schedule, steps: int | None = None, rng=None):
    """Run the reverse chain from x_T = y down to an estimate of x0.

    Args:
        denoiser: callable (x_t, cond, t) -> pred_x0.
        y: condition image; also the chain start.
        cond: conditioning features passed through to the denoiser.
        steps: number of reverse applications (defaults to the full T).
        rng: numpy Generator for the stochastic chain; None runs the
            deterministic variant (the only mode for sub-sequenced runs).

    Returns the final state together with the trajectory of visited timesteps.
    """
    steps = sched.T if steps is None else steps
    seq = ddim_timesteps(sched.T, steps)
    if rng is not None and steps != sched.T:
        raise ValueError("stochastic sampling requires the full timestep ladder")
    x = np.array(y, copy=True)
    visited = []
    for k, t in enumerate(seq):
        s = int(seq[k + 1]) if k + 1 < len(seq) else 0
        pred = denoiser(x, cond, int(t))
        z = None
        if rng is not None and t > 1:
            z = rng.standard_normal(x.shape)
        x = reverse_step(x, pred, y, int(t), z, sched, s=s)
        visited.append(int(t))
    return x, visited
