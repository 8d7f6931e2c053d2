"""Noise schedules, closed-form forward noising and deterministic DDIM sampling.

All formulas use the cumulative-product convention: ``alpha_bar[t]`` is the
fraction of signal variance left at timestep ``t``.  Timestep ``-1`` denotes
the clean output (``alpha_bar = 1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np


class ScheduleError(ValueError):
    pass


class HookContractError(RuntimeError):
    """A sampling hook returned a latent of the wrong shape."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    ddim_steps: tuple[int, ...]

    def __post_init__(self):
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ScheduleError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        steps = self.ddim_steps
        if not steps or steps[0] != self.T - 1:
            raise ScheduleError("ddim_steps must start at T-1")
        if any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] < 0:
            raise ScheduleError("ddim_steps must be strictly decreasing within [0, T)")

    def alpha_bar(self, t: int) -> float:
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])

    def nearest_step_index(self, t: float) -> int:
        """Position in ``ddim_steps`` closest to ``t``; ties go to the earlier (noisier) step."""
        steps = np.asarray(self.ddim_steps)
        return int(np.argmin(np.abs(steps - t)))

    def with_alpha_bars(self, alpha_bars) -> "NoiseSchedule":
        """Schedule with the given cumulative products (betas re-derived)."""
        ab = np.asarray(alpha_bars, dtype=float)
        alphas = ab / np.concatenate(([1.0], ab[:-1]))
        return replace(self, alphas=alphas, betas=1 - alphas, alpha_bars=ab)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                    num_ddim_steps: int = 25) -> NoiseSchedule:
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 < num_ddim_steps <= T:
        raise ScheduleError(f"need 1 < num_ddim_steps <= T, got {num_ddim_steps} for T={T}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    steps = np.unique(np.round(np.linspace(0, T - 1, num_ddim_steps)).astype(int))[::-1]
    return NoiseSchedule(T, betas, alphas, alpha_bars, tuple(int(s) for s in steps))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ScheduleError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def noise_to_t(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    _check_same_shape(z0, eps, "noise_to_t")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def predict_z0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Clean-point estimate from a noisy latent and its predicted noise."""
    _check_same_shape(z_t, eps_hat, "predict_z0")
    ab = schedule.alpha_bar(t)
    if ab <= 0.0:
        raise ZeroDivisionError(f"alpha_bar[{t}] = 0: clean point is undefined")
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One eta=0 DDIM update from ``t`` to ``t_prev``; ``t_prev=-1`` returns the clean estimate."""
    if not (t > t_prev >= -1):
        raise ScheduleError(f"DDIM step must go to an earlier timestep, got {t} -> {t_prev}")
    z0_hat = predict_z0(z_t, eps_hat, t, schedule)
    if t_prev == -1:
        return z0_hat
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def eps_of(output) -> np.ndarray:
    """Accept either a bare noise prediction or an object carrying ``eps_hat``."""
    return output if isinstance(output, np.ndarray) else output.eps_hat


@dataclass
class SamplerState:
    z: np.ndarray
    step_index: int
    initial_noise: np.ndarray
    rng_seed: int
    schedule: NoiseSchedule = field(repr=False, default=None)

    @property
    def t(self) -> int:
        return self.schedule.ddim_steps[self.step_index]


Denoiser = Callable[[np.ndarray, int, object], object]
Hook = tuple[Callable[[int], bool], Callable[[np.ndarray, int, SamplerState], np.ndarray]]


def _next_t(schedule: NoiseSchedule, i: int) -> int:
    steps = schedule.ddim_steps
    return steps[i + 1] if i + 1 < len(steps) else -1


def fast_lookahead(state: SamplerState, N: int, denoiser: Denoiser, conditioning,
                   schedule: NoiseSchedule) -> tuple[np.ndarray, int]:
    """Run up to ``N`` DDIM steps on a copy of the state.

    Returns the advanced latent and its timestep.  Running off the end of the
    schedule yields the final clean estimate, reported at timestep 0.
    """
    if N < 1:
        raise ScheduleError(f"lookahead needs N >= 1, got {N}")
    if not 0 <= state.step_index < len(schedule.ddim_steps):
        raise ScheduleError("no remaining DDIM steps to look ahead over")
    z = state.z.copy()
    i = state.step_index
    t = schedule.ddim_steps[i]
    for _ in range(N):
        t_prev = _next_t(schedule, i)
        z = ddim_step(z, eps_of(denoiser(z, t, conditioning)), t, t_prev, schedule)
        if t_prev == -1:
            return z, 0
        i, t = i + 1, t_prev
    return z, t


@dataclass
class LoopTrace:
    events: list[tuple[int, bool]] = field(default_factory=list)


def sample_loop(z_T: np.ndarray, denoiser: Denoiser, conditioning, schedule: NoiseSchedule,
                hooks: Sequence[Hook] = (), *, initial_noise: np.ndarray | None = None,
                rng_seed: int = 0, start_index: int = 0) -> tuple[np.ndarray, LoopTrace]:
    """Deterministic DDIM over ``schedule.ddim_steps[start_index:]``.

    After each new ``z_t`` is computed, every hook whose predicate accepts ``t``
    may replace it.  The starting latent is never passed to hooks.
    """
    state = SamplerState(
        z=np.array(z_T, dtype=float),
        step_index=start_index,
        initial_noise=np.array(z_T if initial_noise is None else initial_noise, dtype=float),
        rng_seed=rng_seed,
        schedule=schedule,
    )
    trace = LoopTrace()
    steps = schedule.ddim_steps
    for i in range(start_index, len(steps)):
        t = steps[i]
        t_prev = _next_t(schedule, i)
        state.z = ddim_step(state.z, eps_of(denoiser(state.z, t, conditioning)), t, t_prev, schedule)
        if t_prev == -1:
            break
        state.step_index = i + 1
        applied = False
        for predicate, callback in hooks:
            if predicate(t_prev):
                new_z = callback(state.z, t_prev, state)
                if np.shape(new_z) != state.z.shape:
                    raise HookContractError(
                        f"hook at t={t_prev} returned shape {np.shape(new_z)}, expected {state.z.shape}"
                    )
                state.z = np.asarray(new_z, dtype=float)
                applied = True
        trace.events.append((t_prev, applied))
    return state.z, trace


def sdedit_start_index(strength: float, schedule: NoiseSchedule) -> int:
    if not 0.0 < strength <= 1.0:
        raise ScheduleError(f"SDEdit strength must lie in (0, 1], got {strength}")
    return schedule.nearest_step_index(round(strength * (schedule.T - 1)))


def sdedit_sample(x_orig: np.ndarray, strength: float, denoiser: Denoiser, conditioning,
                  schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Noise the original to the strength-selected step and denoise without hooks."""
    i = sdedit_start_index(strength, schedule)
    eps = np.random.default_rng(seed).standard_normal(np.shape(x_orig))
    z = noise_to_t(np.asarray(x_orig, dtype=float), schedule.ddim_steps[i], eps, schedule)
    out, _ = sample_loop(z, denoiser, conditioning, schedule, start_index=i,
                         initial_noise=eps, rng_seed=seed)
    return out
