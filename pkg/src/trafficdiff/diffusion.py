"""Noise schedules and the reverse-process sampling math.

The log schedule keeps the signal-to-noise ratio low through most of the
corruption range; the cosine schedule is the standard baseline. Sampling
operates on normalized action tensors shaped (..., A, T_f, 2).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiffusionConfig",
    "NoiseSchedule",
    "ScheduleError",
    "build_log_schedule",
    "build_cosine_schedule",
    "build_schedule",
    "q_sample",
    "posterior_mean",
    "ddpm_step",
    "ddim_step",
    "ddim_stride",
    "sample",
]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    k_steps: int = 50
    delta: float = 0.0031
    alpha_bar_min: float = 1e-9
    cosine_offset: float = 0.008
    action_repeat: int = 2
    horizon: int = 80

    def __post_init__(self):
        if self.k_steps < 1:
            raise ScheduleError("k_steps must be >= 1")
        if self.delta <= 0:
            raise ScheduleError("delta must be positive")
        if self.horizon % self.action_repeat != 0:
            raise ScheduleError("horizon must be divisible by action_repeat")

    @property
    def t_f(self) -> int:
        return self.horizon // self.action_repeat


@dataclass
class NoiseSchedule:
    """Corruption tables indexed k = 0..K; index 0 is the clean level.

    beta[0], alpha[0] and sigma[0] are placeholders (no step 0). sigma is the
    DDPM posterior standard deviation sigma_k^2 = (1-abar_{k-1})/(1-abar_k) *
    beta_k, which vanishes at k=1 so final samples are noiseless.
    """

    kind: str
    k_steps: int
    alpha_bar: np.ndarray  # (K+1,)
    beta: np.ndarray  # (K+1,), beta[0] unused
    alpha: np.ndarray  # (K+1,), alpha[0] = 1
    sigma: np.ndarray  # (K+1,), sigma[0] unused

    def validate(self, consistency_tol: float = 1e-6):
        ab = self.alpha_bar
        if abs(ab[0] - 1.0) > 1e-12:
            raise ScheduleError(f"alpha_bar[0] = {ab[0]}, expected 1")
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        inner = self.beta[1:]
        if not np.all((inner > 0) & (inner <= 0.999)):
            raise ScheduleError("beta out of (0, 0.999]")
        # consistency alpha_bar[k] = alpha_bar[k-1] * alpha[k] holds except
        # where the 0.999 beta cap bound the final clamped step
        recon = ab[:-1] * self.alpha[1:]
        uncapped = self.beta[1:] < 0.999
        err = np.abs(recon - ab[1:])[uncapped]
        if err.size and err.max() > consistency_tol:
            raise ScheduleError(f"alpha_bar/beta inconsistency {err.max():.3g}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["k", "alpha_bar", "beta", "sigma"])
        for k in range(self.k_steps + 1):
            w.writerow([k, repr(float(self.alpha_bar[k])), repr(float(self.beta[k])), repr(float(self.sigma[k]))])
        return buf.getvalue()


def _finalize(kind: str, alpha_bar: np.ndarray, cfg: DiffusionConfig) -> NoiseSchedule:
    alpha_bar = np.maximum(alpha_bar, cfg.alpha_bar_min)
    beta = np.zeros_like(alpha_bar)
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    sigma = np.zeros_like(alpha_bar)
    sigma[1:] = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
    schedule = NoiseSchedule(kind, cfg.k_steps, alpha_bar, beta, alpha, sigma)
    schedule.validate()
    return schedule


def build_log_schedule(cfg: DiffusionConfig = DiffusionConfig()) -> NoiseSchedule:
    K, d = cfg.k_steps, cfg.delta
    ks = np.arange(K + 1, dtype=np.float64)
    f = np.log((K + K * d) / (ks + K * d))
    return _finalize("log", f / f[0], cfg)


def build_cosine_schedule(cfg: DiffusionConfig = DiffusionConfig()) -> NoiseSchedule:
    K, s = cfg.k_steps, cfg.cosine_offset
    ks = np.arange(K + 1, dtype=np.float64)
    f = np.cos((ks / K + s) / (1 + s) * math.pi / 2.0) ** 2
    return _finalize("cosine", f / f[0], cfg)


def build_schedule(kind: str, cfg: DiffusionConfig = DiffusionConfig()) -> NoiseSchedule:
    if kind == "log":
        return build_log_schedule(cfg)
    if kind == "cosine":
        return build_cosine_schedule(cfg)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# forward corruption and reverse steps (plain numpy; guidance re-enters
# through the mean-shift hook of sample())
# ---------------------------------------------------------------------------


def _check_k(schedule: NoiseSchedule, k: int, low: int = 0):
    if not low <= k <= schedule.k_steps:
        raise ScheduleError(f"k={k} outside [{low}, {schedule.k_steps}]")


def q_sample(u_clean: np.ndarray, k: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    _check_k(schedule, k)
    ab = schedule.alpha_bar[k]
    return math.sqrt(ab) * u_clean + math.sqrt(1.0 - ab) * noise


def posterior_mean(u_noised, u_hat_clean, k: int, schedule: NoiseSchedule) -> np.ndarray:
    _check_k(schedule, k, low=1)
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k - 1]
    beta = schedule.beta[k]
    alpha = schedule.alpha[k]
    c_clean = math.sqrt(ab_prev) * beta / (1.0 - ab_k)
    c_noised = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_k)
    return c_clean * np.asarray(u_hat_clean) + c_noised * np.asarray(u_noised)


def ddpm_step(u_noised, u_hat_clean, k: int, schedule: NoiseSchedule, rng: np.random.Generator):
    """One reverse step; the noise increment is drawn even when sigma_k = 0 so
    guided and unguided runs consume identical randomness."""
    mu = posterior_mean(u_noised, u_hat_clean, k, schedule)
    z = rng.standard_normal(np.shape(mu))
    return mu + schedule.sigma[k] * z


def ddim_step(u_noised, u_hat_clean, k: int, k_prev: int, schedule: NoiseSchedule):
    if not 0 <= k_prev < k:
        raise ScheduleError(f"need 0 <= k_prev < k, got k_prev={k_prev}, k={k}")
    ab_k = schedule.alpha_bar[k]
    if 1.0 - ab_k <= 0:
        raise ScheduleError(f"cannot invert at k={k} with alpha_bar=1")
    ab_prev = schedule.alpha_bar[k_prev]
    eps_hat = (np.asarray(u_noised) - math.sqrt(ab_k) * np.asarray(u_hat_clean)) / math.sqrt(
        1.0 - ab_k
    )
    return math.sqrt(ab_prev) * np.asarray(u_hat_clean) + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_stride(k_steps: int, n_steps: int) -> list[tuple[int, int]]:
    """Uniform-in-k stride: (k, k_prev) pairs from K down to 0."""
    if not 1 <= n_steps <= k_steps:
        raise ScheduleError(f"n_steps must be in [1, {k_steps}]")
    ks = [round(k_steps - i * k_steps / n_steps) for i in range(n_steps)] + [0]
    return [(int(a), int(b)) for a, b in zip(ks[:-1], ks[1:])]


def parse_sampler(spec: str) -> tuple[str, int | None]:
    """'ddpm' or 'ddim:<n>' -> (kind, n_steps)."""
    if spec == "ddpm":
        return "ddpm", None
    if spec.startswith("ddim:"):
        n = int(spec.split(":", 1)[1])
        return "ddim", n
    raise ScheduleError(f"unknown sampler {spec!r}")


def sample(
    denoiser_fn,
    shape: tuple,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    sampler: str = "ddpm",
    guidance=None,
):
    """Full reverse loop from standard normal noise.

    denoiser_fn(u_noised, k) -> u_hat_clean, both plain arrays of ``shape``.
    ``guidance``, when given, must expose guided_mean(u_noised, u_hat, k) for
    DDPM and guided_ddim_target(u_noised, u_hat, k, k_prev) for DDIM (see the
    guidance module); it perturbs only the mean, never the noise draw.
    """
    kind, n_steps = parse_sampler(sampler)
    u = rng.standard_normal(shape)
    if kind == "ddpm":
        for k in range(schedule.k_steps, 0, -1):
            u_hat = denoiser_fn(u, k)
            if guidance is not None:
                mu = guidance.guided_mean(u, u_hat, k)
            else:
                mu = posterior_mean(u, u_hat, k, schedule)
            z = rng.standard_normal(shape)
            u = mu + schedule.sigma[k] * z
        return u
    for k, k_prev in ddim_stride(schedule.k_steps, n_steps):
        u_hat = denoiser_fn(u, k)
        if guidance is not None:
            u = guidance.guided_ddim_target(u, u_hat, k, k_prev)
        else:
            u = ddim_step(u, u_hat, k, k_prev, schedule)
    return u
