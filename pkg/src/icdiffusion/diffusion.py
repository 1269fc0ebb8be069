"""Denoising-diffusion core: schedules, forward process, loss, samplers, CFG.

All operations are pure tensor functions; randomness always enters through an
explicit noise argument or a seeded generator, so everything here is exactly
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with running products, float64 for exactness.

    Arrays are indexed by t - 1 for t in [1, T]; alpha_bar_at(0) == 1.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: torch.Tensor = field(repr=False)
    alpha: torch.Tensor = field(repr=False)
    alpha_bar: torch.Tensor = field(repr=False)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0): beta_t (1 - abar_{t-1}) / (1 - abar_t)."""
        return self.beta_at(t) * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear schedule inclusive of both endpoints; alpha_bar by running product."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    assert torch.all(alpha_bar > 0) and torch.all(alpha_bar < 1)
    assert torch.all(alpha_bar[1:] < alpha_bar[:-1]), "alpha_bar must strictly decrease"
    return NoiseSchedule(T=T, beta_start=beta_start, beta_end=beta_end, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-noise x0 to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    `t` may be an int (one step for the whole tensor) or a 1-d tensor of
    per-item steps for a batched x0.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, int):
        _check_t(t, schedule)
        abar = x0.new_tensor(schedule.alpha_bar_at(t))
    else:
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > schedule.T):
            raise ValueError("t outside [1, T]")
        abar = schedule.alpha_bar.to(x0.dtype)[t - 1].reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def training_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return torch.mean((eps_hat - eps) ** 2)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + w (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance branches must agree in shape")
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 0.0:
        return eps_uncond
    if w == 1.0:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule, clamp: bool = True) -> torch.Tensor:
    """Invert the forward process: (x_t - sqrt(1-abar) eps) / sqrt(abar), optionally clamped."""
    _check_t(t, schedule)
    abar = schedule.alpha_bar_at(t)
    x0 = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    return torch.clamp(x0, -1.0, 1.0) if clamp else x0


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    clamp_x0: bool = True,
) -> torch.Tensor:
    """One DDIM transition t -> t_prev with stochasticity eta in [0, 1].

    The x0 prediction is clamped to [-1, 1] and the effective epsilon is
    recomputed from the clamped value before forming the transition; when the
    prediction is already in range this is the original eps_hat.
    """
    if not (schedule.T >= t > t_prev >= 0):
        raise ValueError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    abar_t = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t_prev)
    x0 = predict_x0(x_t, eps_hat, t, schedule, clamp=clamp_x0)
    eps_eff = (x_t - np.sqrt(abar_t) * x0) / np.sqrt(1.0 - abar_t)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    dir_coeff = np.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
    out = np.sqrt(abar_prev) * x0 + dir_coeff * eps_eff
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic DDIM step requires noise")
        out = out + sigma * noise
    return out


def ddpm_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    clamp_x0: bool = True,
) -> torch.Tensor:
    """One ancestral step t -> t-1 using the x0-clamped posterior mean.

    The posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t) vanishes at
    t = 1, which realizes the no-noise rule at the final step.
    """
    _check_t(t, schedule)
    abar_t = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t - 1)
    beta_t = schedule.beta_at(t)
    alpha_t = schedule.alpha_at(t)
    x0 = predict_x0(x_t, eps_hat, t, schedule, clamp=clamp_x0)
    mean = (
        np.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * x0
        + np.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t) * x_t
    )
    var = schedule.posterior_variance(t)
    if var > 0:
        if noise is None:
            raise ValueError("ddpm step at t > 1 requires noise")
        mean = mean + np.sqrt(var) * noise
    return mean


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"  # "ddim" | "ddpm"
    steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.5
    seed: int = 0
    clamp_x0: bool = True
    cfg_drops_images: bool = False  # if true, the unconditional branch also drops prompt images

    def validate(self, T: int) -> None:
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must be in [1, T={T}], got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


def timestep_map(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps in [1, T] ending the chain at 0."""
    if steps == T:
        ts = list(range(T, 0, -1))
    else:
        ts = sorted({int(round(x)) for x in np.linspace(1, T, steps)}, reverse=True)
    return ts


def _null_text(prompt):
    if isinstance(prompt, (list, tuple)):
        return [p.without_text() for p in prompt]
    return prompt.without_text()


def _null_images(prompt):
    if isinstance(prompt, (list, tuple)):
        return [p.without_images() for p in prompt]
    return prompt.without_images()


def sample(
    eps_predictor,
    prompt,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Generate images by iterating the configured sampler from seeded noise.

    `eps_predictor(x_t, t, prompt)` must return an eps estimate of x_t's
    shape. `prompt` (a single object or a list for batched sampling) must
    implement `without_text()` returning its null-text variant; CFG evaluates
    the predictor on both variants each step and combines them with
    `guidance_scale`. The returned image batch is clamped to [-1, 1].
    """
    config.validate(schedule.T)
    rng = np.random.default_rng(np.uint64(config.seed))
    x = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    uncond_prompt = _null_text(prompt)
    if config.cfg_drops_images:
        uncond_prompt = _null_images(uncond_prompt)
    ts = timestep_map(schedule.T, config.steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_c = eps_predictor(x, t, prompt)
        eps_u = eps_predictor(x, t, uncond_prompt)
        eps = cfg_combine(eps_u, eps_c, config.guidance_scale)
        needs_noise = (config.kind == "ddpm") or (config.eta > 0 and t_prev > 0)
        noise = torch.from_numpy(rng.standard_normal(shape)).to(dtype) if needs_noise else None
        if config.kind == "ddpm" and t_prev == t - 1:
            x = ddpm_step(x, eps, t, schedule, noise, clamp_x0=config.clamp_x0)
        else:
            eta = 1.0 if config.kind == "ddpm" else config.eta
            x = ddim_step(x, eps, t, t_prev, eta, schedule, noise, clamp_x0=config.clamp_x0)
    return torch.clamp(x, -1.0, 1.0)
