"""Noise schedule, DDIM sampling with classifier-free guidance, and inversion.

Timesteps are integers in [0, T); the pseudo-timestep -1 denotes the clean
image (alpha_bar == 1 exactly), which is where every denoising trajectory
ends and every inversion starts. Schedule coefficients are kept in float64
and cast to the working dtype at the point of use, so 32- and 64-bit runs
are each individually deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .numerics import Tensor, require_finite
from .unet import NULL_CONDITION, AttentionHook, Condition


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: Tensor        # length T, each in (0, 1)
    alphas_bar: Tensor   # length T, strictly decreasing, in [0, 1]

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64)
        abar = torch.as_tensor(self.alphas_bar, dtype=torch.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_bar", abar)
        if self.T < 1 or betas.shape != (self.T,) or abar.shape != (self.T,):
            raise ValueError(f"schedule arrays must have length T={self.T}")
        if (betas <= 0).any() or (betas >= 1).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if (abar < 0).any() or (abar > 1).any():
            raise ValueError("alphas_bar must lie in [0, 1]")
        if self.T > 1 and (abar[1:] >= abar[:-1]).any():
            raise ValueError("alphas_bar must be strictly decreasing")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    """Standard linear-beta DDPM schedule with cumulative-product alphas_bar."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T < 1:
        raise ValueError("T must be positive")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas_bar=alphas_bar)


def alpha_bar_at(schedule: NoiseSchedule, t: int) -> float:
    """alpha_bar for integer t in [-1, T); t == -1 is the clean image (== 1)."""
    if t == -1:
        return 1.0
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} out of range [-1, {schedule.T})")
    return float(schedule.alphas_bar[t])


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    guidance_scale: float = 7.0
    eta: float = 0.0
    rng_seed: int = 0
    swap_uncond: bool = False      # also hook the unconditional CFG pass
    t_start_frac: float = 0.6      # inversion depth as a fraction of T

    def __post_init__(self):
        if self.num_inference_steps < 0:
            raise ValueError("num_inference_steps must be nonnegative")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be nonnegative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not 0.0 < self.t_start_frac <= 1.0:
            raise ValueError("t_start_frac must lie in (0, 1]")


def inference_timesteps(T: int, num_steps: int) -> tuple:
    """Uniform-stride timestep subsequence, strictly decreasing, last step 0."""
    if num_steps > T:
        raise ValueError(f"cannot take {num_steps} inference steps over T={T}")
    return tuple((i * T) // num_steps for i in reversed(range(num_steps)))


def add_noise(x0: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """Forward process q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or a per-sample tensor matching x0's leading dim.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0/eps shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    if torch.is_tensor(t) and t.ndim > 0:
        if (t < 0).any() or (t >= schedule.T).any():
            raise ValueError(f"timestep out of range [0, {schedule.T})")
        abar = schedule.alphas_bar[t.long()]
        shape = (len(t),) + (1,) * (x0.ndim - 1)
        coef_x = abar.sqrt().reshape(shape).to(x0.dtype)
        coef_e = (1.0 - abar).sqrt().reshape(shape).to(x0.dtype)
    else:
        abar = alpha_bar_at(schedule, int(t))
        coef_x = x0.new_tensor(math.sqrt(abar))
        coef_e = x0.new_tensor(math.sqrt(1.0 - abar))
    return coef_x * x0 + coef_e * eps


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, w: float) -> Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond); exact at the endpoints w in {0, 1}."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("CFG inputs must share a shape")
    if w == 0.0:
        return eps_uncond.clone()
    if w == 1.0:
        return eps_cond.clone()
    return eps_uncond + w * (eps_cond - eps_uncond)


def predict_x0(x_t: Tensor, eps: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Invert the forward process for a known eps: (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    abar = alpha_bar_at(schedule, t)
    if abar <= 0.0:
        raise ValueError(f"alpha_bar at t={t} is zero; x0 is unrecoverable")
    return (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


def ddim_step(x_t: Tensor, eps_guided: Tensor, t: int, t_prev: int, eta: float,
              schedule: NoiseSchedule, rng: Optional[torch.Generator] = None) -> Tensor:
    """One DDIM update from timestep t down to t_prev (t_prev == -1 ends the chain)."""
    if t_prev >= t:
        raise ValueError(f"timesteps must decrease: t={t}, t_prev={t_prev}")
    abar_t = alpha_bar_at(schedule, t)
    abar_prev = alpha_bar_at(schedule, t_prev)
    x0_pred = predict_x0(x_t, eps_guided, t, schedule)
    sigma = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * math.sqrt(
        1.0 - abar_t / abar_prev
    ) if eta > 0.0 and abar_prev < 1.0 else 0.0
    dir_coef = math.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))
    x_prev = math.sqrt(abar_prev) * x0_pred + dir_coef * eps_guided
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng for the variance term")
        noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        x_prev = x_prev + sigma * noise
    require_finite("ddim_step output", x_prev)
    return x_prev


def ddim_invert_step(x: Tensor, eps: Tensor, t_from: int, t_to: int,
                     schedule: NoiseSchedule) -> Tensor:
    """Algebraic mirror of the eta=0 ddim_step: map x at t_from up to t_to."""
    if t_to <= t_from:
        raise ValueError(f"inversion timesteps must increase: {t_from} -> {t_to}")
    abar_from = alpha_bar_at(schedule, t_from)
    abar_to = alpha_bar_at(schedule, t_to)
    x0_pred = (x - math.sqrt(1.0 - abar_from) * eps) / math.sqrt(abar_from)
    return math.sqrt(abar_to) * x0_pred + math.sqrt(1.0 - abar_to) * eps


@dataclass(frozen=True)
class StepRecord:
    """State entering one denoising step: the step index, its timestep, and x_t."""

    step_index: int
    t: int
    x_t: Tensor


@dataclass(frozen=True)
class SampleResult:
    image: Tensor
    steps: tuple            # StepRecord per executed step, in order
    timesteps: tuple        # the full inference timestep sequence


# A hook factory yields one per-forward-pass hook per denoising step (or None).
HookFactory = Callable[[int, int], Optional[AttentionHook]]


def _guided_eps(model, x, t, cond, w, hook, swap_uncond):
    hook_u = hook if swap_uncond else None
    with torch.no_grad():
        eps_u = model(x, t, NULL_CONDITION, hook=hook_u)
        eps_c = model(x, t, cond, hook=hook)
    return cfg_combine(eps_u, eps_c, w)


def sample(model, cond: Condition, config: SamplerConfig, schedule: NoiseSchedule,
           hook_factory: Optional[HookFactory] = None, x_init: Optional[Tensor] = None,
           start_step: int = 0) -> SampleResult:
    """Run the DDIM + CFG denoising loop for one image.

    Each step runs an unconditional and a conditional forward pass; only the
    conditional pass sees the step's hook unless config.swap_uncond is set.
    x_init/start_step let inversion-based references resume mid-trajectory:
    x_init must then be the state at timestep ``timesteps[start_step]``.
    """
    timesteps = inference_timesteps(schedule.T, config.num_inference_steps)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(config.rng_seed)
    spec = model.spec
    if x_init is None:
        if start_step != 0:
            raise ValueError("start_step requires an explicit x_init")
        x = torch.randn(
            (spec.in_channels, spec.image_size, spec.image_size), generator=gen, dtype=dtype
        )
    else:
        if not 0 <= start_step < max(len(timesteps), 1):
            raise ValueError(f"start_step {start_step} outside the timestep sequence")
        x = x_init.to(dtype)

    records = []
    for i in range(start_step, len(timesteps)):
        t = timesteps[i]
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        hook = hook_factory(i, t) if hook_factory is not None else None
        records.append(StepRecord(i, t, x.clone()))
        eps = _guided_eps(model, x, t, cond, config.guidance_scale, hook, config.swap_uncond)
        x = ddim_step(x, eps, t, t_prev, config.eta, schedule, rng=gen)
    return SampleResult(image=x, steps=tuple(records), timesteps=timesteps)


def stochastic_invert(x_real: Tensor, t_start: int, schedule: NoiseSchedule,
                      rng: torch.Generator) -> Tensor:
    """Noise a clean image to timestep t_start with fresh Gaussian noise."""
    eps = torch.randn(x_real.shape, generator=rng, dtype=x_real.dtype)
    return add_noise(x_real, eps, t_start, schedule)


def ddim_invert(model, x_real: Tensor, cond: Condition, config: SamplerConfig,
                schedule: NoiseSchedule) -> Tensor:
    """Deterministic (eta=0) reversed DDIM recursion from the clean image.

    Returns the estimated state at the first inference timestep, ready to be
    passed to sample(x_init=..., start_step=0) for reconstruction.
    """
    timesteps = inference_timesteps(schedule.T, config.num_inference_steps)
    dtype = next(model.parameters()).dtype
    x = x_real.to(dtype)
    t_from = -1
    for t_to in reversed(timesteps):  # ascending noise levels
        eps = _guided_eps(model, x, t_to, cond, config.guidance_scale, None, False)
        x = ddim_invert_step(x, eps, t_from, t_to, schedule)
        t_from = t_to
    require_finite("ddim_invert output", x)
    return x


def snap_to_timestep(timesteps: Sequence[int], t_start: int):
    """Nearest inference timestep to t_start; returns (step_index, timestep)."""
    if not timesteps:
        raise ValueError("empty timestep sequence")
    best = min(range(len(timesteps)), key=lambda i: (abs(timesteps[i] - t_start), i))
    return best, timesteps[best]
