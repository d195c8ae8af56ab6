"""Noise schedule, forward corruption, training loss, and reverse sampling.

The schedule is a logistic ramp: step i gets argument t_i spaced evenly over
[-6, 6] and beta_i = (1 - sigmoid(t_i)) * beta_start + sigmoid(t_i) * beta_end.
The convex form keeps the midpoint exactly halfway between the bounds.  The
head predicts injected noise; the sampler runs the standard ancestral reverse
chain with posterior variances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .autodiff import Tensor
from . import autodiff as ad
from .errors import ConfigError, NumericError


@dataclass
class NoiseSchedule:
    steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.steps,):
            raise ConfigError("schedule length disagrees with step count")
        if np.any(self.betas < self.beta_start) or np.any(self.betas > self.beta_end):
            raise ConfigError("betas escape [beta_start, beta_end]")
        if np.any(np.diff(self.betas) <= 0):
            raise ConfigError("betas must be strictly increasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(self.alpha_bars <= 0) or np.any(self.alpha_bars >= 1):
            raise ConfigError("alpha_bars escaped (0, 1)")

    def posterior_variance(self, i: int | np.ndarray) -> np.ndarray:
        """Variance of the reverse kernel at step i; zero at i = 0."""
        prev = np.where(np.asarray(i) > 0, self.alpha_bars[np.asarray(i) - 1], 1.0)
        return self.betas[i] * (1.0 - prev) / (1.0 - self.alpha_bars[i])

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end}


def beta_at(t, beta_start: float = 1e-5, beta_end: float = 0.1):
    """The logistic ramp at argument t.

    Written as a convex combination so the midpoint t = 0 lands exactly
    halfway between the bounds, with no rounding drift.
    """
    sig = 1.0 / (1.0 + np.exp(-np.asarray(t, dtype=np.float64)))
    return (1.0 - sig) * beta_start + sig * beta_end


def build_schedule(steps: int, beta_start: float = 1e-5,
                   beta_end: float = 0.1) -> NoiseSchedule:
    """Logistic schedule over endpoint-inclusive arguments in [-6, 6]."""
    if steps < 2:
        raise ConfigError("schedule needs at least 2 steps")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"invalid beta bounds ({beta_start}, {beta_end})")
    t = np.linspace(-6.0, 6.0, steps)
    return NoiseSchedule(steps, beta_start, beta_end,
                         beta_at(t, beta_start, beta_end))


def q_sample(x0, step, noise, schedule: NoiseSchedule):
    """Closed-form forward marginal x_t = sqrt(abar) x0 + sqrt(1-abar) eps."""
    abar = schedule.alpha_bars[step]
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(noise)


def predict_noise(x_t, step, condition: Tensor, params: dict[str, Tensor],
                  dims: mdl.ModelDims) -> Tensor:
    """Denoiser forward pass for scalars or batches."""
    x_arr = np.atleast_1d(np.asarray(x_t if not isinstance(x_t, Tensor) else x_t.data))
    step_arr = np.broadcast_to(np.atleast_1d(step), x_arr.shape)
    cond = condition if condition.ndim == 2 else ad.reshape(condition, (1, condition.shape[0]))
    if isinstance(x_t, Tensor) and x_t.ndim == 0:
        x_t = ad.reshape(x_t, (1,))
    elif not isinstance(x_t, Tensor):
        x_t = x_arr
    return mdl.denoise(x_t, step_arr, cond, params, dims)


def diffusion_loss(x0, condition: Tensor, rng: np.random.Generator,
                   schedule: NoiseSchedule, params: dict[str, Tensor],
                   dims: mdl.ModelDims, step=None, noise=None,
                   denoise_fn=None) -> Tensor:
    """Mean squared noise-prediction error over a batch.

    Steps are uniform over the schedule and the noise standard normal unless
    fixed explicitly (tests pin both).  ``denoise_fn`` substitutes the network
    with an oracle of signature (x_t, steps, condition) -> Tensor.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    B = x0.shape[0]
    if step is None:
        step = rng.integers(0, schedule.steps, size=B)
    step = np.broadcast_to(np.atleast_1d(step), (B,))
    if noise is None:
        noise = rng.standard_normal(B)
    noise = np.broadcast_to(np.atleast_1d(noise), (B,))
    x_t = q_sample(x0, step, noise, schedule)
    cond = condition if condition.ndim == 2 else ad.reshape(condition, (1, condition.shape[0]))
    if denoise_fn is None:
        eps_hat = mdl.denoise(x_t, step, cond, params, dims)
    else:
        eps_hat = denoise_fn(x_t, step, cond)
    target = Tensor(np.asarray(noise, dtype=eps_hat.dtype))
    return ad.tmean(ad.square(ad.sub(eps_hat, target)))


def p_sample_chain(condition: Tensor, schedule: NoiseSchedule,
                   params: dict[str, Tensor], dims: mdl.ModelDims,
                   rng: np.random.Generator, n_chains: int = 1,
                   denoise_fn=None) -> np.ndarray:
    """Run n_chains independent reverse chains for one condition vector.

    Returns standardized samples, shape (n_chains,).  The chain depends only
    on (condition, params, rng); non-finite states abort with the failing
    step index.
    """
    if n_chains < 1:
        raise ConfigError("need at least one chain")
    cond_data = condition.data if isinstance(condition, Tensor) else np.asarray(condition)
    if cond_data.ndim == 1:
        cond_data = cond_data[None, :]
    if cond_data.shape[0] == 1 and n_chains > 1:
        cond_data = np.broadcast_to(cond_data, (n_chains, cond_data.shape[1]))
    if cond_data.shape[0] != n_chains:
        raise ConfigError(f"{cond_data.shape[0]} conditions for {n_chains} chains")
    cond = Tensor(np.ascontiguousarray(cond_data))
    if denoise_fn is None:
        frozen = mdl.detach_params(params)

        def denoise_fn(x_t, steps, c):
            return mdl.denoise(x_t, steps, c, frozen, dims)

    x = rng.standard_normal(n_chains)
    for i in range(schedule.steps - 1, -1, -1):
        steps = np.full(n_chains, i, dtype=np.int64)
        eps_hat = denoise_fn(x, steps, cond).data.astype(np.float64)
        beta = schedule.betas[i]
        abar = schedule.alpha_bars[i]
        mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(schedule.alphas[i])
        if i > 0:
            sigma = np.sqrt(schedule.posterior_variance(i))
            x = mean + sigma * rng.standard_normal(n_chains)
        else:
            x = mean
        if not np.isfinite(x).all():
            bad = x[~np.isfinite(x)][0]
            raise NumericError(f"reverse chain diverged at step {i}: state {bad}")
    return x
