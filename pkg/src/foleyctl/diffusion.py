"""DDPM core: noise schedules, forward noising, training loss, sampling.

The forward process q(z_t | z_0) = N(sqrt(abar_t) z_0, (1 - abar_t) I) and
the learned reverse chain both live here. Models plug in as callables
``model(z_t, t, cond) -> eps_hat`` predicting the added noise; ``t`` is
always a timestep of the *original* schedule (1-based), also when sampling
runs on a subsampled ladder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, as_tensor
from .errors import InvalidInput, ShapeError


@dataclass
class NoiseSchedule:
    """Variance schedule beta_1..beta_T with cached alpha products."""

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidInput("beta must be a non-empty 1-D sequence")
        if beta.min() <= 0.0 or beta.max() >= 1.0:
            raise InvalidInput(
                f"betas must lie in (0, 1), got range [{beta.min()}, {beta.max()}]"
            )
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return self.beta.size

    def check_t(self, t) -> np.ndarray:
        """Validate 1-based timesteps; returns them as an int array."""
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise InvalidInput(f"timesteps must be integers, got dtype {t.dtype}")
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise InvalidInput(f"timestep out of range [1, {self.T}]: {t}")
        return t

    def alpha_bar_prev(self, t: np.ndarray) -> np.ndarray:
        """abar_{t-1} with the convention abar_0 = 1."""
        return np.where(t > 1, self.alpha_bar[np.maximum(t - 2, 0)], 1.0)


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end over T steps."""
    if T < 1:
        raise InvalidInput(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end or beta_end >= 1.0:
        raise InvalidInput(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


@dataclass
class ConditioningBundle:
    """Everything the model may be conditioned on for one batch.

    ``semantic`` carries per-item embedding tokens, (batch, tokens, dim).
    ``control_latent`` is the encoded control envelope aligned with the
    model's latent time axis. ``cfg_dropout_mask`` selects items whose
    semantic conditioning is replaced by the learned null embedding: None
    keeps all, True drops all, a boolean vector drops per item.
    """

    semantic: np.ndarray | None = None
    seconds_start: float = 0.0
    seconds_total: float = 1.0
    control_latent: np.ndarray | None = None
    cfg_dropout_mask: np.ndarray | bool | None = None

    def __post_init__(self):
        if self.seconds_total <= 0:
            raise InvalidInput(f"seconds_total must be > 0, got {self.seconds_total}")
        for name in ("semantic", "control_latent"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(np.asarray(value)).all():
                raise InvalidInput(f"{name} contains non-finite values")

    def without_semantic(self) -> "ConditioningBundle":
        """The null-conditioned twin used for the CFG unconditional branch."""
        return replace(self, cfg_dropout_mask=True)


def _coeffs(s: NoiseSchedule, t: np.ndarray, like) -> tuple[np.ndarray, np.ndarray]:
    """(sqrt(abar_t), sqrt(1 - abar_t)) broadcast against ``like``."""
    abar = s.alpha_bar[t - 1]
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    if t.ndim == 1 and np.ndim(like) > 1:
        shape = (t.size,) + (1,) * (np.ndim(like) - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    dtype = like.dtype if hasattr(like, "dtype") else np.float64
    return a.astype(dtype), b.astype(dtype)


def q_sample(z0, t, eps, s: NoiseSchedule):
    """Diffuse clean data to timestep t: sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    Accepts numpy arrays or Tensors; per-item timesteps broadcast over the
    leading axis.
    """
    t = s.check_t(t)
    a, b = _coeffs(s, t, z0)
    return z0 * a + eps * b


def ddpm_loss(
    model,
    z0,
    cond: ConditioningBundle,
    s: NoiseSchedule,
    rng: np.random.Generator,
    cfg_dropout: float = 0.1,
) -> Tensor:
    """Noise-prediction training loss for one batch.

    Draws per-item timesteps and Gaussian noise, diffuses ``z0``, drops the
    semantic conditioning for a random subset of items (classifier-free
    guidance training), and returns mean squared error between the drawn
    and predicted noise.
    """
    data = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    batch = data.shape[0]
    t = rng.integers(1, s.T + 1, size=batch)
    eps = rng.standard_normal(data.shape).astype(data.dtype)
    z_t = q_sample(data, t, eps, s)
    if cfg_dropout > 0.0:
        mask = rng.random(batch) < cfg_dropout
        cond = replace(cond, cfg_dropout_mask=mask)
    eps_hat = as_tensor(model(z_t, t, cond))
    diff = eps_hat - as_tensor(eps)
    return (diff * diff).mean()


def posterior_variance(s: NoiseSchedule, t) -> np.ndarray:
    """Reverse-step variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
    t = s.check_t(t)
    abar_prev = s.alpha_bar_prev(t)
    abar = s.alpha_bar[t - 1]
    return (1.0 - abar_prev) / (1.0 - abar) * s.beta[t - 1]


def _as_array(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def p_step(model, z_t: np.ndarray, t: int, cond, s: NoiseSchedule,
           rng: np.random.Generator) -> np.ndarray:
    """One ancestral reverse step from z_t to z_{t-1}.

    The mean removes the model's predicted noise; fresh Gaussian noise with
    the posterior variance is added except at t = 1, which is deterministic.
    """
    t_arr = s.check_t(t)
    if t_arr.ndim != 0:
        raise InvalidInput("p_step expects a single timestep")
    t = int(t_arr)
    eps_hat = _as_array(model(z_t, t, cond))
    if eps_hat.shape != z_t.shape:
        raise ShapeError("model output shape differs from input", z_t.shape, eps_hat.shape)
    alpha = s.alpha[t - 1]
    abar = s.alpha_bar[t - 1]
    mean = (z_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(z_t.dtype)
    sigma = np.sqrt(posterior_variance(s, t))
    noise = rng.standard_normal(z_t.shape)
    return (mean + float(sigma) * noise).astype(z_t.dtype)


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    c, u = _as_array(eps_cond), _as_array(eps_uncond)
    if c.shape != u.shape:
        raise ShapeError("guidance branches disagree in shape", c.shape, u.shape)
    return u + scale * (c - u)


def _respaced(s: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Subsample the timestep ladder to ``steps`` entries.

    Returns a schedule whose cumulative products equal the original's at the
    retained timesteps, plus the retained original timesteps (descending).
    """
    if steps == s.T:
        return s, np.arange(s.T, 0, -1, dtype=np.int64)
    ladder = np.unique(np.round(np.linspace(1, s.T, steps)).astype(np.int64))
    abar = s.alpha_bar[ladder - 1]
    abar_prev = np.concatenate(([1.0], abar[:-1]))
    beta = 1.0 - abar / abar_prev
    return NoiseSchedule(beta), ladder[::-1]


def sample(
    model,
    shape: tuple,
    cond: ConditioningBundle,
    s: NoiseSchedule,
    rng: np.random.Generator,
    steps: int | None = None,
    cfg_scale: float = 1.0,
    dtype=np.float32,
) -> np.ndarray:
    """Draw a sample by iterating reverse steps down a subsampled ladder.

    ``steps = T`` (or None) runs the full chain. For cfg_scale != 1 the
    model is evaluated twice per step and the branches combined.
    """
    if steps is None:
        steps = s.T
    if not 1 <= steps <= s.T:
        raise InvalidInput(f"steps must be in [1, {s.T}], got {steps}")
    short, ladder = _respaced(s, steps)

    if cfg_scale == 1.0:
        guided = model
    else:
        null_cond = cond.without_semantic()

        def guided(z, t, c):
            return cfg_combine(model(z, t, c), model(z, t, null_cond), cfg_scale)

    z = rng.standard_normal(shape).astype(dtype)
    for i, t_orig in enumerate(ladder):
        t_short = short.T - i  # position in the respaced schedule

        def stepped(zz, _t, c, t_model=int(t_orig)):
            return guided(zz, t_model, c)

        z = p_step(stepped, z, t_short, cond, short, rng)
    return z


@dataclass
class SamplerConfig:
    """JSON-serializable sampling settings."""

    steps: int = 150
    cfg_scale: float = 2.0
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_json(self) -> str:
        return json.dumps(
            {
                "steps": self.steps,
                "cfg_scale": self.cfg_scale,
                "seed": self.seed,
                "schedule": {
                    "T": self.T,
                    "beta_start": self.beta_start,
                    "beta_end": self.beta_end,
                },
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SamplerConfig":
        try:
            payload = json.loads(text)
            sched = payload.get("schedule", {})
            return cls(
                steps=int(payload.get("steps", 150)),
                cfg_scale=float(payload.get("cfg_scale", 2.0)),
                seed=int(payload.get("seed", 0)),
                T=int(sched.get("T", 1000)),
                beta_start=float(sched.get("beta_start", 1e-4)),
                beta_end=float(sched.get("beta_end", 0.02)),
            )
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise InvalidInput(f"bad sampler config: {exc}") from exc
