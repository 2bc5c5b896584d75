"""Diffusion transformer over codec latents.

Latent frames become tokens; three extra tokens carrying the timestep and
the clip's start/total seconds are prepended, and sinusoidal positions are
added over the whole sequence (prepended tokens included, so their order is
meaningful). Semantic conditioning enters through a cross-attention
sublayer in every block; when conditioning is dropped (classifier-free
guidance) the context is a single learned null embedding instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Tensor,
    as_tensor,
    concat,
    gelu,
    parameter,
    stack,
)
from .diffusion import ConditioningBundle
from .errors import InvalidInput, ShapeError

NUM_PREPEND = 3  # timestep, seconds_start, seconds_total


@dataclass
class DiTConfig:
    layers: int = 6
    model_dim: int = 64
    heads: int = 4
    depth_factor: float = 0.2
    cross_attn_dim: int = 16
    latent_channels: int = 8

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise InvalidInput(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )
        if not 0.0 < self.depth_factor <= 1.0:
            raise InvalidInput(f"depth_factor must be in (0, 1], got {self.depth_factor}")
        if self.layers < 1:
            raise InvalidInput(f"layers must be >= 1, got {self.layers}")

    @property
    def controlled_layers(self) -> int:
        return min(self.layers, int(np.ceil(self.depth_factor * self.layers)))

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "depth_factor": self.depth_factor,
            "cross_attn_dim": self.cross_attn_dim,
            "latent_channels": self.latent_channels,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DiTConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__ if k in payload})


def sinusoidal_embedding(values, dim: int, dtype=np.float32) -> np.ndarray:
    """Transformer-style sin/cos features of scalar positions, shape (..., dim)."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = values[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(dtype)


class DiTBlock(Module):
    """Pre-norm transformer block: self-attention, cross-attention, MLP."""

    def __init__(self, dim, heads, cross_dim, rng, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.cross = MultiHeadAttention(dim, heads, rng, context_dim=cross_dim, dtype=dtype)
        self.ln3 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, 4 * dim, rng, dtype=dtype)
        self.fc2 = Linear(4 * dim, dim, rng, dtype=dtype)

    def forward(self, x, context):
        x = x + self.attn(self.ln1(x))
        x = x + self.cross(self.ln2(x), context)
        return x + self.fc2(gelu(self.fc1(self.ln3(x))))


class DiTModel(Module):
    """Noise predictor eps_hat(z_t, t, cond) over (batch, channels, frames)."""

    def __init__(self, config: DiTConfig | None = None, rng=None, dtype=np.float32):
        super().__init__()
        self.config = config or DiTConfig()
        if rng is None:
            rng = np.random.default_rng(0)
        self.dtype = dtype
        cfg = self.config
        self.input_proj = Linear(cfg.latent_channels, cfg.model_dim, rng, dtype=dtype)
        self.t_proj = Linear(cfg.model_dim, cfg.model_dim, rng, dtype=dtype)
        self.start_proj = Linear(cfg.model_dim, cfg.model_dim, rng, dtype=dtype)
        self.total_proj = Linear(cfg.model_dim, cfg.model_dim, rng, dtype=dtype)
        self.null_semantic = parameter(
            (rng.standard_normal((1, 1, cfg.cross_attn_dim)) * 0.02).astype(dtype)
        )
        self.blocks = ModuleList(
            [
                DiTBlock(cfg.model_dim, cfg.heads, cfg.cross_attn_dim, rng, dtype=dtype)
                for _ in range(cfg.layers)
            ]
        )
        self.ln_f = LayerNorm(cfg.model_dim, dtype=dtype)
        self.head = Linear(cfg.model_dim, cfg.latent_channels, rng, dtype=dtype)

    # -- conditioning -------------------------------------------------------

    def build_context(self, batch: int, cond: ConditioningBundle) -> Tensor:
        """Cross-attention context (batch, tokens, cross_dim) honoring dropout."""
        cfg = self.config
        ones = np.ones((batch, 1, 1), dtype=self.dtype)
        null = self.null_semantic * as_tensor(ones)  # tiled to the batch
        if cond.semantic is None or cond.cfg_dropout_mask is True:
            return null
        sem = np.asarray(cond.semantic, dtype=self.dtype)
        if sem.ndim == 2:
            sem = np.broadcast_to(sem[None], (batch,) + sem.shape)
        if sem.ndim != 3 or sem.shape[0] != batch:
            raise ShapeError(
                "semantic must be (tokens, dim) or (batch, tokens, dim)", sem.shape
            )
        if sem.shape[-1] != cfg.cross_attn_dim:
            raise ShapeError(
                f"semantic dim {sem.shape[-1]} != cross_attn_dim {cfg.cross_attn_dim}",
                sem.shape,
            )
        mask = cond.cfg_dropout_mask
        if mask is None or mask is False:
            return as_tensor(sem)
        mask = np.asarray(mask, dtype=self.dtype).reshape(batch, 1, 1)
        # dropped rows take the (broadcast) null token in every context slot
        null_wide = self.null_semantic * as_tensor(np.ones_like(sem))
        return null_wide * as_tensor(mask) + as_tensor(sem * (1.0 - mask))

    def prepare_tokens(self, z_t, t, cond: ConditioningBundle) -> tuple[Tensor, Tensor]:
        """Token sequence (batch, prepend+frames, dim) and the cross context."""
        data = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
        if data.ndim != 3 or data.shape[1] != self.config.latent_channels:
            raise ShapeError(
                f"latent must be (batch, {self.config.latent_channels}, frames)",
                data.shape,
            )
        batch, _, frames = data.shape
        dim = self.config.model_dim
        tokens = self.input_proj(as_tensor(z_t).transpose(0, 2, 1))

        t_vals = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        t_tok = self.t_proj(as_tensor(sinusoidal_embedding(t_vals, dim, self.dtype)))
        ss = np.full(batch, cond.seconds_start)
        st = np.full(batch, cond.seconds_total)
        ss_tok = self.start_proj(as_tensor(sinusoidal_embedding(ss, dim, self.dtype)))
        st_tok = self.total_proj(as_tensor(sinusoidal_embedding(st, dim, self.dtype)))
        prepend = stack([t_tok, ss_tok, st_tok], axis=1)

        seq = concat([prepend, tokens], axis=1)
        positions = sinusoidal_embedding(
            np.arange(NUM_PREPEND + frames), dim, self.dtype
        )
        seq = seq + as_tensor(positions[None])
        return seq, self.build_context(batch, cond)

    def finish(self, seq: Tensor) -> Tensor:
        """Project tokens back to latent space, dropping the prepended ones."""
        out = self.head(self.ln_f(seq))
        return out[:, NUM_PREPEND:, :].transpose(0, 2, 1)

    def forward(self, z_t, t, cond: ConditioningBundle) -> Tensor:
        seq, context = self.prepare_tokens(z_t, t, cond)
        for block in self.blocks:
            seq = block(seq, context)
        return self.finish(seq)
