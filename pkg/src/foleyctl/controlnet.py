"""Control branch over a frozen diffusion transformer.

The branch copies the first ceil(depth_factor * layers) blocks of a trained
base model. Per controlled layer, a zero-initialized 1x1 convolution maps
the control latent into token space and another one gates the copy's output
back into the trunk, so an untrained branch is exactly inert:

    h_ctrl = zero_in_i(control) + h_in
    out_i  = frozen_i(h_in) + zero_out_i(copy_i(h_ctrl))

Only branch parameters train; the base (its null embedding included) stays
frozen throughout.
"""
from __future__ import annotations

import numpy as np

from .autodiff import AdamW, Conv1d, Module, ModuleList, Tensor, as_tensor, concat
from .diffusion import ConditioningBundle, NoiseSchedule, ddpm_loss
from .dit import NUM_PREPEND, DiTBlock, DiTModel
from .errors import InvalidInput, ShapeError


class ControlNetBranch(Module):
    """Trainable layer copies plus zero projections for the first N layers."""

    def __init__(self, base: DiTModel, rng=None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        cfg = base.config
        n = cfg.controlled_layers
        self.num_controlled = n
        self.zero_in = ModuleList(
            [
                Conv1d(cfg.latent_channels, cfg.model_dim, 1, rng, dtype=dtype).zero_()
                for _ in range(n)
            ]
        )
        copies = []
        for i in range(n):
            copy = DiTBlock(cfg.model_dim, cfg.heads, cfg.cross_attn_dim, rng, dtype=dtype)
            copy.load_state_dict(base.blocks[i].state_dict())
            copies.append(copy)
        self.copies = ModuleList(copies)
        self.zero_out = ModuleList(
            [
                Conv1d(cfg.model_dim, cfg.model_dim, 1, rng, dtype=dtype).zero_()
                for _ in range(n)
            ]
        )


def attach_controlnet(base: DiTModel, rng=None, dtype=np.float32) -> ControlNetBranch:
    """Freeze the base model and return a fresh branch over its first layers.

    The number of controlled layers comes from the base config's
    depth_factor; projections start at exactly zero, so until training the
    branch cannot change any output.
    """
    branch = ControlNetBranch(base, rng, dtype=dtype)
    base.freeze()
    return branch


def _control_tokens(branch: ControlNetBranch, i: int, control: Tensor,
                    prepend: int) -> Tensor:
    """zero_in_i over the control latent, padded for the prepended tokens."""
    proj = branch.zero_in[i](control).transpose(0, 2, 1)  # (B, frames, dim)
    pad = np.zeros((proj.shape[0], prepend, proj.shape[2]), dtype=proj.dtype)
    return concat([as_tensor(pad), proj], axis=1)


def controlled_forward(
    base: DiTModel, branch: ControlNetBranch, z_t, t, cond: ConditioningBundle
) -> Tensor:
    """Forward pass with the control branch feeding the first layers."""
    if cond.control_latent is None:
        raise InvalidInput("controlled_forward needs cond.control_latent")
    data = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    control = np.asarray(cond.control_latent, dtype=base.dtype)
    if control.ndim == 2:
        control = np.broadcast_to(control[None], (data.shape[0],) + control.shape)
    if control.shape != data.shape:
        raise ShapeError(
            "control latent must match the diffusion latent", data.shape, control.shape
        )
    control = as_tensor(control)

    seq, context = base.prepare_tokens(z_t, t, cond)
    for i, block in enumerate(base.blocks):
        trunk = block(seq, context)
        if i < branch.num_controlled:
            h_ctrl = seq + _control_tokens(branch, i, control, NUM_PREPEND)
            side = branch.copies[i](h_ctrl, context)
            gated = branch.zero_out[i](side.transpose(0, 2, 1)).transpose(0, 2, 1)
            trunk = trunk + gated
        seq = trunk
    return base.finish(seq)


class _Ema:
    """Exponential moving average of the optimizer's parameters.

    The averaged copy is kept off to the side during training and written
    back into the live parameters once the run ends; averaged weights
    produce noticeably steadier samplers than the last raw iterate. The
    effective decay is capped at (1+t)/(10+t) so short runs average over
    roughly their last tenth instead of being dragged toward the random
    initialization.
    """

    def __init__(self, params, decay: float):
        if not 0.0 <= decay < 1.0:
            raise InvalidInput(f"ema_decay must be in [0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]
        self.updates = 0

    def update(self) -> None:
        self.updates += 1
        d = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def write_back(self) -> None:
        for s, p in zip(self.shadow, self.params):
            np.copyto(p.data, s)


def train_dit(
    model: DiTModel,
    latents: np.ndarray,
    semantic: np.ndarray | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    steps: int,
    batch_size: int = 12,
    lr: float = 1e-4,
    weight_decay: float = 1e-3,
    seconds_total: float = 1.0,
    cfg_dropout: float = 0.1,
    ema_decay: float | None = None,
) -> list[float]:
    """Pretrain the base noise predictor on clean latents.

    ``semantic`` is (n, tokens, dim) aligned with ``latents`` (n, c, frames),
    or None for a purely unconditional model. ``ema_decay`` switches the
    returned weights to an exponential moving average of the iterates; the
    loss log always reflects the live weights.
    """
    if latents.shape[0] == 0:
        raise InvalidInput("empty training set")
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    ema = None if ema_decay is None else _Ema(model.parameters(), ema_decay)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, latents.shape[0], size=min(batch_size, latents.shape[0]))
        cond = ConditioningBundle(
            semantic=None if semantic is None else semantic[idx],
            seconds_total=seconds_total,
        )
        opt.zero_grad()
        loss = ddpm_loss(model, latents[idx], cond, schedule, rng,
                         cfg_dropout=cfg_dropout)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update()
        losses.append(loss.item())
    if ema is not None:
        ema.write_back()
    return losses


def train_controlnet(
    base: DiTModel,
    branch: ControlNetBranch,
    latents: np.ndarray,
    control_latents: np.ndarray,
    semantic: np.ndarray | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    steps: int,
    batch_size: int = 12,
    lr: float = 1e-4,
    weight_decay: float = 1e-3,
    seconds_total: float = 1.0,
    cfg_dropout: float = 0.1,
    ema_decay: float | None = None,
) -> list[float]:
    """Train the control branch with the base frozen.

    Mirrors the noise-prediction objective of pretraining (including the
    optional weight averaging via ``ema_decay``); the optimizer only ever
    sees branch parameters, so a checksum of the base weights is unchanged
    by any number of steps.
    """
    if latents.shape[0] == 0:
        raise InvalidInput("empty training set")
    if control_latents.shape != latents.shape:
        raise ShapeError(
            "control latents must align with audio latents",
            latents.shape,
            control_latents.shape,
        )
    if any(True for _ in base.named_parameters()):
        raise InvalidInput("base model must be frozen; call attach_controlnet first")
    opt = AdamW(branch.parameters(), lr=lr, weight_decay=weight_decay)
    ema = None if ema_decay is None else _Ema(branch.parameters(), ema_decay)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, latents.shape[0], size=min(batch_size, latents.shape[0]))
        cond = ConditioningBundle(
            semantic=None if semantic is None else semantic[idx],
            seconds_total=seconds_total,
            control_latent=control_latents[idx],
        )

        def model(z_t, t, c):
            return controlled_forward(base, branch, z_t, t, c)

        opt.zero_grad()
        loss = ddpm_loss(model, latents[idx], cond, schedule, rng,
                         cfg_dropout=cfg_dropout)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update()
        losses.append(loss.item())
    if ema is not None:
        ema.write_back()
    return losses
