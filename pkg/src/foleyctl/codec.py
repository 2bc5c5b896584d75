"""Learned latent audio codec: a strided linear transform and its adjoint.

Two stride-4 convolutions take mono audio to an 8-channel latent at 1/16th
the sample rate; two transposed convolutions mirror them back. There are no
nonlinearities, so the codec is a trainable lapped transform; training it on
reconstruction error makes it nearly orthogonal on the data distribution.
The same frozen codec encodes both the diffusion target audio and the
control envelope (rendered as a waveform).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Adam, ConvTranspose1d, Conv1d, Module, Tensor, no_grad
from .dsp import Waveform
from .errors import InvalidInput


@dataclass
class CodecConfig:
    downsample_factor: int = 16
    latent_channels: int = 8
    hidden_channels: int = 16

    def __post_init__(self):
        root = int(round(np.sqrt(self.downsample_factor)))
        if root * root != self.downsample_factor:
            raise InvalidInput(
                f"downsample_factor must be a perfect square (two equal-stride "
                f"stages), got {self.downsample_factor}"
            )
        self.stride = root


class LatentCodec(Module):
    """Encode (batch, 1, samples) audio to (batch, latent_channels, frames)."""

    def __init__(self, config: CodecConfig | None = None, rng=None, dtype=np.float32):
        super().__init__()
        self.config = config or CodecConfig()
        if rng is None:
            rng = np.random.default_rng(0)
        s = self.config.stride
        k, p = 2 * s, s // 2
        hid = self.config.hidden_channels
        lat = self.config.latent_channels
        # bias-free on purpose: silence must encode to the zero latent and
        # decode back to exact silence, with no learned DC offset
        self.enc1 = Conv1d(1, hid, k, rng, stride=s, padding=p, bias=False, dtype=dtype)
        self.enc2 = Conv1d(hid, lat, k, rng, stride=s, padding=p, bias=False, dtype=dtype)
        self.dec1 = ConvTranspose1d(lat, hid, k, rng, stride=s, padding=p, bias=False,
                                    dtype=dtype)
        self.dec2 = ConvTranspose1d(hid, 1, k, rng, stride=s, padding=p, bias=False,
                                    dtype=dtype)

    # -- batched graph-mode paths ------------------------------------------

    def encode_batch(self, x) -> Tensor:
        return self.enc2(self.enc1(x))

    def decode_batch(self, z) -> Tensor:
        return self.dec2(self.dec1(z))

    def forward(self, x) -> Tensor:
        return self.decode_batch(self.encode_batch(x))

    # -- single-clip numpy convenience -------------------------------------

    def encode(self, w: Waveform) -> np.ndarray:
        """Deterministically encode a mono waveform to (channels, frames).

        Input is zero-padded up to a multiple of the downsample factor, so
        the frame count is ceil(samples / downsample_factor).
        """
        if w.channels != 1:
            raise InvalidInput("codec expects mono input")
        if w.num_samples == 0:
            raise InvalidInput("cannot encode an empty waveform")
        factor = self.config.downsample_factor
        y = w.samples[0].astype(np.float32)
        pad = (-y.size) % factor
        if pad:
            y = np.concatenate([y, np.zeros(pad, dtype=np.float32)])
        with no_grad():
            z = self.encode_batch(Tensor(y[None, None, :]))
        return z.data[0]

    def decode(self, latent: np.ndarray, sample_rate: int,
               num_samples: int | None = None) -> Waveform:
        """Decode (channels, frames) back to a mono waveform.

        ``num_samples`` trims the padded tail so decode(encode(y)) keeps y's
        duration.
        """
        latent = np.asarray(latent, dtype=np.float32)
        if latent.ndim != 2 or latent.shape[0] != self.config.latent_channels:
            raise InvalidInput(
                f"latent must be ({self.config.latent_channels}, frames), "
                f"got {latent.shape}"
            )
        with no_grad():
            y = self.decode_batch(Tensor(latent[None]))
        out = y.data[0, 0]
        if num_samples is not None:
            out = out[:num_samples]
        return Waveform(out.astype(np.float64), sample_rate)

    def frames_for(self, num_samples: int) -> int:
        return -(-num_samples // self.config.downsample_factor)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-noise ratio of a reconstruction, in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    noise = ((reference - estimate) ** 2).sum()
    signal = (reference**2).sum()
    if signal == 0.0:
        raise InvalidInput("SNR undefined for an all-zero reference")
    if noise == 0.0:
        return float("inf")
    return float(10.0 * np.log10(signal / noise))


def train_codec(
    clips: np.ndarray,
    rng: np.random.Generator,
    config: CodecConfig | None = None,
    steps: int = 500,
    batch_size: int = 8,
    lr: float = 1e-3,
) -> tuple[LatentCodec, list[float]]:
    """Fit the codec on reconstruction MSE over an array of equal-length clips.

    Args:
        clips: (num_clips, samples) float array; samples must be a multiple
            of the downsample factor.
        rng: drives both weight init and batch sampling.
    Returns:
        The trained codec (left in eval mode) and the per-step loss log.
    """
    clips = np.asarray(clips, dtype=np.float32)
    if clips.ndim != 2 or clips.shape[0] == 0:
        raise InvalidInput("clips must be a non-empty (n, samples) array")
    codec = LatentCodec(config, rng)
    if clips.shape[1] % codec.config.downsample_factor:
        raise InvalidInput(
            f"clip length {clips.shape[1]} not divisible by factor "
            f"{codec.config.downsample_factor}"
        )
    opt = Adam(codec.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, clips.shape[0], size=min(batch_size, clips.shape[0]))
        batch = Tensor(clips[idx][:, None, :])
        opt.zero_grad()
        recon = codec(batch)
        diff = recon - batch
        loss = (diff * diff).mean()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    codec.eval()
    return codec, losses
