"""Loudness-envelope DSP: RMS extraction, smoothing, mu-law quantization.

The chain implemented here turns a waveform into the classifier targets used
by the envelope predictor, and back:

    waveform -> normalize -> RMS frames -> smooth -> mu-law classes
             -> Gaussian label smoothing (training targets)
    classes  -> mu-law expand -> linear resample (generation control)

Everything is pure and operates on numpy arrays in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput


@dataclass
class Waveform:
    """Multi-channel sampled audio.

    ``samples`` is a (channels, length) float array; mono audio is stored as
    a single row. Values are expected in [-1, 1] once normalized.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise InvalidInput(f"samples must be 1-D or 2-D, got ndim={arr.ndim}")
        if arr.shape[0] not in (1, 2):
            raise InvalidInput(f"expected 1 or 2 channels, got {arr.shape[0]}")
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = arr

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def mono(self) -> np.ndarray:
        """Downmix to a 1-D array by averaging channels."""
        if self.channels == 1:
            return self.samples[0]
        return self.samples.mean(axis=0)


@dataclass
class RmsConfig:
    """Windowing and quantization parameters for envelope extraction.

    Defaults follow the reference recipe: 512-sample windows with hop 128,
    a 15-tap smoothing filter and 64 mu-law classes with mu = 63.
    """

    window: int = 512
    hop: int = 128
    smoothing_kernel: int = 15
    num_classes: int = 64
    mu: float | None = None

    def __post_init__(self):
        if self.hop < 1 or self.window < self.hop:
            raise InvalidInput(
                f"need window >= hop >= 1, got window={self.window} hop={self.hop}"
            )
        if self.smoothing_kernel < 1 or self.smoothing_kernel % 2 == 0:
            raise InvalidInput(
                f"smoothing_kernel must be odd >= 1, got {self.smoothing_kernel}"
            )
        if self.num_classes < 2:
            raise InvalidInput(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mu is None:
            self.mu = float(self.num_classes - 1)


@dataclass
class Envelope:
    """Continuous RMS curve with values in [0, 1].

    ``hop`` and ``source_sample_rate`` record how the frames map back to
    sample time: frame i starts at sample i * hop.
    """

    values: np.ndarray
    hop: int
    source_sample_rate: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise InvalidInput("envelope values must be a non-empty 1-D sequence")
        bad = invalid_value_index(vals)
        if bad is not None:
            raise InvalidInput(
                f"envelope value out of [0, 1] at index {bad}: {vals[bad]}"
            )
        self.values = vals

    def __len__(self) -> int:
        return self.values.size


@dataclass
class QuantizedEnvelope:
    """Mu-law class sequence; entries in [0, num_classes - 1].

    ``hop`` and ``source_sample_rate`` are carried along from the envelope
    that was quantized, when known, so expansion can restore them.
    """

    classes: np.ndarray
    num_classes: int
    hop: int = 1
    source_sample_rate: int = 0

    def __post_init__(self):
        cls = np.asarray(self.classes, dtype=np.int64)
        if cls.ndim != 1 or cls.size == 0:
            raise InvalidInput("class sequence must be non-empty and 1-D")
        if cls.min() < 0 or cls.max() >= self.num_classes:
            raise InvalidInput(
                f"classes must lie in [0, {self.num_classes - 1}], "
                f"got range [{cls.min()}, {cls.max()}]"
            )
        self.classes = cls

    def __len__(self) -> int:
        return self.classes.size


@dataclass
class TargetDistribution:
    """Per-frame class distributions used as cross-entropy targets."""

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise InvalidInput("target distribution must be (frames, num_classes)")
        if (p < 0).any():
            raise InvalidInput("target distribution has negative entries")
        sums = p.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise InvalidInput("each target frame must sum to 1 within 1e-6")
        self.probs = p

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def invalid_value_index(values: np.ndarray) -> int | None:
    """Index of the first value outside [0, 1], or None if all are valid."""
    bad = np.flatnonzero((values < 0.0) | (values > 1.0) | ~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def normalize_waveform(w: Waveform) -> Waveform:
    """Scale so the peak absolute sample is 1; all-zero input passes through.

    Args:
        w: Non-empty waveform.
    Returns:
        New waveform with the same shape and sample rate.
    """
    if w.num_samples == 0:
        raise InvalidInput("cannot normalize an empty waveform")
    peak = np.abs(w.samples).max()
    if peak == 0.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples / peak, w.sample_rate)


def compute_rms(w: Waveform, cfg: RmsConfig) -> Envelope:
    """Frame-level RMS envelope of a mono waveform.

    Frame i covers samples [i*hop, i*hop + window); windows running past the
    end of the signal are zero-padded, so the frame count is ceil(L / hop).

    Args:
        w: Mono waveform (downmix stereo first, or use channel_envelopes).
        cfg: Window/hop configuration.
    Returns:
        Envelope with ceil(L / hop) values in [0, 1].
    """
    if w.channels != 1:
        raise InvalidInput("compute_rms expects mono input; downmix or pick a channel")
    y = w.samples[0]
    n = y.size
    if n == 0:
        raise InvalidInput("cannot compute RMS of an empty signal")
    num_frames = -(-n // cfg.hop)  # ceil division
    csum = np.concatenate(([0.0], np.cumsum(y * y, dtype=np.float64)))
    starts = np.arange(num_frames) * cfg.hop
    ends = np.minimum(starts + cfg.window, n)
    energy = csum[ends] - csum[starts]
    values = np.sqrt(energy / cfg.window)
    # guard float fuzz so a peak-1 signal cannot yield 1 + eps
    np.clip(values, 0.0, 1.0, out=values)
    return Envelope(values, hop=cfg.hop, source_sample_rate=w.sample_rate)


def channel_envelopes(w: Waveform, cfg: RmsConfig) -> list[Envelope]:
    """Per-channel RMS envelopes of a (possibly stereo) waveform."""
    return [
        compute_rms(Waveform(w.samples[c], w.sample_rate), cfg)
        for c in range(w.channels)
    ]


def smooth_envelope(e: Envelope, kernel: int) -> Envelope:
    """Centered moving average with edge replication padding.

    Output length equals input length; a kernel of 1 is the identity.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidInput(f"smoothing kernel must be odd >= 1, got {kernel}")
    if kernel == 1:
        return Envelope(e.values.copy(), e.hop, e.source_sample_rate)
    pad = kernel // 2
    padded = np.pad(e.values, pad, mode="edge")
    smoothed = np.convolve(padded, np.full(kernel, 1.0 / kernel), mode="valid")
    np.clip(smoothed, 0.0, 1.0, out=smoothed)
    return Envelope(smoothed, e.hop, e.source_sample_rate)


def mu_law_compress(e: Envelope, cfg: RmsConfig) -> QuantizedEnvelope:
    """Quantize envelope values into equal log-domain bins.

    A value v in [0, 1] maps to class
    min(num_classes - 1, floor(log(1 + mu*v) / log(1 + mu) * num_classes)),
    which is monotone in v and sends exact silence to class 0.
    """
    v = e.values
    bad = invalid_value_index(v)
    if bad is not None:
        raise InvalidInput(f"envelope value out of [0, 1] at index {bad}")
    compressed = np.log1p(cfg.mu * v) / np.log1p(cfg.mu)
    classes = np.minimum(
        np.floor(compressed * cfg.num_classes).astype(np.int64),
        cfg.num_classes - 1,
    )
    return QuantizedEnvelope(
        classes, cfg.num_classes, hop=e.hop, source_sample_rate=e.source_sample_rate
    )


def mu_law_expand(q: QuantizedEnvelope, cfg: RmsConfig) -> Envelope:
    """Map each class back to the mu-law inverse of its bin center.

    Class c becomes v = ((1 + mu)^x - 1) / mu with x = (c + 0.5) / num_classes,
    so compress(expand(c)) == c for every class.
    """
    if q.num_classes != cfg.num_classes:
        raise InvalidInput(
            f"class count mismatch: envelope has {q.num_classes}, "
            f"config expects {cfg.num_classes}"
        )
    x = (q.classes + 0.5) / cfg.num_classes
    values = np.expm1(x * np.log1p(cfg.mu)) / cfg.mu
    return Envelope(
        values,
        hop=q.hop if q.hop else 1,
        source_sample_rate=q.source_sample_rate,
    )


def gaussian_label_smooth(
    q: QuantizedEnvelope, sigma: float = 1.0, window: int = 3
) -> TargetDistribution:
    """Spread each ground-truth class over its neighbors with Gaussian weights.

    Frames whose class is 0 (silence) stay one-hot at class 0. For any other
    ground-truth class c, nonzero classes within ``window`` of c get weight
    exp(-(c_i - c)^2 / (2 sigma^2)); class 0 is never part of the support.
    Each frame is normalized to sum to 1.

    Args:
        q: Quantized envelope.
        sigma: Gaussian width in class units.
        window: Half-width of the support in class units (>= 0).
    Returns:
        TargetDistribution of shape (frames, num_classes).
    """
    if sigma <= 0:
        raise InvalidInput(f"sigma must be positive, got {sigma}")
    if window < 0:
        raise InvalidInput(f"window must be >= 0, got {window}")
    frames = q.classes.size
    k = q.num_classes
    dist = np.zeros((frames, k), dtype=np.float64)

    offsets = np.arange(-window, window + 1)
    weights = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    cols = q.classes[:, np.newaxis] + offsets[np.newaxis, :]
    valid = (cols >= 1) & (cols < k) & (q.classes[:, np.newaxis] != 0)
    w = np.where(valid, weights[np.newaxis, :], 0.0)
    np.add.at(dist, (np.repeat(np.arange(frames), offsets.size), np.clip(cols, 0, k - 1).ravel()), w.ravel())

    silent = q.classes == 0
    dist[silent] = 0.0
    dist[silent, 0] = 1.0
    dist /= dist.sum(axis=1, keepdims=True)
    return TargetDistribution(dist)


def resample_envelope(e: Envelope, target_len: int) -> Envelope:
    """Linearly interpolate an envelope to a new length.

    Frame positions are normalized to [0, 1] on both sides, so the first and
    last values are preserved exactly.
    """
    if target_len < 1:
        raise InvalidInput(f"target_len must be >= 1, got {target_len}")
    n = len(e)
    if target_len == n:
        return Envelope(e.values.copy(), e.hop, e.source_sample_rate)
    if n == 1:
        values = np.full(target_len, e.values[0])
    else:
        src = np.linspace(0.0, 1.0, n)
        dst = np.linspace(0.0, 1.0, target_len)
        values = np.interp(dst, src, e.values)
    # hop is rescaled so the envelope still spans the same sample range
    new_hop = max(1, round(e.hop * n / target_len))
    return Envelope(values, hop=new_hop, source_sample_rate=e.source_sample_rate)


def envelope_to_targets(
    w: Waveform, cfg: RmsConfig, sigma: float = 1.0, window: int = 3
) -> tuple[Envelope, QuantizedEnvelope, TargetDistribution]:
    """Full target pipeline: normalize, RMS, smooth, quantize, label-smooth."""
    mono = Waveform(normalize_waveform(w).mono(), w.sample_rate)
    env = smooth_envelope(compute_rms(mono, cfg), cfg.smoothing_kernel)
    quant = mu_law_compress(env, cfg)
    return env, quant, gaussian_label_smooth(quant, sigma=sigma, window=window)
