"""Deterministic synthetic sound-event bench.

Each clip is a single decaying tone (one timbre class) re-struck at random
onsets: the carrier is one sinusoid and the events sum in the amplitude
domain, so the clip's RMS envelope has a closed form and overlapping events
never produce interference terms. Features are an invertible
linear-resample-and-project function of the envelope, which makes the
envelope-prediction task information-theoretically solvable, and every clip
is derived from (seed, clip index) alone so a dataset regenerates
bit-identically anywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Envelope, RmsConfig, Waveform, compute_rms, resample_envelope
from .errors import InvalidInput
from .formats import (
    ManifestEntry,
    parse_manifest,
    read_envelope_json,
    read_tensor,
    read_wav,
    write_envelope_json,
    write_manifest,
    write_tensor,
    write_wav,
)
from .predictor import FeatureSequence

# fixed projection/embedding generators, shared by every dataset regardless
# of its seed: the feature map and class embeddings are part of the bench
# definition, not of any one dataset draw
_FEATURE_MATRIX_SEED = 271828
_EMBEDDING_SEED = 314159

# amplitude-domain sine power: RMS of sin over a long window is 1/sqrt(2)
_SINE_RMS = 1.0 / np.sqrt(2.0)

_PEAK_CEILING = 0.95


@dataclass
class ToySpec:
    """Generation parameters for the synthetic bench."""

    sample_rate: int = 4000
    clip_seconds: float = 2.0
    timbre_freqs: tuple = (220.0, 440.0, 880.0, 1760.0)
    min_events: int = 0
    max_events: int = 3
    decay_seconds: float = 0.2
    amp_range: tuple = (0.3, 0.9)
    feature_frames: int = 60
    feature_dim: int = 16
    hard_mode: bool = False
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        nyquist = self.sample_rate / 2
        if any(f <= 0 or f >= nyquist for f in self.timbre_freqs):
            raise InvalidInput(
                f"timbre frequencies must lie in (0, {nyquist}), got "
                f"{self.timbre_freqs}"
            )
        if not 0 <= self.min_events <= self.max_events:
            raise InvalidInput(
                f"need 0 <= min_events <= max_events, got "
                f"[{self.min_events}, {self.max_events}]"
            )
        if self.clip_seconds <= 0 or self.decay_seconds <= 0:
            raise InvalidInput("clip_seconds and decay_seconds must be positive")
        if not 0 < self.amp_range[0] <= self.amp_range[1] < 1:
            raise InvalidInput(f"amp_range must satisfy 0 < lo <= hi < 1, "
                               f"got {self.amp_range}")

    @property
    def num_samples(self) -> int:
        return int(round(self.sample_rate * self.clip_seconds))

    @property
    def num_timbres(self) -> int:
        return len(self.timbre_freqs)

    def to_json(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "clip_seconds": self.clip_seconds,
            "timbre_freqs": list(self.timbre_freqs),
            "min_events": self.min_events,
            "max_events": self.max_events,
            "decay_seconds": self.decay_seconds,
            "amp_range": list(self.amp_range),
            "feature_frames": self.feature_frames,
            "feature_dim": self.feature_dim,
            "hard_mode": self.hard_mode,
            "noise_level": self.noise_level,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ToySpec":
        kw = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        for key in ("timbre_freqs", "amp_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def toy_rms_config() -> RmsConfig:
    """Envelope framing for the bench: 32 ms windows, 8 ms hop at 4 kHz.

    No smoothing: the raw RMS is the conditioning ground truth, which keeps
    the closed-form envelope comparison exact.
    """
    return RmsConfig(window=128, hop=32, smoothing_kernel=1)


@dataclass
class ToyClip:
    """One generated example with everything downstream stages consume."""

    waveform: Waveform
    envelope: Envelope
    timbre: int
    features: FeatureSequence
    onsets: np.ndarray = field(repr=False)
    amps: np.ndarray = field(repr=False)


def clip_rng(spec: ToySpec, index: int) -> np.random.Generator:
    """Per-clip generator: derived, not sequential, so generation order and
    parallelism cannot change the dataset."""
    return np.random.default_rng((spec.seed, index))


def burst_amplitude(spec: ToySpec, onsets: np.ndarray, amps: np.ndarray,
                    times: np.ndarray) -> np.ndarray:
    """Summed exponential decays: A(t) = sum_e a_e exp(-(t - t_e)/tau)."""
    a = np.zeros_like(times)
    for onset, amp in zip(onsets, amps):
        mask = times >= onset
        a[mask] += amp * np.exp(-(times[mask] - onset) / spec.decay_seconds)
    return a


def _draw_events(spec: ToySpec, rng: np.random.Generator):
    count = int(rng.integers(spec.min_events, spec.max_events + 1))
    onsets = np.sort(rng.uniform(0.0, 0.9 * spec.clip_seconds, size=count))
    amps = rng.uniform(spec.amp_range[0], spec.amp_range[1], size=count)
    if count:
        # keep the summed amplitude under 1 so envelope values stay in [0, 1];
        # scaling every event preserves the closed form
        times = np.arange(spec.num_samples) / spec.sample_rate
        peak = burst_amplitude(spec, onsets, amps, times).max()
        if peak > _PEAK_CEILING:
            amps = amps * (_PEAK_CEILING / peak)
    return onsets, amps


def render_waveform(spec: ToySpec, timbre: int, onsets: np.ndarray,
                    amps: np.ndarray) -> Waveform:
    """Amplitude-modulated single carrier at the class frequency."""
    times = np.arange(spec.num_samples) / spec.sample_rate
    carrier = np.sin(2 * np.pi * spec.timbre_freqs[timbre] * times)
    return Waveform(burst_amplitude(spec, onsets, amps, times) * carrier,
                    spec.sample_rate)


def analytic_envelope(spec: ToySpec, onsets: np.ndarray, amps: np.ndarray,
                      cfg: RmsConfig | None = None) -> Envelope:
    """Closed-form RMS of a rendered clip, up to the carrier ripple.

    The envelope of sum-of-decays times a sine is A(t) * rms(sin); windowed
    RMS evaluates A at sample resolution and replaces the oscillator power
    by its 1/2 average, so the only deviation from the measured curve is the
    O(1/(f*window)) ripple of sin^2 within each window.
    """
    cfg = cfg or toy_rms_config()
    times = np.arange(spec.num_samples) / spec.sample_rate
    a = burst_amplitude(spec, onsets, amps, times) * _SINE_RMS
    return compute_rms(Waveform(a, spec.sample_rate), cfg)


def feature_matrix(spec: ToySpec) -> np.ndarray:
    """Fixed lift from envelope chunks to feature space, (chunk, dim)."""
    rng = np.random.default_rng(_FEATURE_MATRIX_SEED)
    chunk = 4
    return rng.normal(0.0, 1.0 / np.sqrt(chunk),
                      size=(chunk, spec.feature_dim))


def envelope_features(spec: ToySpec, env: Envelope,
                      rng: np.random.Generator | None = None) -> FeatureSequence:
    """Invertible envelope -> feature map at a lower frame rate.

    The envelope is linearly resampled onto feature_frames * 4 points,
    folded into 4-value chunks, and lifted through a fixed full-rank random
    matrix. Hard mode adds Gaussian noise on top.
    """
    chunk = 4
    down = resample_envelope(env, spec.feature_frames * chunk)
    folded = down.values.reshape(spec.feature_frames, chunk)
    feats = folded @ feature_matrix(spec)
    if spec.hard_mode:
        if rng is None:
            raise InvalidInput("hard mode needs the clip rng for its noise")
        feats = feats + rng.normal(0.0, spec.noise_level, size=feats.shape)
    return FeatureSequence(feats)


def semantic_embeddings(spec: ToySpec) -> np.ndarray:
    """One fixed unit-norm, mutually orthogonal row per timbre class."""
    dim = spec.feature_dim
    if spec.num_timbres > dim:
        raise InvalidInput(
            f"cannot build {spec.num_timbres} orthogonal embeddings in "
            f"dimension {dim}"
        )
    rng = np.random.default_rng(_EMBEDDING_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return np.ascontiguousarray(q[: spec.num_timbres])


def gen_clip(spec: ToySpec, rng: np.random.Generator,
             timbre: int | None = None) -> ToyClip:
    """Generate one clip; draws timbre, onsets and amplitudes from ``rng``."""
    if timbre is None:
        timbre = int(rng.integers(0, spec.num_timbres))
    elif not 0 <= timbre < spec.num_timbres:
        raise InvalidInput(f"timbre must be in [0, {spec.num_timbres}), got {timbre}")
    onsets, amps = _draw_events(spec, rng)
    w = render_waveform(spec, timbre, onsets, amps)
    env = compute_rms(w, toy_rms_config())
    feats = envelope_features(spec, env, rng)
    return ToyClip(w, env, timbre, feats, onsets, amps)


def gen_dataset(spec: ToySpec, num_clips: int) -> list[ToyClip]:
    """Generate clips 0..num_clips-1, each from its derived rng.

    Timbres rotate round-robin so every class is equally represented; the
    event structure stays fully random per clip.
    """
    if num_clips < 1:
        raise InvalidInput(f"num_clips must be >= 1, got {num_clips}")
    return [
        gen_clip(spec, clip_rng(spec, i), timbre=i % spec.num_timbres)
        for i in range(num_clips)
    ]


# ---------------------------------------------------------------------------
# on-disk dataset layout


def write_dataset(spec: ToySpec, num_clips: int, out_dir) -> Path:
    """Emit WAVs, feature tensors, envelope JSONs and a manifest.

    Layout under ``out_dir``: audio/, features/, envelopes/, plus
    spec.json, embeddings.ftns and manifest.jsonl. Returns the manifest
    path.
    """
    out = Path(out_dir)
    for sub in ("audio", "features", "envelopes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    clips = gen_dataset(spec, num_clips)
    entries = []
    for i, clip in enumerate(clips):
        name = f"toy{i:04d}c{clip.timbre}_0.0_{spec.clip_seconds}"
        audio = out / "audio" / f"{name}.wav"
        feats = out / "features" / f"{name}.ftns"
        env = out / "envelopes" / f"{name}.json"
        write_wav(audio, clip.waveform, bit_depth=32)
        write_tensor(feats, clip.features.matrix)
        write_envelope_json(env, clip.envelope)
        entries.append(
            ManifestEntry(
                f"toy{i:04d}c{clip.timbre}",
                0.0,
                float(spec.clip_seconds),
                audio_path=str(audio.relative_to(out)),
                feature_path=str(feats.relative_to(out)),
                extra={"timbre": clip.timbre,
                       "envelope_path": str(env.relative_to(out))},
            )
        )
    write_tensor(out / "embeddings.ftns", semantic_embeddings(spec))
    (out / "spec.json").write_text(json.dumps(spec.to_json(), indent=2))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


@dataclass
class ToyDataset:
    """In-memory view of a written dataset, stacked for training."""

    spec: ToySpec
    waveforms: np.ndarray  # (n, samples)
    envelopes: np.ndarray  # (n, rms_frames)
    features: np.ndarray  # (n, feature_frames, feature_dim)
    timbres: np.ndarray  # (n,)
    embeddings: np.ndarray  # (num_timbres, feature_dim)

    def __len__(self):
        return self.waveforms.shape[0]

    def semantic_for(self, indices) -> np.ndarray:
        """Per-clip embedding tokens (n, 1, dim) for the given rows."""
        return self.embeddings[self.timbres[np.asarray(indices)]][:, None, :]


def load_dataset(root) -> ToyDataset:
    root = Path(root)
    spec = ToySpec.from_json(json.loads((root / "spec.json").read_text()))
    entries = parse_manifest(root / "manifest.jsonl")
    waves, envs, feats, timbres = [], [], [], []
    for entry in entries:
        w = read_wav(root / entry.audio_path)
        waves.append(w.samples[0])
        envs.append(read_envelope_json(root / entry.extra["envelope_path"]).values)
        feats.append(read_tensor(root / entry.feature_path))
        timbres.append(int(entry.extra["timbre"]))
    return ToyDataset(
        spec,
        np.stack(waves),
        np.stack(envs),
        np.stack(feats).astype(np.float64),
        np.asarray(timbres, dtype=np.int64),
        read_tensor(root / "embeddings.ftns").astype(np.float64),
    )
