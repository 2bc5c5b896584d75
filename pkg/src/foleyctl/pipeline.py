"""End-to-end generation and checkpoint archives.

One loadable artifact bundles the audio codec, the base noise predictor,
the optional control branch, class embeddings and sampler defaults; one
generation call consumes it identically from the CLI, the HTTP service and
the test suite. Checkpoints are plain directories: a JSON manifest plus one
tensor file per parameter, so they diff and hash cleanly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig, LatentCodec
from .controlnet import ControlNetBranch, attach_controlnet, controlled_forward
from .diffusion import ConditioningBundle, SamplerConfig, sample
from .dit import DiTConfig, DiTModel
from .dsp import Envelope, RmsConfig, Waveform, compute_rms, resample_envelope
from .errors import FormatError, InvalidInput
from .formats import params_digest, read_envelope_json, read_tensor, write_tensor
from .metrics import e_l1
from .autodiff import no_grad

CHECKPOINT_FORMAT = "foleyctl-checkpoint"
PREDICTOR_FORMAT = "foleyctl-predictor"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# state-dict <-> tensor-file plumbing


def _write_state(out: Path, prefix: str, state: dict) -> list:
    """Write one tensor file per entry; returns [name, relative_path] pairs.

    Files are indexed, not named after the entries: state keys contain dots
    and could collide or escape the directory if used as file names.
    """
    pairs = []
    for i, name in enumerate(sorted(state)):
        rel = f"tensors/{prefix}.{i:04d}.ftns"
        write_tensor(out / rel, state[name])
        pairs.append([name, rel])
    return pairs


def _read_state(root: Path, pairs: list) -> dict:
    return {name: read_tensor(root / rel) for name, rel in pairs}


def _require(payload: dict, key: str, where: str):
    if key not in payload:
        raise FormatError(f"checkpoint manifest missing {key!r} in {where}")
    return payload[key]


# ---------------------------------------------------------------------------
# the generation bundle


@dataclass
class GenerationBundle:
    """Everything needed to turn an envelope and a class into audio."""

    codec: LatentCodec
    base: DiTModel
    branch: ControlNetBranch | None
    embeddings: np.ndarray | None  # (classes, cross_attn_dim)
    sampler: SamplerConfig
    sample_rate: int
    rms: RmsConfig
    step: int = 0
    # The noise schedule assumes roughly unit-variance data, but codec
    # latents come out much smaller; the noise predictor is trained on
    # latents multiplied by this factor, so sampling runs in the scaled
    # space and generation divides it back out before decoding.
    latent_scale: float = 1.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be > 0, got {self.sample_rate}")
        if not (np.isfinite(self.latent_scale) and self.latent_scale > 0):
            raise InvalidInput(
                f"latent_scale must be a positive number, got {self.latent_scale}"
            )
        if self.embeddings is not None:
            emb = np.asarray(self.embeddings, dtype=np.float64)
            if emb.ndim != 2:
                raise InvalidInput("embeddings must be (classes, dim)")
            self.embeddings = emb

    @property
    def num_classes(self) -> int:
        return 0 if self.embeddings is None else self.embeddings.shape[0]

    def save(self, path) -> Path:
        """Write the archive; returns the manifest path."""
        out = Path(path)
        (out / "tensors").mkdir(parents=True, exist_ok=True)
        codec_state = self.codec.state_dict()
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": FORMAT_VERSION,
            "step": self.step,
            "sample_rate": self.sample_rate,
            "latent_scale": self.latent_scale,
            "rms": asdict(self.rms),
            "sampler": json.loads(self.sampler.to_json()),
            "codec": {
                "config": asdict(self.codec.config),
                "tensors": _write_state(out, "codec", codec_state),
            },
            "base": {
                "config": self.base.config.to_json(),
                "tensors": _write_state(out, "base", self.base.state_dict()),
            },
            "branch": None,
            "embeddings": None,
            "codec_hash": params_digest(codec_state),
        }
        if self.branch is not None:
            manifest["branch"] = {
                "tensors": _write_state(out, "branch", self.branch.state_dict())
            }
        if self.embeddings is not None:
            write_tensor(out / "tensors/embeddings.ftns", self.embeddings)
            manifest["embeddings"] = "tensors/embeddings.ftns"
        target = out / "manifest.json"
        target.write_text(json.dumps(manifest, indent=2))
        return target

    @classmethod
    def load(cls, path) -> "GenerationBundle":
        root = Path(path)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except FileNotFoundError:
            raise FormatError(f"no checkpoint manifest under {root}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(
                f"not a generation checkpoint: format={manifest.get('format')!r}"
            )

        codec_info = _require(manifest, "codec", "manifest")
        codec = LatentCodec(CodecConfig(**codec_info["config"]))
        codec_state = _read_state(root, codec_info["tensors"])
        codec.load_state_dict(codec_state)
        if params_digest(codec_state) != _require(manifest, "codec_hash", "manifest"):
            raise FormatError("codec weights do not match their recorded hash")

        base_info = _require(manifest, "base", "manifest")
        base = DiTModel(DiTConfig.from_json(base_info["config"]))
        base.load_state_dict(_read_state(root, base_info["tensors"]))

        branch = None
        if manifest.get("branch") is not None:
            branch = attach_controlnet(base)
            branch.load_state_dict(_read_state(root, manifest["branch"]["tensors"]))

        embeddings = None
        if manifest.get("embeddings"):
            embeddings = read_tensor(root / manifest["embeddings"])

        bundle = cls(
            codec=codec.eval(),
            base=base.eval(),
            branch=branch.eval() if branch is not None else None,
            embeddings=embeddings,
            sampler=SamplerConfig.from_json(json.dumps(manifest["sampler"])),
            sample_rate=int(manifest["sample_rate"]),
            rms=RmsConfig(**manifest["rms"]),
            step=int(manifest.get("step", 0)),
            latent_scale=float(manifest.get("latent_scale", 1.0)),
        )
        return bundle


# ---------------------------------------------------------------------------
# generation


def control_latent_for(codec: LatentCodec, env: Envelope, num_samples: int,
                       sample_rate: int) -> np.ndarray:
    """Encode an envelope through the audio codec as if it were a waveform.

    The envelope is linearly resampled to the target audio length first, so
    its latent shares the diffusion latent's time axis exactly.
    """
    if num_samples < 1:
        raise InvalidInput(f"num_samples must be >= 1, got {num_samples}")
    values = resample_envelope(env, num_samples).values
    return codec.encode(Waveform(values, sample_rate))


def latent_scale_for(latents: np.ndarray) -> float:
    """Factor that rescales a corpus of codec latents to unit spread.

    Training multiplies every latent (audio and control alike) by this value
    and the resulting bundle records it, so the noise predictor always sees
    data matched to the schedule's unit-variance design point.
    """
    std = float(np.asarray(latents).std())
    if not np.isfinite(std) or std <= 0:
        raise InvalidInput("latents must have positive, finite spread")
    return 1.0 / std


@dataclass
class GenerationResult:
    """Audio plus the intermediates callers report or test against."""

    waveform: Waveform
    latent: np.ndarray
    measured: Envelope
    e_l1_vs_target: float | None


def generate(
    bundle: GenerationBundle,
    envelope: Envelope | None = None,
    semantic: np.ndarray | None = None,
    seconds_total: float | None = None,
    steps: int | None = None,
    cfg_scale: float | None = None,
    seed: int = 0,
) -> GenerationResult:
    """Sample one clip, optionally steered by an envelope and a class vector.

    With an envelope the control branch must be present; without one the
    base model runs alone, which is also the unconditional reference used
    when judging how much the control actually helps. Fixing ``seed`` fixes
    the output bytes.
    """
    if envelope is not None and bundle.branch is None:
        raise InvalidInput("bundle has no control branch; cannot condition on envelope")
    if seconds_total is None:
        if envelope is None or envelope.source_sample_rate <= 0:
            raise InvalidInput(
                "seconds_total is required unless the envelope records its timing"
            )
        seconds_total = len(envelope) * envelope.hop / envelope.source_sample_rate
    if seconds_total <= 0:
        raise InvalidInput(f"seconds_total must be > 0, got {seconds_total}")
    steps = bundle.sampler.steps if steps is None else steps
    cfg_scale = bundle.sampler.cfg_scale if cfg_scale is None else cfg_scale

    num_samples = int(round(seconds_total * bundle.sample_rate))
    frames = bundle.codec.frames_for(num_samples)
    channels = bundle.codec.config.latent_channels

    control = None
    if envelope is not None:
        control = control_latent_for(
            bundle.codec, envelope, num_samples, bundle.sample_rate
        ) * bundle.latent_scale

    if semantic is not None:
        semantic = np.asarray(semantic, dtype=np.float64)
        if semantic.ndim == 1:
            semantic = semantic[None]
        if semantic.ndim != 2:
            raise InvalidInput("semantic must be a vector or (tokens, dim)")
        semantic = semantic[None]  # one item

    cond = ConditioningBundle(
        semantic=semantic,
        seconds_start=0.0,
        seconds_total=float(seconds_total),
        control_latent=control,
    )

    if envelope is not None:
        def model(z, t, c):
            with no_grad():
                return controlled_forward(bundle.base, bundle.branch, z, t, c).data
    else:
        def model(z, t, c):
            with no_grad():
                return bundle.base(z, t, c).data

    rng = np.random.default_rng(seed)
    z = sample(
        model,
        (1, channels, frames),
        cond,
        bundle.sampler.schedule(),
        rng,
        steps=steps,
        cfg_scale=cfg_scale,
    )
    latent = z[0] / bundle.latent_scale
    w = bundle.codec.decode(latent, bundle.sample_rate, num_samples)
    measured = compute_rms(w, bundle.rms)

    score = None
    if envelope is not None:
        target = envelope
        if len(target.values) != len(measured.values):
            target = resample_envelope(target, len(measured.values))
        score = e_l1(target, measured)
    return GenerationResult(w, latent, measured, score)


# ---------------------------------------------------------------------------
# generation requests (the JSON the CLI and service accept)


@dataclass
class GenerationRequest:
    """Declarative generation job: artifact references plus sampler knobs."""

    envelope_ref: str | None = None
    semantic_label: int | None = None
    embedding_ref: str | None = None
    seconds_total: float | None = None
    steps: int | None = None
    cfg_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.semantic_label is not None and self.embedding_ref is not None:
            raise InvalidInput(
                "semantic_label and embedding_ref are mutually exclusive"
            )
        if self.seconds_total is not None and self.seconds_total <= 0:
            raise InvalidInput(
                f"seconds_total must be > 0, got {self.seconds_total}"
            )
        if self.steps is not None and self.steps < 1:
            raise InvalidInput(f"steps must be >= 1, got {self.steps}")

    def to_json(self) -> dict:
        payload = {"seed": self.seed}
        for key in ("envelope_ref", "semantic_label", "embedding_ref",
                    "seconds_total", "steps", "cfg_scale"):
            value = getattr(self, key)
            if value is not None:
                payload[key] = value
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "GenerationRequest":
        if not isinstance(payload, dict):
            raise InvalidInput("generation request must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise InvalidInput(f"unknown request fields: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise InvalidInput(f"bad generation request: {exc}") from exc

    def resolve(self, bundle: GenerationBundle, root=".") -> tuple:
        """Dereference artifact paths into (envelope, semantic vector)."""
        root = Path(root)
        envelope = None
        if self.envelope_ref is not None:
            envelope = read_envelope_json(root / self.envelope_ref)
        semantic = None
        if self.semantic_label is not None:
            if bundle.embeddings is None:
                raise InvalidInput("bundle carries no class embeddings")
            if not 0 <= self.semantic_label < bundle.num_classes:
                raise InvalidInput(
                    f"semantic_label must be in [0, {bundle.num_classes}), "
                    f"got {self.semantic_label}"
                )
            semantic = bundle.embeddings[self.semantic_label]
        elif self.embedding_ref is not None:
            semantic = read_tensor(root / self.embedding_ref)
        return envelope, semantic


def run_generation(bundle: GenerationBundle, request: GenerationRequest,
                   root=".") -> GenerationResult:
    """Resolve a request against ``root`` and run it. One call, all surfaces."""
    envelope, semantic = request.resolve(bundle, root)
    return generate(
        bundle,
        envelope=envelope,
        semantic=semantic,
        seconds_total=request.seconds_total,
        steps=request.steps,
        cfg_scale=request.cfg_scale,
        seed=request.seed,
    )


# ---------------------------------------------------------------------------
# predictor checkpoints


def save_predictor(path, model, rms: RmsConfig) -> Path:
    """Archive an envelope predictor next to its framing parameters."""
    from .predictor import EnvelopePredictor  # local: avoid import cycle

    if not isinstance(model, EnvelopePredictor):
        raise InvalidInput("save_predictor expects an EnvelopePredictor")
    out = Path(path)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": PREDICTOR_FORMAT,
        "version": FORMAT_VERSION,
        "config": model.config.to_json(),
        "rms": asdict(rms),
        "tensors": _write_state(out, "predictor", model.state_dict()),
    }
    target = out / "manifest.json"
    target.write_text(json.dumps(manifest, indent=2))
    return target


def load_predictor(path):
    """Returns (model, rms_config) from a predictor archive."""
    from .predictor import EnvelopePredictor, PredictorConfig

    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no predictor manifest under {root}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable predictor manifest: {exc}") from exc
    if manifest.get("format") != PREDICTOR_FORMAT:
        raise FormatError(
            f"not a predictor checkpoint: format={manifest.get('format')!r}"
        )
    model = EnvelopePredictor(PredictorConfig.from_json(manifest["config"]))
    model.load_state_dict(_read_state(root, manifest["tensors"]))
    return model.eval(), RmsConfig(**manifest["rms"])
