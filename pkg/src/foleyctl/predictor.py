"""Envelope prediction from frame-wise feature sequences.

Three conv -> batch-norm -> ReLU -> upsample blocks stretch the input
sequence to the envelope frame rate, a two-layer bidirectional LSTM
integrates context in both directions, and a linear head scores the mu-law
classes per frame. Framing this as classification over smoothed targets
(rather than amplitude regression) is deliberate: a regressor trained on
ambiguous data drifts toward the conditional mean, which is what
``mean_envelope_baseline`` makes measurable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam,
    BatchNorm1d,
    Conv1d,
    LSTM,
    Linear,
    Module,
    ModuleList,
    Tensor,
    as_tensor,
    cross_entropy_from_logits,
    no_grad,
    relu,
    upsample_linear,
)
from .dsp import (
    Envelope,
    QuantizedEnvelope,
    RmsConfig,
    gaussian_label_smooth,
    mu_law_compress,
    mu_law_expand,
)
from .errors import InvalidInput, ShapeError
from .metrics import acc_at_k, e_l1


@dataclass
class FeatureSequence:
    """A frames x dim matrix of per-frame conditioning features."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise InvalidInput("feature matrix must be (frames >= 1, dim)")
        if not np.isfinite(m).all():
            raise InvalidInput("feature matrix contains non-finite values")
        self.matrix = m

    @property
    def frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class PredictorConfig:
    """Network and target-smoothing hyperparameters.

    ``upsample_sizes`` fixes the temporal length after each block, so the
    output length depends only on the config, never on the input frame
    count. The last entry must equal the envelope frame count of the
    training data.
    """

    feature_dim: int = 16
    conv_channels: tuple = (32, 32, 32)
    kernel_size: int = 3
    upsample_sizes: tuple = (120, 240, 250)
    lstm_hidden: int = 32
    lstm_layers: int = 2
    num_classes: int = 64
    sigma: float = 1.0
    smooth_window: int = 3

    def __post_init__(self):
        if len(self.conv_channels) != len(self.upsample_sizes):
            raise InvalidInput(
                f"need one upsample size per conv block: "
                f"{len(self.conv_channels)} blocks, {len(self.upsample_sizes)} sizes"
            )
        sizes = tuple(self.upsample_sizes)
        if any(s < 1 for s in sizes) or any(
            a > b for a, b in zip(sizes, sizes[1:])
        ):
            raise InvalidInput(f"upsample_sizes must be non-decreasing >= 1, got {sizes}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise InvalidInput(f"kernel_size must be odd, got {self.kernel_size}")
        if self.num_classes < 2:
            raise InvalidInput(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def rms_frames(self) -> int:
        return self.upsample_sizes[-1]

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "upsample_sizes": list(self.upsample_sizes),
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
            "num_classes": self.num_classes,
            "sigma": self.sigma,
            "smooth_window": self.smooth_window,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PredictorConfig":
        kw = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        for key in ("conv_channels", "upsample_sizes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


class EnvelopePredictor(Module):
    """Feature sequence (batch, frames, dim) -> per-frame class logits."""

    def __init__(self, config: PredictorConfig | None = None, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.config = config or PredictorConfig()
        if rng is None:
            rng = np.random.default_rng(0)
        cfg = self.config
        pad = cfg.kernel_size // 2
        convs, bns = [], []
        in_ch = cfg.feature_dim
        for out_ch in cfg.conv_channels:
            convs.append(Conv1d(in_ch, out_ch, cfg.kernel_size, rng, padding=pad,
                                dtype=dtype))
            bns.append(BatchNorm1d(out_ch, dtype=dtype))
            in_ch = out_ch
        self.convs = ModuleList(convs)
        self.bns = ModuleList(bns)
        self.lstm = LSTM(in_ch, cfg.lstm_hidden, rng, num_layers=cfg.lstm_layers,
                         bidirectional=True, dtype=dtype)
        self.head = Linear(2 * cfg.lstm_hidden, cfg.num_classes, rng, dtype=dtype)

    def forward(self, feats) -> Tensor:
        x = as_tensor(feats)
        if x.ndim != 3 or x.shape[-1] != self.config.feature_dim:
            raise ShapeError(
                f"features must be (batch, frames, {self.config.feature_dim})",
                x.shape,
            )
        h = x.transpose(0, 2, 1)  # channels-first for the conv stack
        for conv, bn, size in zip(self.convs, self.bns, self.config.upsample_sizes):
            h = upsample_linear(relu(bn(conv(h))), size)
        seq = h.transpose(0, 2, 1)
        return self.head(self.lstm(seq))


def predict_envelope(
    model: EnvelopePredictor, feats, rms_cfg: RmsConfig
) -> tuple[QuantizedEnvelope, Envelope]:
    """Per-frame argmax classes and their mu-law expansion.

    ``rms_cfg`` supplies the class count and hop for the reconstructed
    envelope; it must agree with the classes the model was trained on.
    """
    if rms_cfg.num_classes != model.config.num_classes:
        raise InvalidInput(
            f"model predicts {model.config.num_classes} classes but config "
            f"expects {rms_cfg.num_classes}"
        )
    if isinstance(feats, FeatureSequence):
        feats = feats.matrix
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(feats.astype(np.float32))
    finally:
        if was_training:
            model.train()
    classes = np.argmax(logits.data[0], axis=-1)
    quant = QuantizedEnvelope(classes, model.config.num_classes, hop=rms_cfg.hop,
                              source_sample_rate=0)
    return quant, mu_law_expand(quant, rms_cfg)


def _stack_features(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        arr = features.astype(np.float32)
    else:
        arr = np.stack(
            [f.matrix if isinstance(f, FeatureSequence) else np.asarray(f)
             for f in features]
        ).astype(np.float32)
    if arr.ndim != 3:
        raise InvalidInput("features must stack to (n, frames, dim)")
    return arr


def _targets_for(envelopes: np.ndarray, config: PredictorConfig,
                 rms_cfg: RmsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Quantized classes and smoothed target stacks for an (n, frames) batch."""
    classes = np.empty(envelopes.shape, dtype=np.int64)
    probs = np.empty(envelopes.shape + (config.num_classes,), dtype=np.float32)
    for i, vals in enumerate(envelopes):
        env = Envelope(vals, rms_cfg.hop, 0)
        q = mu_law_compress(env, rms_cfg)
        classes[i] = q.classes
        probs[i] = gaussian_label_smooth(
            q, sigma=config.sigma, window=config.smooth_window
        ).probs
    return classes, probs


def mean_envelope_baseline(envelopes: np.ndarray) -> np.ndarray:
    """Per-frame mean of the training envelopes.

    This is the curve an underfit amplitude regressor converges to on
    ambiguous data (the conditional mean), so its E-L1 against held-out
    envelopes is the floor a useful predictor has to beat clearly.
    """
    envelopes = np.asarray(envelopes, dtype=np.float64)
    if envelopes.ndim != 2 or envelopes.shape[0] == 0:
        raise InvalidInput("need a non-empty (n, frames) envelope array")
    return envelopes.mean(axis=0)


def train_predictor(
    features,
    envelopes,
    config: PredictorConfig,
    rms_cfg: RmsConfig,
    rng: np.random.Generator,
    epochs: int = 30,
    batch_size: int = 8,
    lr: float = 1e-3,
    val_fraction: float = 0.2,
) -> tuple[EnvelopePredictor, list[dict]]:
    """Fit the classifier on (features, envelope) pairs.

    Cross-entropy against Gaussian-smoothed targets; a held-out split is
    scored every epoch on E-L1 and acc@{1,5,10}, and the weights with the
    best validation E-L1 are restored before returning.

    Args:
        features: (n, frames, dim) array or sequence of FeatureSequence.
        envelopes: (n, rms_frames) array of values in [0, 1].
        rng: drives the split, shuffling and weight init.
    Returns:
        The trained model (eval mode, best-E-L1 weights) and the per-epoch
        history: train_loss, val_e_l1, val_acc.
    """
    feats = _stack_features(features)
    envs = np.asarray(envelopes, dtype=np.float64)
    if feats.shape[0] == 0:
        raise InvalidInput("empty dataset")
    if envs.ndim != 2 or envs.shape[0] != feats.shape[0]:
        raise InvalidInput(
            f"envelopes must be (n={feats.shape[0]}, frames), got {envs.shape}"
        )
    if envs.shape[1] != config.rms_frames:
        raise InvalidInput(
            f"envelope length {envs.shape[1]} != configured output "
            f"{config.rms_frames}"
        )
    if rms_cfg.num_classes != config.num_classes:
        raise InvalidInput("rms config and predictor config disagree on classes")

    classes, probs = _targets_for(envs, config, rms_cfg)
    n = feats.shape[0]
    if n == 1:
        train_idx = val_idx = np.array([0])
    else:
        perm = rng.permutation(n)
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
        val_idx, train_idx = perm[:n_val], perm[n_val:]

    model = EnvelopePredictor(config, rng)
    opt = Adam(model.parameters(), lr=lr)
    history = []
    best = None

    for epoch in range(epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for lo in range(0, order.size, batch_size):
            idx = order[lo : lo + batch_size]
            opt.zero_grad()
            loss = cross_entropy_from_logits(model(feats[idx]), probs[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())

        val_e_l1, val_acc = _validate(model, feats[val_idx], envs[val_idx],
                                      classes[val_idx], rms_cfg)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_e_l1": val_e_l1,
                "val_acc": val_acc,
            }
        )
        if best is None or val_e_l1 < best[0]:
            best = (val_e_l1, {k: v.copy() for k, v in model.state_dict().items()})

    model.load_state_dict(best[1])
    model.eval()
    return model, history


def _validate(model, feats, envs, classes, rms_cfg: RmsConfig):
    model.eval()
    with no_grad():
        logits = model(feats)
    pred = np.argmax(logits.data, axis=-1)
    e_l1_scores, acc = [], {1: [], 5: [], 10: []}
    for i in range(feats.shape[0]):
        q = QuantizedEnvelope(pred[i], rms_cfg.num_classes, hop=rms_cfg.hop,
                              source_sample_rate=0)
        truth = QuantizedEnvelope(classes[i], rms_cfg.num_classes,
                                  hop=rms_cfg.hop, source_sample_rate=0)
        e_l1_scores.append(
            e_l1(mu_law_expand(q, rms_cfg), Envelope(envs[i], rms_cfg.hop, 0))
        )
        for k in acc:
            acc[k].append(acc_at_k(q, truth, k))
    return float(np.mean(e_l1_scores)), {k: float(np.mean(v)) for k, v in acc.items()}
