"""Evaluation metrics: envelope fit, class accuracy, Fréchet distance, cosine.

Fréchet distance between embedding sets follows the usual Gaussian
approximation: fit mean and covariance to each set, then compute
``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``. The matrix square
root of the product is evaluated through the symmetric form
``S_a^{1/2} S_b S_a^{1/2}``, which keeps everything in real PSD land.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Envelope, QuantizedEnvelope
from .errors import InvalidInput


@dataclass
class EmbeddingSet:
    """A bag of n row vectors in a common embedding space."""

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInput(f"embedding set must be (n, dim), got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise InvalidInput("embedding set contains non-finite rows")
        self.vectors = v

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MetricReport:
    """One evaluated pair, ready for JSON or CSV emission."""

    e_l1: float | None = None
    acc_at: dict[int, float] = field(default_factory=dict)
    frechet: float | None = None
    cosine_score: float | None = None

    def __post_init__(self):
        if self.e_l1 is not None and self.e_l1 < 0:
            raise InvalidInput("e_l1 must be >= 0")
        if self.frechet is not None and self.frechet < 0:
            raise InvalidInput("frechet must be >= 0")
        if self.cosine_score is not None and not -1.0 <= self.cosine_score <= 1.0:
            raise InvalidInput("cosine_score must be in [-1, 1]")
        for k, v in self.acc_at.items():
            if not 0.0 <= v <= 1.0:
                raise InvalidInput(f"acc@{k} must be in [0, 1], got {v}")

    def to_json(self) -> str:
        payload = {}
        if self.e_l1 is not None:
            payload["e_l1"] = self.e_l1
        if self.acc_at:
            payload["acc_at"] = {str(k): v for k, v in sorted(self.acc_at.items())}
        if self.frechet is not None:
            payload["frechet"] = self.frechet
        if self.cosine_score is not None:
            payload["cosine_score"] = self.cosine_score
        return json.dumps(payload)

    def csv_fields(self) -> dict:
        row = {"e_l1": self.e_l1, "frechet": self.frechet,
               "cosine_score": self.cosine_score}
        for k, v in sorted(self.acc_at.items()):
            row[f"acc_at_{k}"] = v
        return row

    def append_csv_row(self, path) -> None:
        row = self.csv_fields()
        path = Path(path)
        new_file = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(row))
            if new_file:
                writer.writeheader()
            writer.writerow(row)


def e_l1(a: Envelope, b: Envelope) -> float:
    """Mean absolute difference between two equal-length envelopes."""
    if len(a) != len(b):
        raise InvalidInput(
            f"envelope lengths differ: {len(a)} vs {len(b)}; resample first"
        )
    return float(np.abs(a.values - b.values).mean())


def acc_at_k(pred: QuantizedEnvelope, gt: QuantizedEnvelope, k: int) -> float:
    """Fraction of frames whose class error is strictly below k.

    acc@1 is exact-match accuracy; acc@num_classes is always 1.
    """
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if len(pred) != len(gt):
        raise InvalidInput(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if pred.num_classes != gt.num_classes:
        raise InvalidInput(
            f"class counts differ: {pred.num_classes} vs {gt.num_classes}"
        )
    return float((np.abs(pred.classes - gt.classes) < k).mean())


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues in [-1e-8, 0) are treated as numerical noise and clamped.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInput(f"need a square matrix, got shape {m.shape}")
    if np.abs(m - m.T).max() > 1e-8:
        raise InvalidInput("matrix is not symmetric within 1e-8")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    if vals.min() < -1e-8:
        raise InvalidInput(f"matrix has negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _mean_and_cov(s: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    mu = s.vectors.mean(axis=0)
    centered = s.vectors - mu
    cov = centered.T @ centered / (s.n - 1)
    return mu, cov


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    Uses unbiased covariance estimates. Small negative results from
    floating-point error are clamped to zero; anything below -1e-4 still
    clamps but emits a warning since it suggests an ill-conditioned input.
    """
    if a.dim != b.dim:
        raise InvalidInput(f"embedding dims differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise InvalidInput("need at least 2 vectors per set for covariance")
    mu_a, cov_a = _mean_and_cov(a)
    mu_b, cov_b = _mean_and_cov(b)
    diff = mu_a - mu_b
    root_a = matrix_sqrt_psd(cov_a)
    cross = matrix_sqrt_psd(root_a @ cov_b @ root_a)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    if value < -1e-4:
        warnings.warn(
            f"Fréchet distance clamped from {value:.3e}; inputs may be "
            "ill-conditioned",
            RuntimeWarning,
            stacklevel=2,
        )
    return max(value, 0.0)


def cosine_score(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """Mean cosine similarity over paired rows of two equally sized sets."""
    if a.n != b.n or a.dim != b.dim:
        raise InvalidInput(
            f"paired sets must match in shape: {a.vectors.shape} vs {b.vectors.shape}"
        )
    norm_a = np.linalg.norm(a.vectors, axis=1)
    norm_b = np.linalg.norm(b.vectors, axis=1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise InvalidInput("cosine similarity undefined for zero vectors")
    sims = (a.vectors * b.vectors).sum(axis=1) / (norm_a * norm_b)
    return float(sims.mean())
