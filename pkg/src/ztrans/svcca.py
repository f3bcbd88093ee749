"""Sentence-level SVCCA over pooled hidden states."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .linalg import cca_fit, svd, truncate_by_variance
from .model import LayerTrace

DEFAULT_THRESHOLD = 0.99
DEFAULT_REGULARIZATION = 1e-6
MIN_SENTENCES = 4


@dataclass
class PooledSet:
    vectors: np.ndarray  # (n, d)
    side: str = ""
    layer: int = -1
    capture: str = "output"
    exclude_tag: bool = True

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidInputError(f"pooled vectors must be 2-D, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("pooled vectors contain non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def subset(self, index) -> "PooledSet":
        return PooledSet(self.vectors[index], self.side, self.layer, self.capture, self.exclude_tag)


def mean_pool(trace: LayerTrace, exclude_tag: bool = True) -> np.ndarray:
    """One mean vector per example over its real positions; (batch, d).

    Pad positions never count. With ``exclude_tag`` the leading tag position
    of encoder traces is dropped as well.
    """
    keep = np.array(trace.mask, dtype=bool)
    if exclude_tag and trace.has_tag:
        keep[:, 0] = False
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        bad = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateInputError(f"example {bad} has no positions left to pool")
    return (trace.states * keep[..., None]).sum(axis=1) / counts[:, None]


def pooled_set(trace: LayerTrace, exclude_tag: bool = True) -> PooledSet:
    return PooledSet(mean_pool(trace, exclude_tag), trace.side, trace.layer, trace.capture,
                     exclude_tag and trace.has_tag)


@dataclass
class SvccaReport:
    scores: np.ndarray  # per-sentence similarity
    dims_a: int
    dims_b: int
    dprime: int
    threshold: float
    layer: int = -1
    label: str = ""
    correlations: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def n(self) -> int:
        return int(self.scores.size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scores"] = [float(s) for s in self.scores]
        d["correlations"] = [float(c) for c in self.correlations]
        d["mean"] = self.mean
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvccaReport":
        d = {k: v for k, v in d.items() if k != "mean"}
        d["scores"] = np.asarray(d["scores"], dtype=np.float64)
        d["correlations"] = np.asarray(d.get("correlations", []), dtype=np.float64)
        return cls(**d)


@dataclass
class SvccaTransform:
    """Fitted centring, truncation and CCA maps for a pair of sets."""

    mean_a: np.ndarray
    mean_b: np.ndarray
    proj_a: np.ndarray  # (d_a, k_a)
    proj_b: np.ndarray
    w_a: np.ndarray  # (d', k_a)
    w_b: np.ndarray
    correlations: np.ndarray

    def project_a(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean_a) @ self.proj_a) @ self.w_a.T

    def project_b(self, y: np.ndarray) -> np.ndarray:
        return ((y - self.mean_b) @ self.proj_b) @ self.w_b.T


def _vectors(s) -> np.ndarray:
    return s.vectors if isinstance(s, PooledSet) else PooledSet(s).vectors


def fit_svcca(set_a, set_b, variance_threshold: float = DEFAULT_THRESHOLD,
              regularization: float = DEFAULT_REGULARIZATION) -> SvccaTransform:
    a, b = _vectors(set_a), _vectors(set_b)
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(f"sets must be index-aligned, got {a.shape[0]} and {b.shape[0]} rows")
    if a.shape[0] < MIN_SENTENCES:
        raise DegenerateInputError(
            f"SVCCA needs at least {MIN_SENTENCES} aligned sentences, got {a.shape[0]}; "
            "use a larger set")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - mean_a, b - mean_b
    proj_a = truncate_by_variance(svd(ac), variance_threshold)
    proj_b = truncate_by_variance(svd(bc), variance_threshold)
    cca = cca_fit(ac @ proj_a, bc @ proj_b, regularization)
    return SvccaTransform(mean_a, mean_b, proj_a, proj_b, cca.w_a, cca.w_b, cca.correlations)


def row_cosines(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine of matching rows; rows with a zero vector score 0."""
    num = np.einsum("ij,ij->i", x, y)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    out = np.zeros(x.shape[0])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def svcca_score(set_a, set_b, variance_threshold: float = DEFAULT_THRESHOLD,
                regularization: float = DEFAULT_REGULARIZATION) -> SvccaReport:
    """Fit on the whole aligned set, then score each sentence by projected cosine."""
    fit = fit_svcca(set_a, set_b, variance_threshold, regularization)
    a, b = _vectors(set_a), _vectors(set_b)
    scores = row_cosines(fit.project_a(a), fit.project_b(b))
    layer = set_a.layer if isinstance(set_a, PooledSet) else -1
    return SvccaReport(scores=scores, dims_a=fit.proj_a.shape[1], dims_b=fit.proj_b.shape[1],
                       dprime=fit.w_a.shape[0], threshold=variance_threshold, layer=layer,
                       correlations=fit.correlations)
