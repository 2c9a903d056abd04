"""Gaussian-process regression with a Matern-5/2 ARD kernel."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels
from .errors import NumericalError, ValidationError

LENGTHSCALE_FACTORS = (0.1, 0.3, 1.0, 3.0)
NOISE_FACTORS = (1e-6, 1e-4, 1e-2, 1e-1)
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class KernelParams:
    lengthscales: tuple[float, ...]
    signal_variance: float = 1.0
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not all(v > 0 and math.isfinite(v) for v in ls):
            raise ValidationError("lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValidationError("signal_variance must be positive")
        if not self.noise_variance >= 0:
            raise ValidationError("noise_variance must be non-negative")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def inv_lengthscales(self) -> np.ndarray:
        return 1.0 / np.asarray(self.lengthscales)


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def matern_kernel(a, b, params: KernelParams) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape != (len(params.lengthscales),):
        raise ValidationError("dimension mismatch between points and lengthscales")
    return float(gram(a[None, :], b[None, :], params)[0, 0])


def gram(A, B, params: KernelParams) -> np.ndarray:
    return kernels.matern52_gram(A, B, params.inv_lengthscales, params.signal_variance)


@dataclass(frozen=True)
class GaussianProcessModel:
    inputs: np.ndarray
    targets: np.ndarray  # standardized
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    y_mean: float
    y_scale: float
    log_marginal_likelihood: float

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def predict(self, x) -> PosteriorPrediction:
        mean, var = self.predict_many(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return PosteriorPrediction(float(mean[0]), float(var[0]))

    def predict_many(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValidationError(f"expected points of dimension {self.dim}")
        Ks = gram(X, self.inputs, self.params)
        mean = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = self.params.signal_variance - np.einsum("ij,ij->j", v, v)
        var = np.maximum(var, 0.0)
        return self.y_mean + self.y_scale * mean, var * self.y_scale ** 2

    def to_json(self) -> dict:
        return {
            "inputs": self.inputs.tolist(),
            "targets": (self.y_mean + self.y_scale * self.targets).tolist(),
            "lengthscales": list(self.params.lengthscales),
            "signal_variance": self.params.signal_variance,
            "noise_variance": self.params.noise_variance,
            "standardize": not (self.y_mean == 0.0 and self.y_scale == 1.0),
            "log_marginal_likelihood": self.log_marginal_likelihood,
        }

    @classmethod
    def from_json(cls, doc) -> GaussianProcessModel:
        if isinstance(doc, str):
            doc = json.loads(doc)
        params = KernelParams(tuple(doc["lengthscales"]), doc["signal_variance"], doc["noise_variance"])
        return fit(doc["inputs"], doc["targets"], params=params, standardize=doc["standardize"])


def _factorize(K: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    n = len(K)
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(K + (noise + jitter) * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("Cholesky factorization failed at the largest jitter")


def _condition(X, y, params):
    K = gram(X, X, params)
    L, jitter = _factorize(K, params.noise_variance)
    alpha = cho_solve((L, True), y)
    n = len(y)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * n * math.log(2 * math.pi)
    return L, jitter, alpha, lml


def median_pairwise_distance(X: np.ndarray) -> np.ndarray:
    """Per-dimension median of |x_i - x_j| over distinct pairs; 1.0 where degenerate."""
    n = len(X)
    iu = np.triu_indices(n, k=1)
    out = np.ones(X.shape[1])
    if len(iu[0]):
        diffs = np.abs(X[iu[0]] - X[iu[1]])
        med = np.median(diffs, axis=0)
        out = np.where(med > 0, med, 1.0)
    return out


def fit(
    points: Sequence,
    targets: Sequence[float],
    params: KernelParams | None = None,
    standardize: bool = True,
    noise_factors: Sequence[float] = NOISE_FACTORS,
    lengthscale_factors: Sequence[float] = LENGTHSCALE_FACTORS,
) -> GaussianProcessModel:
    """Condition a GP on ``points``/``targets``.

    With ``params=None`` the hyperparameters are picked by log marginal
    likelihood over a grid; otherwise ``params`` is used as given.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y_raw = np.asarray(targets, dtype=np.float64)
    if X.shape[0] != len(y_raw):
        raise ValidationError("points and targets differ in length")
    if not np.all(np.isfinite(y_raw)) or not np.all(np.isfinite(X)):
        raise ValidationError("non-finite training data")
    n = len(y_raw)
    if n < (1 if params is not None else 2):
        raise ValidationError("not enough training points")

    if standardize:
        y_mean = float(y_raw.mean())
        y_scale = float(y_raw.std())
        if not y_scale > 0:
            y_scale = 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    y = (y_raw - y_mean) / y_scale

    if params is not None:
        if len(params.lengthscales) != X.shape[1]:
            raise ValidationError("lengthscale count does not match input dimension")
        candidates = [params]
    else:
        base = median_pairwise_distance(X)
        target_var = float(y.var()) if n > 1 and y.var() > 0 else 1.0
        candidates = [
            KernelParams(tuple(f * base), 1.0, nf * target_var)
            for f in lengthscale_factors
            for nf in noise_factors
        ]

    best = None
    last_error: Exception | None = None
    for cand in candidates:
        try:
            L, jitter, alpha, lml = _condition(X, y, cand)
        except NumericalError as exc:
            last_error = exc
            continue
        if best is None or lml > best[4]:
            best = (cand, L, jitter, alpha, lml)
    if best is None:
        raise NumericalError(str(last_error))
    cand, L, jitter, alpha, lml = best
    return GaussianProcessModel(X, y, cand, L, alpha, jitter, y_mean, y_scale, lml)


def predict(model: GaussianProcessModel, x) -> PosteriorPrediction:
    return model.predict(x)
