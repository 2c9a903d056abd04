"""Convex training workloads: synthetic datasets and their losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import kernels
from ..errors import ValidationError

QUADRATIC = "quadratic"
LOGISTIC = "logistic_regression_l2"
SVM = "linear_svm_l2"

_KIND_CODES = {QUADRATIC: kernels.QUADRATIC, LOGISTIC: kernels.LOGISTIC, SVM: kernels.HINGE}


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = QUADRATIC
    dimension: int = 20
    n_examples: int = 2048
    batch_size: int = 16
    learning_rate: float = 0.05
    l2_strength: float = 0.0
    seed: int = 0
    # quadratic only: Hessian spectrum, by default geometrically spaced in [c, L]
    eigenvalues: tuple[float, ...] | None = None
    strong_convexity: float = 0.002
    smoothness: float = 4.0
    spacing: str = "geometric"  # or "linear"
    # quadratic only: per-example curvatures vary by up to this relative amount
    curvature_spread: float = 0.5
    # classification only
    label_noise: float = 0.05
    # ASP applies a gradient that is s updates old with step lr / (1 + s)
    staleness_aware: bool = True

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValidationError(f"unknown workload kind {self.kind!r}")
        if self.dimension < 1 or self.n_examples < 1 or self.batch_size < 1:
            raise ValidationError("dimension, n_examples and batch_size must be positive")
        if self.batch_size > self.n_examples:
            raise ValidationError("batch_size exceeds n_examples")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.l2_strength < 0:
            raise ValidationError("l2_strength must be non-negative")
        if self.spacing not in ("geometric", "linear"):
            raise ValidationError(f"unknown spectrum spacing {self.spacing!r}")
        if self.kind == QUADRATIC:
            if self.l2_strength != 0:
                raise ValidationError("the quadratic workload takes its curvature from eigenvalues; l2_strength must be 0")
            if not 0 <= self.curvature_spread < 1:
                raise ValidationError("curvature_spread must lie in [0, 1)")
            eig = self.spectrum()
            if len(eig) != self.dimension or min(eig) <= 0:
                raise ValidationError("eigenvalues must be positive, one per dimension")
        if self.eigenvalues is not None:
            object.__setattr__(self, "eigenvalues", tuple(float(e) for e in self.eigenvalues))

    def spectrum(self) -> np.ndarray:
        if self.eigenvalues is not None:
            return np.asarray(self.eigenvalues, dtype=np.float64)
        if self.dimension == 1:
            return np.array([self.smoothness])
        if self.spacing == "linear":
            return np.linspace(self.strong_convexity, self.smoothness, self.dimension)
        return np.geomspace(self.strong_convexity, self.smoothness, self.dimension)

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if doc["eigenvalues"] is not None:
            doc["eigenvalues"] = list(doc["eigenvalues"])
        return doc

    @classmethod
    def from_json(cls, doc) -> WorkloadSpec:
        doc = dict(doc)
        if doc.get("eigenvalues") is not None:
            doc["eigenvalues"] = tuple(doc["eigenvalues"])
        return cls(**doc)


@dataclass(frozen=True)
class Dataset:
    spec: WorkloadSpec
    X: np.ndarray
    y: np.ndarray
    w0: np.ndarray
    w_star: np.ndarray | None = None
    eigenvalues: np.ndarray | None = field(default=None, repr=False)

    @property
    def kind_code(self) -> int:
        return _KIND_CODES[self.spec.kind]

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> float:
        """Smoothness constant of the empirical risk."""
        if self.eigenvalues is not None:
            return float(self.eigenvalues.max())
        top = float(np.linalg.eigvalsh(self.X.T @ self.X / self.n).max())
        scale = 0.25 if self.spec.kind == LOGISTIC else 1.0
        return scale * top + self.spec.l2_strength

    @property
    def c(self) -> float:
        """Strong-convexity constant of the empirical risk (0 if unknown)."""
        if self.eigenvalues is not None:
            return float(self.eigenvalues.min())
        return self.spec.l2_strength

    def to_csv(self, path) -> None:
        header = ",".join([f"x{i}" for i in range(self.dim)] + ["y"])
        np.savetxt(Path(path), np.column_stack([self.X, self.y]), delimiter=",", header=header, comments="")


def generate_dataset(spec: WorkloadSpec) -> Dataset:
    """Seeded synthetic data; bit-identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_examples, spec.dimension
    if spec.kind == QUADRATIC:
        # row i holds example i's diagonal curvatures; column means equal the
        # spectrum exactly, so the empirical risk is 0.5 * sum_k eig_k * w_k^2
        eig = spec.spectrum()
        spread = 1.0 + spec.curvature_spread * rng.uniform(-1.0, 1.0, (n, d))
        spread /= spread.mean(axis=0)
        X = spread * eig
        w0 = rng.standard_normal(d)
        return Dataset(spec, np.ascontiguousarray(X), np.zeros(n), w0, np.zeros(d), eig)
    X = rng.standard_normal((n, d)) / math.sqrt(d)
    w_true = rng.standard_normal(d) * 3.0
    y = np.where(X @ w_true >= 0, 1.0, -1.0)
    flip = rng.random(n) < spec.label_noise
    y[flip] = -y[flip]
    return Dataset(spec, np.ascontiguousarray(X), y, np.zeros(d), None, None)


def minibatch_loss(w: np.ndarray, dataset: Dataset, batch) -> float:
    """Mean per-example loss (with the l2 term) over ``batch`` row indices."""
    idx = np.ascontiguousarray(batch, dtype=np.int64)
    if len(idx) == 0:
        raise ValidationError("empty batch")
    grad = np.empty(dataset.dim)
    return kernels.loss_grad(dataset.kind_code, dataset.X, dataset.y, idx,
                             np.ascontiguousarray(w, dtype=np.float64), dataset.spec.l2_strength, grad)


def empirical_risk(w: np.ndarray, dataset: Dataset) -> float:
    """Full-dataset mean loss; the same reduction as ``minibatch_loss``."""
    return minibatch_loss(w, dataset, np.arange(dataset.n))


def example_losses(w: np.ndarray, dataset: Dataset) -> np.ndarray:
    """Per-example losses without the l2 term."""
    return kernels.example_losses(dataset.kind_code, dataset.X, dataset.y, np.ascontiguousarray(w, dtype=np.float64))
