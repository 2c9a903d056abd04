"""Expected improvement and candidate-setting generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import BOOLEAN, INTEGER, NOMINAL, ORDINAL, REAL, KnobSpace, SystemSetting, encode_setting
from .errors import ValidationError
from .gp import GaussianProcessModel

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def norm_pdf(z: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


def expected_improvement(mean: float, std: float, best: float) -> float:
    """Expected reduction below ``best`` of ``Y ~ N(mean, std**2)`` (minimisation)."""
    if not (math.isfinite(mean) and math.isfinite(std) and math.isfinite(best)):
        raise ValidationError("expected_improvement needs finite inputs")
    if std < 0:
        raise ValidationError("std must be non-negative")
    if std == 0:
        return 0.0
    gap = best - mean
    z = gap / std
    return max(gap * norm_cdf(z) + std * norm_pdf(z), 0.0)


def expected_improvement_lognormal(mu: float, sigma: float, best: float) -> float:
    """Expected reduction below ``best`` of ``Y = exp(Z)``, ``Z ~ N(mu, sigma**2)``.

    Used when the model is fitted to log remaining times; the result is in
    the same unit as ``best``.
    """
    if not (math.isfinite(mu) and math.isfinite(sigma) and math.isfinite(best)):
        raise ValidationError("expected_improvement_lognormal needs finite inputs")
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if best <= 0:
        return 0.0
    if sigma == 0:
        return max(best - math.exp(mu), 0.0)
    z = (math.log(best) - mu) / sigma
    return max(best * norm_cdf(z) - math.exp(mu + 0.5 * sigma * sigma) * norm_cdf(z - sigma), 0.0)


@dataclass(frozen=True)
class AcquisitionResult:
    setting: SystemSetting
    ei_seconds: float
    predicted_mean: float
    predicted_std: float


def _stratified_reals(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    strata = rng.permutation(size)
    return strata, (strata + rng.random(size)) / size


def orthogonal_sample(space: KnobSpace, size: int, seed: int) -> list[SystemSetting]:
    """Latin-hypercube sample of ``size`` settings, deterministic in ``seed``.

    Each range knob gets exactly one draw per equal-width stratum; integer
    knobs are rounded half-to-even and kept inside their stratum. Categorical
    knobs cycle through a permuted level order. Duplicates are dropped.
    """
    if size < 1:
        raise ValidationError("sample size must be >= 1")
    rng = np.random.default_rng(seed)
    columns: dict[str, list] = {}
    for knob in space.knobs:
        if knob.kind in (REAL, INTEGER):
            strata, u = _stratified_reals(size, rng)
            vals = knob.lo + u * (knob.hi - knob.lo)
            if knob.kind == REAL:
                columns[knob.name] = [float(v) for v in vals]
            else:
                columns[knob.name] = [_round_in_stratum(knob.lo, knob.hi, size, s, v) for s, v in zip(strata, vals)]
        elif knob.kind == ORDINAL:
            k = len(knob.levels)
            strata, u = _stratified_reals(size, rng)
            ranks = [_round_in_stratum(0, k - 1, size, s, u_ * (k - 1)) for s, u_ in zip(strata, u)] if k > 1 else [0] * size
            columns[knob.name] = [knob.levels[r] for r in ranks]
        else:  # NOMINAL, BOOLEAN
            order = rng.permutation(len(knob.levels))
            offset = int(rng.integers(len(knob.levels)))
            columns[knob.name] = [knob.levels[order[(i + offset) % len(order)]] for i in range(size)]
        # categorical columns are cycled, then decorrelated from the others
        if knob.kind in (NOMINAL, BOOLEAN):
            perm = rng.permutation(size)
            columns[knob.name] = [columns[knob.name][p] for p in perm]
    out: list[SystemSetting] = []
    seen = set()
    for i in range(size):
        s = SystemSetting({name: col[i] for name, col in columns.items()})
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _round_in_stratum(lo, hi, size, stratum, value) -> int:
    width = (hi - lo) / size
    left = lo + stratum * width
    right = lo + (stratum + 1) * width
    first = math.ceil(left) if stratum == 0 else math.floor(left) + 1
    last = math.floor(right + 1e-12)
    v = int(np.rint(value))
    if first <= last:
        v = min(max(v, first), last)
    return int(min(max(v, lo), hi))


def random_sample(space: KnobSpace, size: int, seed: int) -> list[SystemSetting]:
    """Independent uniform draws (the non-stratified alternative)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        values = {}
        for knob in space.knobs:
            if knob.kind == REAL:
                values[knob.name] = float(rng.uniform(knob.lo, knob.hi))
            elif knob.kind == INTEGER:
                values[knob.name] = int(rng.integers(knob.lo, knob.hi + 1))
            else:
                values[knob.name] = knob.levels[int(rng.integers(len(knob.levels)))]
        out.append(SystemSetting(values))
    return out


def propose_next(
    model: GaussianProcessModel,
    candidates: Sequence[SystemSetting],
    executed: Sequence[SystemSetting],
    current_loss: float,
    best_remaining: float,
    space: KnobSpace,
    loss_scale: float = 1.0,
    log_targets: bool = False,
) -> AcquisitionResult:
    """Pick the setting with the largest EI at ``current_loss``.

    Ties go to the lower predicted mean, then to the earlier position in
    ``candidates + executed``. With ``log_targets`` the model predicts log
    remaining time; EI is still reported in seconds and the predicted mean
    is the posterior median ``exp(mu)``.
    """
    pool: list[SystemSetting] = []
    seen = set()
    for s in list(candidates) + list(executed):
        if s not in seen:
            seen.add(s)
            pool.append(s)
    if not pool:
        raise ValidationError("no candidate settings")
    X = np.stack([encode_setting(s, space, current_loss, loss_scale) for s in pool])
    means, variances = model.predict_many(X)
    stds = np.sqrt(variances)
    ei_fn = expected_improvement_lognormal if log_targets else expected_improvement
    eis = [ei_fn(float(m), float(sd), best_remaining) for m, sd in zip(means, stds)]
    best_i = min(range(len(pool)), key=lambda i: (-eis[i], means[i], i))
    mean = math.exp(means[best_i]) if log_targets else float(means[best_i])
    return AcquisitionResult(pool[best_i], eis[best_i], mean, float(stds[best_i]))
