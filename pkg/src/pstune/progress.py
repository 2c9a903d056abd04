"""Statistical progress estimation from a segment of the loss trace.

A segment run under one setting is assumed to follow

    j = j0 + (H / l) * ln(d / l)

where ``j0`` is the iteration just before the segment started. ``d`` is
fixed by a policy, ``H`` is fitted, and the curve is then evaluated at the
convergence threshold to predict the total iteration count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import remove_outliers
from .errors import FitError, InsufficientDataError, ValidationError

D_INFLATION = 1e-9


@dataclass(frozen=True)
class StatelessConstant:
    d_value: float

    def __post_init__(self):
        if not self.d_value > 0:
            raise ValidationError("StatelessConstant needs d_value > 0")

    name = "stateless"


@dataclass(frozen=True)
class BoundedSupremum:
    name = "bounded"


@dataclass(frozen=True)
class StatefulFirstLoss:
    name = "stateful"


DPolicy = StatelessConstant | BoundedSupremum | StatefulFirstLoss


def policy_from_name(name: str, d_value: float | None = None) -> DPolicy:
    if name in ("bounded", "bounded_supremum"):
        return BoundedSupremum()
    if name in ("stateful", "stateful_first_loss"):
        return StatefulFirstLoss()
    if name in ("stateless", "stateless_constant"):
        if d_value is None:
            raise ValidationError("the stateless policy needs a d value")
        return StatelessConstant(float(d_value))
    raise ValidationError(f"unknown d-policy {name!r}")


@dataclass
class Segment:
    """Loss/time trace of one setting.

    ``j0``/``anchor_loss`` is the iteration (and its loss) just before the
    segment; ``js``/``losses``/``times`` are the segment's own iterations.
    """

    j0: int
    anchor_loss: float
    js: np.ndarray
    losses: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.js = np.asarray(self.js, dtype=np.float64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.js.shape != self.losses.shape:
            raise ValidationError("js and losses must have equal length")


@dataclass(frozen=True)
class ConvergenceFit:
    H: float
    d: float
    j0: int
    n_points: int
    residual_rms: float

    def predicted_iteration(self, loss: float) -> float:
        return self.j0 + self.H / loss * math.log(self.d / loss)

    def to_json(self) -> dict:
        return {"H": self.H, "d": self.d, "j0": self.j0, "n_points": self.n_points,
                "residual_rms": self.residual_rms}


@dataclass(frozen=True)
class RemainingEstimate:
    r: int
    t_bar: float
    Y: float
    fit: ConvergenceFit | None = None
    policy: str = ""

    def to_json(self) -> dict:
        return {"r": self.r, "t_bar": self.t_bar, "Y": self.Y, "policy": self.policy}


def select_d(policy: DPolicy, losses: Sequence[float]) -> float:
    """Choose ``d`` for a segment whose ``losses[0]`` is the loss at the switch point."""
    ls = np.asarray(losses, dtype=np.float64)
    if len(ls) < 2:
        raise ValidationError("select_d needs the switch-point loss plus at least one more")
    if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
        raise ValidationError("losses must be finite and positive")
    first, rest = float(ls[0]), ls[1:]
    if isinstance(policy, BoundedSupremum):
        d = min(2.0 * first, float(rest.max()))
    elif isinstance(policy, StatefulFirstLoss):
        d = first
    elif isinstance(policy, StatelessConstant):
        d = float(policy.d_value)
    else:
        raise ValidationError(f"unknown d-policy {policy!r}")
    if np.any(rest == d):
        d *= 1.0 + D_INFLATION
    return d


def fit_H(js: Sequence[float], losses: Sequence[float], d: float, j0: int) -> ConvergenceFit:
    """Least-squares ``H`` through the origin on ``j - j0 = H * ln(d/l) / l``."""
    js = np.asarray(js, dtype=np.float64)
    ls = np.asarray(losses, dtype=np.float64)
    if len(ls) < 2 or len(np.unique(ls)) < 2:
        raise InsufficientDataError("need at least two pairs with distinct losses")
    if np.any(ls <= 0):
        raise ValidationError("losses must be positive")
    bad = np.flatnonzero(ls >= d)
    if len(bad):
        i = int(bad[0])
        raise FitError(f"loss {float(ls[i])!r} at j={int(js[i])} is not below d={float(d)!r}")
    y = js - j0
    if np.any(y <= 0):
        raise FitError("segment iterations must come after j0")
    x = np.log(d / ls) / ls
    H = float(np.dot(x, y) / np.dot(x, x))
    rms = float(np.sqrt(np.mean((y - H * x) ** 2)))
    return ConvergenceFit(H=H, d=float(d), j0=int(j0), n_points=len(ls), residual_rms=rms)


def remaining_iterations(fit: ConvergenceFit, epsilon: float, j_now: int) -> int:
    """Iterations left before the fitted curve reaches ``epsilon``."""
    if not 0 < epsilon < fit.d:
        raise ValidationError(f"epsilon must lie in (0, d={fit.d}), got {epsilon}")
    if j_now < fit.j0:
        raise ValidationError("j_now precedes the segment start")
    k = math.floor(fit.H / epsilon * math.log(fit.d / epsilon)) + fit.j0
    return max(k - int(j_now), 0)


def mean_iteration_time(times: Sequence[float]) -> float:
    if len(times) == 0:
        raise ValidationError("no iteration times")
    return float(np.mean(remove_outliers(list(times))))


def estimate_remaining_time(
    segment: Segment,
    epsilon: float,
    policy: DPolicy,
    j_now: int | None = None,
    fallback_d: float | None = None,
) -> RemainingEstimate:
    """Remaining seconds ``Y = t_bar * r`` for continuing under the segment's setting.

    ``j_now`` defaults to the segment's last iteration. If the policy's ``d``
    cannot be fitted, one retry uses a constant ``d`` (``fallback_d``, or
    twice the largest loss in the segment).
    """
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    t_bar = mean_iteration_time(segment.times)
    if j_now is None:
        j_now = int(segment.js[-1])
    if len(segment.losses) and segment.losses[-1] <= epsilon:
        return RemainingEstimate(0, t_bar, 0.0, None, policy.name)

    all_losses = np.concatenate([[segment.anchor_loss], segment.losses])
    attempts = [policy]
    if not isinstance(policy, StatelessConstant) or fallback_d is not None:
        fallback = fallback_d if fallback_d is not None else 2.0 * float(all_losses.max())
        attempts.append(StatelessConstant(fallback))
    last_exc: Exception | None = None
    for pol in attempts:
        try:
            d = select_d(pol, all_losses)
            fit = fit_H(segment.js, segment.losses, d, segment.j0)
            r = remaining_iterations(fit, epsilon, j_now)
        except InsufficientDataError:
            raise
        except (FitError, ValidationError) as exc:
            last_exc = exc
            continue
        return RemainingEstimate(r, t_bar, t_bar * r, fit, pol.name)
    raise FitError(str(last_exc)) from last_exc


def q_lower_bound_check(L: float, c: float) -> bool:
    """True when the smoothness/strong-convexity ratio ``q = L / c`` is at least 1."""
    if not (L > 0 and c > 0):
        raise ValidationError("L and c must be positive")
    return L / c >= 1.0
