"""Knob space, setting encoding and the execution-metrics repository."""

from __future__ import annotations

import json
import math
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSegmentWarning, FitError, SequencingError, ValidationError

INTEGER = "integer"
REAL = "real"
ORDINAL = "ordinal"
NOMINAL = "nominal"
BOOLEAN = "boolean"
KINDS = (INTEGER, REAL, ORDINAL, NOMINAL, BOOLEAN)


@dataclass(frozen=True)
class KnobSpec:
    """One tunable system knob and its domain.

    Range kinds use ``lo``/``hi``; categorical kinds use ``levels``.
    """

    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"knob {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in (INTEGER, REAL):
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValidationError(f"knob {self.name!r}: need lo < hi")
        if self.kind in (ORDINAL, NOMINAL):
            levels = tuple(self.levels)
            if not levels or len(set(levels)) != len(levels):
                raise ValidationError(f"knob {self.name!r}: levels must be non-empty and unique")
            object.__setattr__(self, "levels", levels)
        if self.kind == BOOLEAN:
            object.__setattr__(self, "levels", (False, True))

    @classmethod
    def integer(cls, name, lo, hi):
        return cls(name, INTEGER, int(lo), int(hi))

    @classmethod
    def real(cls, name, lo, hi):
        return cls(name, REAL, float(lo), float(hi))

    @classmethod
    def ordinal(cls, name, levels):
        return cls(name, ORDINAL, levels=tuple(levels))

    @classmethod
    def nominal(cls, name, levels):
        return cls(name, NOMINAL, levels=tuple(levels))

    @classmethod
    def boolean(cls, name):
        return cls(name, BOOLEAN)

    @property
    def width(self) -> int:
        return len(self.levels) if self.kind == NOMINAL else 1

    @property
    def cardinality(self) -> float:
        if self.kind == REAL:
            return math.inf
        if self.kind == INTEGER:
            return int(self.hi) - int(self.lo) + 1
        return len(self.levels)

    def validate(self, value):
        """Return ``value`` coerced to the knob's native type, or raise."""
        if self.kind == INTEGER:
            if isinstance(value, bool) or not float(value).is_integer():
                raise ValidationError(f"knob {self.name!r}: {value!r} is not an integer")
            value = int(value)
            if not self.lo <= value <= self.hi:
                raise ValidationError(f"knob {self.name!r}: {value} outside [{self.lo}, {self.hi}]")
            return value
        if self.kind == REAL:
            value = float(value)
            if not (math.isfinite(value) and self.lo <= value <= self.hi):
                raise ValidationError(f"knob {self.name!r}: {value} outside [{self.lo}, {self.hi}]")
            return value
        if self.kind == BOOLEAN:
            if not isinstance(value, (bool, np.bool_)):
                raise ValidationError(f"knob {self.name!r}: {value!r} is not a boolean")
            return bool(value)
        if value not in self.levels:
            raise ValidationError(f"knob {self.name!r}: {value!r} not in {self.levels}")
        return value

    def encode(self, value) -> list[float]:
        value = self.validate(value)
        if self.kind in (INTEGER, REAL):
            return [(value - self.lo) / (self.hi - self.lo)]
        if self.kind == BOOLEAN:
            return [1.0 if value else 0.0]
        idx = self.levels.index(value)
        if self.kind == ORDINAL:
            return [idx / (len(self.levels) - 1) if len(self.levels) > 1 else 0.0]
        bits = [0.0] * len(self.levels)
        bits[idx] = 1.0
        return bits

    def decode(self, coords: Sequence[float]):
        if self.kind == NOMINAL:
            return self.levels[int(np.argmax(coords))]
        u = float(coords[0])
        if self.kind == REAL:
            return self.lo + u * (self.hi - self.lo)
        if self.kind == INTEGER:
            return int(np.clip(np.rint(self.lo + u * (self.hi - self.lo)), self.lo, self.hi))
        if self.kind == BOOLEAN:
            return u >= 0.5
        k = len(self.levels) - 1
        return self.levels[int(np.clip(np.rint(u * k), 0, k))] if k else self.levels[0]

    def to_json(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.kind in (INTEGER, REAL):
            out.update(lo=self.lo, hi=self.hi)
        elif self.kind in (ORDINAL, NOMINAL):
            out["levels"] = list(self.levels)
        return out

    @classmethod
    def from_json(cls, doc: Mapping) -> KnobSpec:
        kind = doc["kind"]
        if kind == INTEGER:
            return cls.integer(doc["name"], doc["lo"], doc["hi"])
        if kind == REAL:
            return cls.real(doc["name"], doc["lo"], doc["hi"])
        if kind == BOOLEAN:
            return cls.boolean(doc["name"])
        return cls(doc["name"], kind, levels=tuple(doc["levels"]))


class SystemSetting(Mapping):
    """An immutable, hashable assignment of knob values."""

    __slots__ = ("_items", "_hash")

    def __init__(self, assignments: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()):
        items = dict(assignments)
        self._items = tuple(sorted(items.items()))
        self._hash = hash(self._items)

    def __getitem__(self, key):
        for k, v in self._items:
            if k == key:
                return v
        raise KeyError(key)

    def __iter__(self):
        return (k for k, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if isinstance(other, SystemSetting):
            return self._items == other._items
        return NotImplemented

    def __repr__(self):
        return f"SystemSetting({dict(self._items)!r})"

    @property
    def id(self) -> str:
        """Stable textual identifier, e.g. ``num_workers=4,threads=2``."""
        return ",".join(f"{k}={_fmt(v)}" for k, v in self._items)

    def replace(self, **changes) -> SystemSetting:
        items = dict(self._items)
        items.update(changes)
        return SystemSetting(items)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class KnobSpace:
    knobs: tuple[KnobSpec, ...]

    def __post_init__(self):
        knobs = tuple(self.knobs)
        names = [k.name for k in knobs]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate knob names in {names}")
        object.__setattr__(self, "knobs", knobs)

    @property
    def names(self) -> list[str]:
        return [k.name for k in self.knobs]

    @property
    def dim(self) -> int:
        """Encoded dimensionality of a setting (without the loss coordinate)."""
        return sum(k.width for k in self.knobs)

    def __getitem__(self, name) -> KnobSpec:
        for k in self.knobs:
            if k.name == name:
                return k
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(k.name == name for k in self.knobs)

    def validate(self, setting: Mapping) -> SystemSetting:
        unknown = set(setting) - set(self.names)
        if unknown:
            raise ValidationError(f"unknown knob(s): {sorted(unknown)}")
        missing = set(self.names) - set(setting)
        if missing:
            raise ValidationError(f"unassigned knob(s): {sorted(missing)}")
        return SystemSetting({k.name: k.validate(setting[k.name]) for k in self.knobs})

    def size(self) -> float:
        return math.prod(k.cardinality for k in self.knobs)

    def enumerate(self) -> list[SystemSetting]:
        """Every setting of a finite space, in lexicographic knob order."""
        if not math.isfinite(self.size()):
            raise ValidationError("cannot enumerate a space with real-valued knobs")
        grids = []
        for k in self.knobs:
            if k.kind == INTEGER:
                grids.append(list(range(int(k.lo), int(k.hi) + 1)))
            else:
                grids.append(list(k.levels))
        out = []
        for combo in _product(grids):
            out.append(SystemSetting(zip(self.names, combo)))
        return out

    def decode(self, coords: Sequence[float]) -> SystemSetting:
        """Inverse of ``encode_setting`` on the setting part of ``coords``."""
        values = {}
        pos = 0
        for k in self.knobs:
            values[k.name] = k.decode(coords[pos:pos + k.width])
            pos += k.width
        return SystemSetting(values)

    def to_json(self) -> list:
        return [k.to_json() for k in self.knobs]

    @classmethod
    def from_json(cls, doc: Sequence[Mapping]) -> KnobSpace:
        return cls(tuple(KnobSpec.from_json(d) for d in doc))


def _product(grids):
    if not grids:
        yield ()
        return
    for head in grids[0]:
        for tail in _product(grids[1:]):
            yield (head,) + tail


def encode_setting(setting: Mapping, space: KnobSpace, loss: float, loss_scale: float = 1.0) -> np.ndarray:
    """Encode ``<setting, loss>`` as a GP input of length ``space.dim + 1``.

    Range knobs are min-max scaled to [0, 1], ordinals become their scaled
    rank, nominal knobs are one-hot. The loss is divided by ``loss_scale``
    (the run's initial loss).
    """
    if not (math.isfinite(loss) and loss >= 0):
        raise ValidationError(f"loss must be finite and >= 0, got {loss}")
    if not loss_scale > 0:
        raise ValidationError("loss_scale must be positive")
    setting = space.validate(setting)
    coords: list[float] = []
    for k in space.knobs:
        coords.extend(k.encode(setting[k.name]))
    coords.append(loss / loss_scale)
    return np.asarray(coords, dtype=np.float64)


# ---------------------------------------------------------------------------
# Metrics repository


@dataclass(frozen=True)
class MetricRecord:
    j: int
    setting_id: str
    t: float
    l: float

    def __post_init__(self):
        if self.j < 0:
            raise ValidationError(f"iteration index must be >= 0, got {self.j}")
        if not (math.isfinite(self.t) and self.t > 0):
            raise ValidationError(f"iteration time must be > 0, got {self.t}")
        if not (math.isfinite(self.l) and self.l >= 0):
            raise ValidationError(f"loss must be finite and >= 0, got {self.l}")

    def to_json(self) -> dict:
        return {"j": self.j, "setting_id": self.setting_id, "t": self.t, "l": self.l}


@dataclass(frozen=True)
class SegmentSpan:
    """A maximal run of consecutive records under one setting."""

    setting_id: str
    start: int  # index into records
    stop: int  # exclusive

    @property
    def j0(self) -> int:
        """Iteration index of the segment's first record."""
        return self.start  # records are gap-free from j = 0


@dataclass(frozen=True)
class TrainingTriple:
    setting_id: str
    loss_at_switch: float
    remaining_time: float


class MetricsRepository:
    """Append-only store of ``<j, X, t, l>`` records plus a settings catalog.

    Reconfiguration events share the stream as typed records.
    """

    def __init__(self, l_init: float | None = None):
        self.l_init = l_init
        self._records: list[MetricRecord] = []
        self._segments: list[SegmentSpan] = []
        self._settings: dict[str, SystemSetting] = {}
        self._events: list[dict] = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple[MetricRecord, ...]:
        return tuple(self._records)

    @property
    def segments(self) -> tuple[SegmentSpan, ...]:
        return tuple(self._segments)

    @property
    def events(self) -> tuple[dict, ...]:
        return tuple(self._events)

    @property
    def settings(self) -> dict[str, SystemSetting]:
        return dict(self._settings)

    def register(self, setting: SystemSetting) -> str:
        sid = setting.id
        self._settings.setdefault(sid, setting)
        return sid

    def setting(self, setting_id: str) -> SystemSetting:
        return self._settings[setting_id]

    def append(self, rec: MetricRecord) -> None:
        with self._lock:
            expected = self._records[-1].j + 1 if self._records else 0
            if rec.j != expected:
                raise SequencingError(f"expected iteration {expected}, got {rec.j}")
            if rec.setting_id not in self._settings:
                raise ValidationError(f"setting {rec.setting_id!r} is not registered")
            idx = len(self._records)
            self._records.append(rec)
            if self._segments and self._segments[-1].setting_id == rec.setting_id:
                last = self._segments[-1]
                self._segments[-1] = SegmentSpan(last.setting_id, last.start, idx + 1)
            else:
                self._segments.append(SegmentSpan(rec.setting_id, idx, idx + 1))

    def log_event(self, event: Mapping) -> None:
        with self._lock:
            self._events.append({"type": "reconfig", **event})

    def segment_records(self, seg: SegmentSpan) -> tuple[MetricRecord, ...]:
        return tuple(self._records[seg.start:seg.stop])

    def loss_before(self, seg: SegmentSpan) -> float:
        """Loss of the iteration just before ``seg`` (the initial loss for the first)."""
        if seg.start == 0:
            if self.l_init is None:
                raise ValidationError("repository has no initial loss")
            return self.l_init
        return self._records[seg.start - 1].l

    def arrays(self, seg: SegmentSpan | None = None):
        recs = self._records if seg is None else self._records[seg.start:seg.stop]
        js = np.fromiter((r.j for r in recs), dtype=np.int64, count=len(recs))
        ts = np.fromiter((r.t for r in recs), dtype=np.float64, count=len(recs))
        ls = np.fromiter((r.l for r in recs), dtype=np.float64, count=len(recs))
        return js, ts, ls

    # -- persistence ------------------------------------------------------

    def save(self, stream_path, catalog_path) -> None:
        """Write records/events as JSON Lines and the settings catalog as JSON."""
        lines = [json.dumps({"type": "init", "l": self.l_init})]
        ev = iter(self._events)
        pending = next(ev, None)
        for rec in self._records:
            while pending is not None and pending["j"] <= rec.j:
                lines.append(json.dumps(pending, sort_keys=True))
                pending = next(ev, None)
            lines.append(json.dumps(rec.to_json()))
        while pending is not None:
            lines.append(json.dumps(pending, sort_keys=True))
            pending = next(ev, None)
        Path(stream_path).write_text("\n".join(lines) + "\n")
        catalog = {sid: dict(s) for sid, s in sorted(self._settings.items())}
        Path(catalog_path).write_text(json.dumps(catalog, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stream_path, catalog_path) -> MetricsRepository:
        catalog = json.loads(Path(catalog_path).read_text())
        repo = cls()
        for sid, values in catalog.items():
            setting = SystemSetting(values)
            if setting.id != sid:
                raise ValidationError(f"catalog key {sid!r} does not match its setting")
            repo._settings[sid] = setting
        for line in Path(stream_path).read_text().splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            kind = doc.get("type")
            if kind == "init":
                repo.l_init = doc["l"]
            elif kind == "reconfig":
                repo._events.append(doc)
            else:
                repo.append(MetricRecord(doc["j"], doc["setting_id"], doc["t"], doc["l"]))
        return repo


def append_metric(repo: MetricsRepository, rec: MetricRecord) -> None:
    repo.append(rec)


# ---------------------------------------------------------------------------
# Preprocessing


def outlier_mask(values: Sequence[float], k: float = 3.0, cap: float = 0.2) -> np.ndarray:
    """Boolean keep-mask for a median/MAD outlier filter.

    A pass drops points whose absolute deviation from the median exceeds
    ``k`` times the median absolute deviation. Passes repeat until nothing
    is flagged, but at most ``floor(cap * n)`` points go in total; when that
    budget binds, the farthest flagged points go first.
    """
    x = np.asarray(values, dtype=np.float64)
    keep = np.ones(len(x), dtype=bool)
    budget = int(math.floor(cap * len(x)))
    while budget > 0:
        idx = np.flatnonzero(keep)
        cur = x[idx]
        dev = np.abs(cur - np.median(cur))
        flagged = np.flatnonzero(dev > k * np.median(dev))
        if len(flagged) == 0:
            break
        if len(flagged) > budget:
            order = np.argsort(-dev[flagged], kind="stable")
            flagged = flagged[order[:budget]]
        keep[idx[flagged]] = False
        budget -= len(flagged)
    return keep


def remove_outliers(values: Sequence[float]) -> list[float]:
    if len(values) == 0:
        raise ValidationError("remove_outliers needs at least one value")
    keep = outlier_mask(values)
    return [v for v, kept in zip(values, keep) if kept]


def _trend_residuals(js: np.ndarray, ls: np.ndarray) -> np.ndarray:
    # Residuals of log-loss about a straight line in j: a steadily falling
    # loss curve is not itself an outlier.
    logl = np.log(np.maximum(ls, np.finfo(float).tiny))
    if len(js) < 3 or np.ptp(js) == 0:
        return logl
    slope, icept = np.polyfit(js.astype(float), logl, 1)
    return logl - (slope * js + icept)


def build_training_triples(
    repo: MetricsRepository,
    epsilon: float,
    policy=None,
    estimator: Callable | None = None,
    loss_convention: str = "before_switch",
) -> list[TrainingTriple]:
    """Turn each setting segment into a ``<X, loss_at_switch, Y>`` triple.

    ``loss_convention`` is ``"before_switch"`` (loss of the iteration right
    before the segment) or ``"first_iteration"`` (loss of its first
    iteration). Segments that cannot be fitted are skipped with a
    ``DegenerateSegmentWarning``.
    """
    from . import progress

    if policy is None:
        policy = progress.BoundedSupremum()
    if estimator is None:
        estimator = progress.estimate_remaining_time
    if loss_convention not in ("before_switch", "first_iteration"):
        raise ValidationError(f"unknown loss convention {loss_convention!r}")
    _, _, all_losses = repo.arrays()
    run_max = max(float(all_losses.max()) if len(all_losses) else 0.0, repo.l_init or 0.0)

    triples = []
    for seg in repo.segments:
        js, ts, ls = repo.arrays(seg)
        anchor = repo.loss_before(seg)
        keep = outlier_mask(_trend_residuals(js, ls))
        if keep.sum() < 2:
            warnings.warn(f"segment {seg.setting_id} at j={seg.j0}: fewer than 2 points", DegenerateSegmentWarning)
            continue
        if np.ptp(ls[keep]) == 0:
            warnings.warn(f"segment {seg.setting_id} at j={seg.j0}: constant loss", DegenerateSegmentWarning)
            continue
        segment = progress.Segment(
            j0=seg.j0 - 1, anchor_loss=anchor, js=js[keep], losses=ls[keep], times=ts
        )
        try:
            est = estimator(segment, epsilon, policy, j_now=segment.j0, fallback_d=2.0 * run_max)
        except FitError as exc:
            warnings.warn(f"segment {seg.setting_id} at j={seg.j0}: {exc}", DegenerateSegmentWarning)
            continue
        loss_at_switch = anchor if loss_convention == "before_switch" else float(ls[0])
        triples.append(TrainingTriple(seg.setting_id, loss_at_switch, float(est.Y)))
    return triples
